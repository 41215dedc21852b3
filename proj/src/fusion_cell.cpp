#include "dvmvs/fusion_cell.hpp"

#include <string>

namespace dvmvs {

RecurrentState zero_state(const CellConfig& config, int batch, int height, int width) {
  RecurrentState state;
  state.hidden = Tensor::zeros({batch, config.channels, height, width});
  if (config.kind == CellKind::kConvLstm) {
    state.cell = Tensor::zeros({batch, config.channels, height, width});
  }
  return state;
}

FusionCell::FusionCell(const CellConfig& config, std::mt19937_64& rng) : config_(config) {
  if (config.configuration < 1 || config.configuration > 5) {
    throw ContractViolation("FusionCell: configuration must be in 1..5");
  }
  const int c = config.channels;
  if (config.kind == CellKind::kConvLstm) {
    gates_ = Conv2d(2 * c, 4 * c, 3, 1, config.gate_bias, rng);
    if (config.configuration == 3) alpha_ = Tensor::scalar(1.0, true);
  } else {
    gates_ = Conv2d(2 * c, 2 * c, 3, 1, config.gate_bias, rng);
    candidate_ = Conv2d(2 * c, c, 3, 1, config.gate_bias, rng);
  }
}

RecurrentState FusionCell::step(const Tensor& input, const RecurrentState& previous) const {
  return config_.kind == CellKind::kConvLstm ? convlstm_step(input, previous)
                                             : convgru_step(input, previous);
}

RecurrentState FusionCell::convlstm_step(const Tensor& input,
                                         const RecurrentState& previous) const {
  if (config_.kind != CellKind::kConvLstm) {
    throw ContractViolation("convlstm_step on a ConvGRU cell");
  }
  if (!previous.hidden.defined() || !previous.cell.defined() ||
      input.shape() != previous.hidden.shape() || input.shape() != previous.cell.shape()) {
    throw ContractViolation("convlstm_step: input " + shape_string(input.shape()) +
                            " does not match state");
  }
  const int c = config_.channels;
  const Tensor z = gates_(concat_channels({input, previous.hidden}));
  Tensor zi = slice_channels(z, 0, c);
  Tensor zf = slice_channels(z, c, c);
  Tensor zo = slice_channels(z, 2 * c, c);
  Tensor zg = slice_channels(z, 3 * c, c);
  const int layout = config_.configuration;

  if (layout == 4) {
    zi = layer_norm_spatial(zi);
    zf = layer_norm_spatial(zf);
    zo = layer_norm_spatial(zo);
  }
  const Tensor i = sigmoid(zi);
  const Tensor f = sigmoid(zf);
  const Tensor o = sigmoid(zo);

  Tensor g;
  switch (layout) {
    case 1: g = elu(zg); break;
    case 2: g = tanh(zg); break;
    case 3: g = mul_by_scalar_tensor(tanh(zg), alpha_); break;
    default: g = elu(layer_norm_spatial(zg)); break;
  }
  Tensor cell = add(mul(f, previous.cell), mul(i, g));
  if (layout >= 4) cell = layer_norm_spatial(cell);

  Tensor activated;
  switch (layout) {
    case 2: activated = tanh(cell); break;
    case 3: activated = mul_by_scalar_tensor(tanh(cell), alpha_); break;
    default: activated = elu(cell); break;
  }
  RecurrentState next;
  next.hidden = mul(o, activated);
  next.cell = cell;
  next.poses = previous.poses;
  next.intrinsics = previous.intrinsics;
  return next;
}

RecurrentState FusionCell::convgru_step(const Tensor& input,
                                        const RecurrentState& previous) const {
  if (config_.kind != CellKind::kConvGru) {
    throw ContractViolation("convgru_step on a ConvLSTM cell");
  }
  if (!previous.hidden.defined() || input.shape() != previous.hidden.shape()) {
    throw ContractViolation("convgru_step: input " + shape_string(input.shape()) +
                            " does not match state");
  }
  const int c = config_.channels;
  const Tensor z = gates_(concat_channels({input, previous.hidden}));
  const Tensor u = sigmoid(slice_channels(z, 0, c));
  const Tensor r = sigmoid(slice_channels(z, c, c));
  const Tensor o = elu(layer_norm_spatial(
      candidate_(concat_channels({input, mul(previous.hidden, r)}))));
  RecurrentState next;
  next.hidden = layer_norm_spatial(add(mul(u, previous.hidden), mul(one_minus(u), o)));
  next.poses = previous.poses;
  next.intrinsics = previous.intrinsics;
  return next;
}

void FusionCell::collect(ParameterList& out) {
  gates_.collect("cell.gates", out);
  if (config_.kind == CellKind::kConvGru) candidate_.collect("cell.candidate", out);
  if (alpha_.defined()) out.push_back({"cell.alpha", &alpha_});
}

}  // namespace dvmvs
