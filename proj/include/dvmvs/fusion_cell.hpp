#pragma once

#include <random>
#include <vector>

#include "dvmvs/geometry.hpp"
#include "dvmvs/layers.hpp"

namespace dvmvs {

enum class CellKind { kConvLstm, kConvGru };

/// Activation/normalization layout of the ConvLSTM cell:
///   1  ELU, no normalization
///   2  tanh, no normalization
///   3  alpha * tanh with a learnable alpha (initialized to 1)
///   4  layer norm before every activation, including the gate sigmoids,
///      and on the cell state
///   5  layer norm inside the candidate and on the cell state only
struct CellConfig {
  CellKind kind = CellKind::kConvLstm;
  int configuration = 5;
  bool gate_bias = false;
  int channels = 128;
};

/// Recurrent memory at the bottleneck. cell is undefined for ConvGRU.
struct RecurrentState {
  Tensor hidden;
  Tensor cell;
  std::vector<Pose> poses;        // camera of each batch entry when written
  CameraIntrinsics intrinsics;    // full-resolution camera

  bool empty() const { return !hidden.defined(); }
};

/// Zero hidden (and cell, for ConvLSTM) state of the given bottleneck shape.
RecurrentState zero_state(const CellConfig& config, int batch, int height, int width);

class FusionCell {
 public:
  FusionCell() = default;
  FusionCell(const CellConfig& config, std::mt19937_64& rng);

  const CellConfig& config() const { return config_; }

  /// One recurrent step. Returns the new hidden/cell tensors; poses are
  /// left to the caller.
  RecurrentState step(const Tensor& input, const RecurrentState& previous) const;

  RecurrentState convlstm_step(const Tensor& input, const RecurrentState& previous) const;
  RecurrentState convgru_step(const Tensor& input, const RecurrentState& previous) const;

  void collect(ParameterList& out);
  Conv2d& gates() { return gates_; }
  Conv2d& candidate() { return candidate_; }
  Tensor& alpha() { return alpha_; }

 private:
  CellConfig config_;
  // ConvLSTM: stacked [i, f, o, g] kernels over concat(X, H).
  // ConvGRU: stacked [u, r] kernels over concat(X, H); candidate_ holds the
  // output kernel over concat(X, H * r).
  Conv2d gates_;
  Conv2d candidate_;
  Tensor alpha_;
};

}  // namespace dvmvs
