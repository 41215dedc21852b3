#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dvmvs {

using Shape = std::vector<int>;

/// Raised when an operation receives arguments that break its shape or
/// domain contract.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorNode;

/// Dense double-precision array with reverse-mode differentiation.
///
/// A Tensor is a shared handle to a graph node. Copying the handle aliases
/// the node; results of operations are new nodes that remember their inputs
/// (only when at least one input requires a gradient) so that backward()
/// can push gradients to every reachable leaf.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(int axis) const;
  int rank() const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Mutable access for leaves (parameters, inputs). Mutating a tensor that
  /// already feeds a recorded graph invalidates that graph.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  /// Only meaningful on leaves.
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse pass from a scalar. Gradients accumulate into every reachable
  /// tensor that requires them.
  void backward() const;

  /// Same values, no recorded inputs: gradients do not flow through it.
  Tensor detach() const;
  /// Fresh leaf holding a copy of the values.
  Tensor clone_leaf(bool requires_grad) const;

  const TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

  // Internal: builds the result node of an operation.
  using BackwardFn = std::function<void(TensorNode& self)>;
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::vector<Tensor> inputs, BackwardFn backward);

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;
};

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  Tensor::BackwardFn backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
  // Gradient accumulator of input i, or nullptr when it does not need one.
  double* input_grad(std::size_t i) {
    auto& in = *inputs[i];
    if (!in.requires_grad) return nullptr;
    return in.ensure_grad().data();
  }
  const std::vector<double>& input_value(std::size_t i) const {
    return inputs[i]->value;
  }
};

/// While alive, operations on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording();

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Binary ops require identical shapes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
/// a * s where s is a one-element tensor (e.g. a learnable gain).
Tensor mul_by_scalar_tensor(const Tensor& a, const Tensor& s);
/// 1 - a
Tensor one_minus(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor reciprocal(const Tensor& a);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);

enum class Activation { kSigmoid, kElu, kTanh };

Tensor pointwise(const Tensor& x, Activation kind);
Tensor sigmoid(const Tensor& x);
Tensor elu(const Tensor& x);
Tensor tanh(const Tensor& x);

// ---------------------------------------------------------------------------
// Reductions.

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// sum(|a - b| * mask) / max(1, sum(mask)); mask is a constant 0/1 array.
Tensor masked_mean_abs_diff(const Tensor& a, std::span<const double> target,
                            std::span<const double> mask);

// ---------------------------------------------------------------------------
// Layout.

Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& x, int begin, int count);
/// Stacks equally shaped [1,C,H,W] tensors along the batch axis.
Tensor concat_batch(const std::vector<Tensor>& parts);
Tensor slice_batch(const Tensor& x, int index);
Tensor reshape(const Tensor& x, Shape shape);

/// Gradient barrier as an explicit graph node.
Tensor stop_gradient(const Tensor& x);

// ---------------------------------------------------------------------------
// Neural primitives (NCHW).

struct ConvParams {
  Tensor weight;  // [out, in, kh, kw]
  Tensor bias;    // [out] or undefined
  int stride = 1;
  int padding = 0;
};

Tensor conv2d(const Tensor& input, const ConvParams& params);

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Per (batch, channel) standardization over the spatial extent.
Tensor layer_norm_spatial(const Tensor& input,
                          double epsilon = kLayerNormEpsilon);

/// Bilinear sampling at continuous pixel coordinates, grid [B,H',W',2]
/// holding (x, y). Taps outside the input contribute zero.
Tensor grid_sample_bilinear(const Tensor& input, const Tensor& grid);

Tensor upsample_nearest2x(const Tensor& input);
/// Half-pixel-centred bilinear 2x upsampling with edge clamping.
Tensor upsample_bilinear2x(const Tensor& input);
/// 2x2 average pooling.
Tensor downsample2x(const Tensor& input);

}  // namespace dvmvs
