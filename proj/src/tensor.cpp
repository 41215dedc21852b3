#include "dvmvs/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace dvmvs {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Macro so that messages are only built on failure.
#define REQUIRE(condition, message)                          \
  do {                                                       \
    if (!(condition)) throw ContractViolation(message);      \
  } while (false)

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  REQUIRE(a.defined() && b.defined(), std::string(op) + ": undefined tensor");
  REQUIRE(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
}

void require_4d(const Tensor& t, const char* op) {
  REQUIRE(t.defined() && t.rank() == 4,
          std::string(op) + ": expected a 4-D tensor, got " +
              (t.defined() ? shape_string(t.shape()) : "undefined"));
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ')';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    REQUIRE(d >= 0, "negative dimension in " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// ---------------------------------------------------------------------------
// Tensor handle

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  REQUIRE(values.size() == shape_numel(shape),
          "value count " + std::to_string(values.size()) +
              " does not match shape " + shape_string(shape));
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::dim(int axis) const {
  return node_->shape.at(static_cast<std::size_t>(axis));
}
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }
std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::mutable_values() { return node_->value; }

double Tensor::item() const {
  REQUIRE(numel() == 1, "item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool value) {
  REQUIRE(node_ && node_->inputs.empty(), "set_requires_grad on a non-leaf tensor");
  node_->requires_grad = value;
}
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }
void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  return from(shape(), node_->value, false);
}

Tensor Tensor::clone_leaf(bool requires_grad) const {
  return from(shape(), node_->value, requires_grad);
}

namespace {
thread_local bool g_recording = true;
}

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }
bool grad_recording() { return g_recording; }

Tensor Tensor::make_result(Shape shape, std::vector<double> values,
                           std::vector<Tensor> inputs, BackwardFn backward) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  REQUIRE(node->value.size() == shape_numel(node->shape),
          "internal: result size mismatch");
  const bool any = g_recording && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                     return t.requires_grad();
                   });
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void Tensor::backward() const {
  REQUIRE(defined() && numel() == 1,
          "backward() requires a scalar loss, got " +
              (defined() ? shape_string(shape()) : std::string("undefined")));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename Forward, typename Derivative>
Tensor unary_op(const Tensor& x, Forward forward, Derivative derivative) {
  const auto in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  return Tensor::make_result(
      x.shape(), std::move(out), {x}, [derivative](TensorNode& self) {
        double* gx = self.input_grad(0);
        if (!gx) return;
        const auto& xv = self.input_value(0);
        for (std::size_t i = 0; i < xv.size(); ++i) {
          gx[i] += self.grad[i] * derivative(xv[i], self.value[i]);
        }
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [](TensorNode& self) {
                               for (std::size_t k = 0; k < 2; ++k) {
                                 if (double* g = self.input_grad(k)) {
                                   for (std::size_t i = 0; i < self.grad.size();
                                        ++i)
                                     g[i] += self.grad[i];
                                 }
                               }
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [](TensorNode& self) {
                               if (double* g = self.input_grad(0)) {
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   g[i] += self.grad[i];
                               }
                               if (double* g = self.input_grad(1)) {
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   g[i] -= self.grad[i];
                               }
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor::make_result(
      a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        const auto& av = self.input_value(0);
        const auto& bv = self.input_value(1);
        if (double* g = self.input_grad(0)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i] += self.grad[i] * bv[i];
        }
        if (double* g = self.input_grad(1)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i] += self.grad[i] * av[i];
        }
      });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x + s; },
      [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor mul_by_scalar_tensor(const Tensor& a, const Tensor& s) {
  REQUIRE(s.defined() && s.numel() == 1,
          "mul_by_scalar_tensor: gain must hold one value");
  const double gain = s.item();
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * gain;
  return Tensor::make_result(
      a.shape(), std::move(out), {a, s}, [](TensorNode& self) {
        const auto& av = self.input_value(0);
        const double gain = self.input_value(1)[0];
        if (double* g = self.input_grad(0)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i] += self.grad[i] * gain;
        }
        if (double* g = self.input_grad(1)) {
          double acc = 0.0;
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            acc += self.grad[i] * av[i];
          g[0] += acc;
        }
      });
}

Tensor one_minus(const Tensor& a) {
  return unary_op(
      a, [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor reciprocal(const Tensor& a) {
  return unary_op(
      a, [](double x) { return 1.0 / x; },
      [](double, double y) { return -y * y; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor elu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v >= 0.0 ? v : std::expm1(v); },
      [](double v, double y) { return v >= 0.0 ? 1.0 : y + 1.0; });
}

Tensor tanh(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor pointwise(const Tensor& x, Activation kind) {
  switch (kind) {
    case Activation::kSigmoid:
      return sigmoid(x);
    case Activation::kElu:
      return elu(x);
    case Activation::kTanh:
      return tanh(x);
  }
  throw ContractViolation("pointwise: unknown activation");
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  const auto v = x.values();
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  return Tensor::make_result({1}, {total}, {x}, [](TensorNode& self) {
    if (double* g = self.input_grad(0)) {
      const std::size_t n = self.input_value(0).size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  REQUIRE(x.numel() > 0, "mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor masked_mean_abs_diff(const Tensor& a, std::span<const double> target,
                            std::span<const double> mask) {
  REQUIRE(target.size() == a.numel() && mask.size() == a.numel(),
          "masked_mean_abs_diff: size mismatch");
  const auto av = a.values();
  double count = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (mask[i] != 0.0) {
      count += 1.0;
      total += std::abs(av[i] - target[i]);
    }
  }
  const double denom = std::max(1.0, count);
  std::vector<double> diff_sign(av.size(), 0.0);
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (mask[i] == 0.0) continue;
    const double d = av[i] - target[i];
    diff_sign[i] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / denom;
  }
  return Tensor::make_result(
      {1}, {total / denom}, {a},
      [signs = std::move(diff_sign)](TensorNode& self) {
        if (double* g = self.input_grad(0)) {
          for (std::size_t i = 0; i < signs.size(); ++i)
            g[i] += self.grad[0] * signs[i];
        }
      });
}

// ---------------------------------------------------------------------------
// Layout

Tensor concat_channels(const std::vector<Tensor>& parts) {
  REQUIRE(!parts.empty(), "concat_channels: no inputs");
  for (const auto& p : parts) require_4d(p, "concat_channels");
  const int batch = parts[0].dim(0);
  const int height = parts[0].dim(2);
  const int width = parts[0].dim(3);
  int channels = 0;
  for (const auto& p : parts) {
    REQUIRE(p.dim(0) == batch && p.dim(2) == height && p.dim(3) == width,
            "concat_channels: incompatible " + shape_string(p.shape()) +
                " vs " + shape_string(parts[0].shape()));
    channels += p.dim(1);
  }
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::vector<double> out(static_cast<std::size_t>(batch) * channels * plane);
  std::vector<int> offsets;
  int offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const auto v = p.values();
    const std::size_t block = static_cast<std::size_t>(p.dim(1)) * plane;
    for (int b = 0; b < batch; ++b) {
      std::copy_n(v.begin() + b * block, block,
                  out.begin() + (static_cast<std::size_t>(b) * channels + offset) *
                                    plane);
    }
    offset += p.dim(1);
  }
  return Tensor::make_result(
      {batch, channels, height, width}, std::move(out), parts,
      [offsets, batch, channels, plane](TensorNode& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
          double* g = self.input_grad(k);
          if (!g) continue;
          const std::size_t block =
              static_cast<std::size_t>(self.inputs[k]->shape[1]) * plane;
          for (int b = 0; b < batch; ++b) {
            const double* src =
                self.grad.data() +
                (static_cast<std::size_t>(b) * channels + offsets[k]) * plane;
            double* dst = g + b * block;
            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
      });
}

Tensor slice_channels(const Tensor& x, int begin, int count) {
  require_4d(x, "slice_channels");
  REQUIRE(begin >= 0 && count > 0 && begin + count <= x.dim(1),
          "slice_channels: range out of bounds");
  const int batch = x.dim(0);
  const int channels = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t block = static_cast<std::size_t>(count) * plane;
  std::vector<double> out(batch * block);
  const auto v = x.values();
  for (int b = 0; b < batch; ++b) {
    std::copy_n(v.begin() + (static_cast<std::size_t>(b) * channels + begin) * plane,
                block, out.begin() + b * block);
  }
  return Tensor::make_result(
      {batch, count, x.dim(2), x.dim(3)}, std::move(out), {x},
      [=](TensorNode& self) {
        double* g = self.input_grad(0);
        if (!g) return;
        for (int b = 0; b < batch; ++b) {
          double* dst = g + (static_cast<std::size_t>(b) * channels + begin) * plane;
          const double* src = self.grad.data() + b * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      });
}

Tensor concat_batch(const std::vector<Tensor>& parts) {
  REQUIRE(!parts.empty(), "concat_batch: no inputs");
  Shape shape = parts[0].shape();
  REQUIRE(!shape.empty(), "concat_batch: rank-0 input");
  int batch = 0;
  for (const auto& p : parts) {
    REQUIRE(p.rank() == static_cast<int>(shape.size()),
            "concat_batch: rank mismatch");
    for (std::size_t d = 1; d < shape.size(); ++d)
      REQUIRE(p.shape()[d] == shape[d], "concat_batch: shape mismatch");
    batch += p.dim(0);
  }
  shape[0] = batch;
  std::vector<double> out;
  out.reserve(shape_numel(shape));
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return Tensor::make_result(shape, std::move(out), parts,
                             [offsets](TensorNode& self) {
                               for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                 double* g = self.input_grad(k);
                                 if (!g) continue;
                                 const std::size_t n = self.inputs[k]->value.size();
                                 for (std::size_t i = 0; i < n; ++i)
                                   g[i] += self.grad[offsets[k] + i];
                               }
                             });
}

Tensor slice_batch(const Tensor& x, int index) {
  REQUIRE(x.rank() >= 1 && index >= 0 && index < x.dim(0),
          "slice_batch: index out of range");
  Shape shape = x.shape();
  const std::size_t block = x.numel() / static_cast<std::size_t>(shape[0]);
  shape[0] = 1;
  std::vector<double> out(x.values().begin() + index * block,
                          x.values().begin() + (index + 1) * block);
  return Tensor::make_result(shape, std::move(out), {x},
                             [index, block](TensorNode& self) {
                               double* g = self.input_grad(0);
                               if (!g) return;
                               for (std::size_t i = 0; i < block; ++i)
                                 g[index * block + i] += self.grad[i];
                             });
}

Tensor reshape(const Tensor& x, Shape shape) {
  REQUIRE(shape_numel(shape) == x.numel(), "reshape: element count mismatch");
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x},
                             [](TensorNode& self) {
                               double* g = self.input_grad(0);
                               if (!g) return;
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 g[i] += self.grad[i];
                             });
}

Tensor stop_gradient(const Tensor& x) { return x.detach(); }

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  int batch, in_ch, height, width;
  int out_ch, kh, kw, stride, pad;
  int out_h, out_w;
  std::size_t patch() const { return static_cast<std::size_t>(in_ch) * kh * kw; }
  std::size_t pixels() const { return static_cast<std::size_t>(out_h) * out_w; }
};

void im2col(const double* image, const ConvGeometry& g, double* col) {
  const std::size_t pixels = g.pixels();
  for (int c = 0; c < g.in_ch; ++c) {
    const double* channel = image + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * pixels;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          double* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill_n(dst, g.out_w, 0.0);
            continue;
          }
          const double* src = channel + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* image) {
  const std::size_t pixels = g.pixels();
  for (int c = 0; c < g.in_ch; ++c) {
    double* channel = image + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const double* row =
            col + ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * pixels;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          const double* src = row + static_cast<std::size_t>(oy) * g.out_w;
          double* dst = channel + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const ConvParams& params) {
  require_4d(input, "conv2d");
  require_4d(params.weight, "conv2d weight");
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.in_ch = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_ch = params.weight.dim(0);
  g.kh = params.weight.dim(2);
  g.kw = params.weight.dim(3);
  g.stride = params.stride;
  g.pad = params.padding;
  REQUIRE(params.weight.dim(1) == g.in_ch,
          "conv2d: input has " + std::to_string(g.in_ch) +
              " channels, weights expect " + std::to_string(params.weight.dim(1)));
  REQUIRE(g.kh % 2 == 1 && g.kw % 2 == 1, "conv2d: kernel extent must be odd");
  REQUIRE(g.stride >= 1 && g.pad >= 0, "conv2d: invalid stride/padding");
  REQUIRE(g.height + 2 * g.pad >= g.kh && g.width + 2 * g.pad >= g.kw,
          "conv2d: input smaller than kernel");
  const bool has_bias = params.bias.defined();
  if (has_bias) {
    REQUIRE(params.bias.numel() == static_cast<std::size_t>(g.out_ch),
            "conv2d: bias size mismatch");
  }
  g.out_h = (g.height + 2 * g.pad - g.kh) / g.stride + 1;
  g.out_w = (g.width + 2 * g.pad - g.kw) / g.stride + 1;

  const std::size_t in_block = static_cast<std::size_t>(g.in_ch) * g.height * g.width;
  const std::size_t out_block = static_cast<std::size_t>(g.out_ch) * g.pixels();
  std::vector<double> out(static_cast<std::size_t>(g.batch) * out_block);
  std::vector<double> col(g.patch() * g.pixels());
  ConstMatrixMap weight(params.weight.values().data(), g.out_ch,
                        static_cast<Eigen::Index>(g.patch()));
  const auto in = input.values();
  for (int b = 0; b < g.batch; ++b) {
    im2col(in.data() + b * in_block, g, col.data());
    ConstMatrixMap col_m(col.data(), static_cast<Eigen::Index>(g.patch()),
                         static_cast<Eigen::Index>(g.pixels()));
    MatrixMap out_m(out.data() + b * out_block, g.out_ch,
                    static_cast<Eigen::Index>(g.pixels()));
    out_m.noalias() = weight * col_m;
    if (has_bias) {
      const auto bias = params.bias.values();
      for (int o = 0; o < g.out_ch; ++o) out_m.row(o).array() += bias[o];
    }
  }

  std::vector<Tensor> inputs{input, params.weight};
  if (has_bias) inputs.push_back(params.bias);
  return Tensor::make_result(
      {g.batch, g.out_ch, g.out_h, g.out_w}, std::move(out), std::move(inputs),
      [g, in_block, out_block, has_bias](TensorNode& self) {
        double* gx = self.input_grad(0);
        double* gw = self.input_grad(1);
        double* gb = has_bias ? self.input_grad(2) : nullptr;
        const auto& x = self.input_value(0);
        ConstMatrixMap weight(self.input_value(1).data(), g.out_ch,
                              static_cast<Eigen::Index>(g.patch()));
        std::vector<double> col(g.patch() * g.pixels());
        for (int b = 0; b < g.batch; ++b) {
          ConstMatrixMap dout(self.grad.data() + b * out_block, g.out_ch,
                              static_cast<Eigen::Index>(g.pixels()));
          if (gw) {
            im2col(x.data() + b * in_block, g, col.data());
            ConstMatrixMap col_m(col.data(), static_cast<Eigen::Index>(g.patch()),
                                 static_cast<Eigen::Index>(g.pixels()));
            MatrixMap dw(gw, g.out_ch, static_cast<Eigen::Index>(g.patch()));
            dw.noalias() += dout * col_m.transpose();
          }
          if (gb) {
            for (int o = 0; o < g.out_ch; ++o) gb[o] += dout.row(o).sum();
          }
          if (gx) {
            MatrixMap dcol(col.data(), static_cast<Eigen::Index>(g.patch()),
                           static_cast<Eigen::Index>(g.pixels()));
            dcol.noalias() = weight.transpose() * dout;
            col2im_add(col.data(), g, gx + b * in_block);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Layer normalization

Tensor layer_norm_spatial(const Tensor& input, double epsilon) {
  require_4d(input, "layer_norm_spatial");
  const std::size_t slices = static_cast<std::size_t>(input.dim(0)) * input.dim(1);
  const std::size_t plane = static_cast<std::size_t>(input.dim(2)) * input.dim(3);
  REQUIRE(plane >= 1, "layer_norm_spatial: empty spatial extent");
  const auto x = input.values();
  std::vector<double> out(x.size());
  std::vector<double> inv_std(slices);
  for (std::size_t s = 0; s < slices; ++s) {
    const double* xs = x.data() + s * plane;
    double mu = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mu += xs[i];
    mu /= static_cast<double>(plane);
    double var = 0.0;
    for (std::size_t i = 0; i < plane; ++i) var += (xs[i] - mu) * (xs[i] - mu);
    var /= static_cast<double>(plane);
    inv_std[s] = 1.0 / std::sqrt(var + epsilon);
    for (std::size_t i = 0; i < plane; ++i)
      out[s * plane + i] = (xs[i] - mu) * inv_std[s];
  }
  return Tensor::make_result(
      input.shape(), std::move(out), {input},
      [inv_std = std::move(inv_std), plane](TensorNode& self) {
        double* gx = self.input_grad(0);
        if (!gx) return;
        const double n = static_cast<double>(plane);
        for (std::size_t s = 0; s < inv_std.size(); ++s) {
          const double* dy = self.grad.data() + s * plane;
          const double* y = self.value.data() + s * plane;
          double mean_dy = 0.0;
          double mean_dy_y = 0.0;
          for (std::size_t i = 0; i < plane; ++i) {
            mean_dy += dy[i];
            mean_dy_y += dy[i] * y[i];
          }
          mean_dy /= n;
          mean_dy_y /= n;
          for (std::size_t i = 0; i < plane; ++i) {
            gx[s * plane + i] += inv_std[s] * (dy[i] - mean_dy - y[i] * mean_dy_y);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Bilinear grid sampling

Tensor grid_sample_bilinear(const Tensor& input, const Tensor& grid) {
  require_4d(input, "grid_sample_bilinear");
  REQUIRE(grid.defined() && grid.rank() == 4 && grid.dim(3) == 2 &&
              grid.dim(0) == input.dim(0),
          "grid_sample_bilinear: grid must be [B,H',W',2]");
  const int batch = input.dim(0);
  const int channels = input.dim(1);
  const int height = input.dim(2);
  const int width = input.dim(3);
  const int out_h = grid.dim(1);
  const int out_w = grid.dim(2);
  const std::size_t in_plane = static_cast<std::size_t>(height) * width;
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  const auto x = input.values();
  const auto gv = grid.values();
  std::vector<double> out(static_cast<std::size_t>(batch) * channels * out_plane, 0.0);

  for (int b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < out_plane; ++p) {
      const double gx = gv[(b * out_plane + p) * 2];
      const double gy = gv[(b * out_plane + p) * 2 + 1];
      if (!std::isfinite(gx) || !std::isfinite(gy)) continue;
      const double fx = std::floor(gx);
      const double fy = std::floor(gy);
      if (fx < -1.0 || fy < -1.0 || fx > width || fy > height) continue;
      const int x0 = static_cast<int>(fx);
      const int y0 = static_cast<int>(fy);
      const double ax = gx - fx;
      const double ay = gy - fy;
      const int xs[2] = {x0, x0 + 1};
      const int ys[2] = {y0, y0 + 1};
      const double wx[2] = {1.0 - ax, ax};
      const double wy[2] = {1.0 - ay, ay};
      for (int j = 0; j < 2; ++j) {
        if (ys[j] < 0 || ys[j] >= height) continue;
        for (int i = 0; i < 2; ++i) {
          if (xs[i] < 0 || xs[i] >= width) continue;
          const double w = wx[i] * wy[j];
          if (w == 0.0) continue;
          const std::size_t src = static_cast<std::size_t>(ys[j]) * width + xs[i];
          for (int c = 0; c < channels; ++c) {
            out[(static_cast<std::size_t>(b) * channels + c) * out_plane + p] +=
                w * x[(static_cast<std::size_t>(b) * channels + c) * in_plane + src];
          }
        }
      }
    }
  }

  return Tensor::make_result(
      {batch, channels, out_h, out_w}, std::move(out), {input, grid},
      [=](TensorNode& self) {
        double* gin = self.input_grad(0);
        double* ggrid = self.input_grad(1);
        const auto& x = self.input_value(0);
        const auto& gv = self.input_value(1);
        for (int b = 0; b < batch; ++b) {
          for (std::size_t p = 0; p < out_plane; ++p) {
            const double gx = gv[(b * out_plane + p) * 2];
            const double gy = gv[(b * out_plane + p) * 2 + 1];
            if (!std::isfinite(gx) || !std::isfinite(gy)) continue;
            const double fx = std::floor(gx);
            const double fy = std::floor(gy);
            if (fx < -1.0 || fy < -1.0 || fx > width || fy > height) continue;
            const int x0 = static_cast<int>(fx);
            const int y0 = static_cast<int>(fy);
            const double ax = gx - fx;
            const double ay = gy - fy;
            const int xs[2] = {x0, x0 + 1};
            const int ys[2] = {y0, y0 + 1};
            const double wx[2] = {1.0 - ax, ax};
            const double wy[2] = {1.0 - ay, ay};
            const double dwx[2] = {-1.0, 1.0};
            const double dwy[2] = {-1.0, 1.0};
            double d_gx = 0.0;
            double d_gy = 0.0;
            for (int j = 0; j < 2; ++j) {
              if (ys[j] < 0 || ys[j] >= height) continue;
              for (int i = 0; i < 2; ++i) {
                if (xs[i] < 0 || xs[i] >= width) continue;
                const std::size_t src = static_cast<std::size_t>(ys[j]) * width + xs[i];
                const double w = wx[i] * wy[j];
                for (int c = 0; c < channels; ++c) {
                  const std::size_t base = static_cast<std::size_t>(b) * channels + c;
                  const double dy = self.grad[base * out_plane + p];
                  if (gin) gin[base * in_plane + src] += w * dy;
                  if (ggrid) {
                    const double v = x[base * in_plane + src];
                    d_gx += dy * v * dwx[i] * wy[j];
                    d_gy += dy * v * wx[i] * dwy[j];
                  }
                }
              }
            }
            if (ggrid) {
              ggrid[(b * out_plane + p) * 2] += d_gx;
              ggrid[(b * out_plane + p) * 2 + 1] += d_gy;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Resampling

Tensor upsample_nearest2x(const Tensor& input) {
  require_4d(input, "upsample_nearest2x");
  const int h = input.dim(2);
  const int w = input.dim(3);
  const std::size_t slices = static_cast<std::size_t>(input.dim(0)) * input.dim(1);
  const auto x = input.values();
  std::vector<double> out(slices * 4 * h * w);
  for (std::size_t s = 0; s < slices; ++s) {
    for (int y = 0; y < 2 * h; ++y) {
      for (int xx = 0; xx < 2 * w; ++xx) {
        out[(s * 2 * h + y) * 2 * w + xx] = x[(s * h + y / 2) * w + xx / 2];
      }
    }
  }
  return Tensor::make_result(
      {input.dim(0), input.dim(1), 2 * h, 2 * w}, std::move(out), {input},
      [=](TensorNode& self) {
        double* g = self.input_grad(0);
        if (!g) return;
        for (std::size_t s = 0; s < slices; ++s)
          for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
              g[(s * h + y / 2) * w + xx / 2] += self.grad[(s * 2 * h + y) * 2 * w + xx];
      });
}

namespace {

// Source taps for half-pixel-centred 2x bilinear upsampling along one axis.
struct UpTap {
  int lo, hi;
  double w_lo, w_hi;
};

std::vector<UpTap> upsample_taps(int n) {
  std::vector<UpTap> taps(static_cast<std::size_t>(2 * n));
  for (int o = 0; o < 2 * n; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, n - 1);
    const double a = src - lo;
    taps[static_cast<std::size_t>(o)] = {lo, hi, 1.0 - a, a};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear2x(const Tensor& input) {
  require_4d(input, "upsample_bilinear2x");
  const int h = input.dim(2);
  const int w = input.dim(3);
  const std::size_t slices = static_cast<std::size_t>(input.dim(0)) * input.dim(1);
  const auto ty = upsample_taps(h);
  const auto tx = upsample_taps(w);
  const auto x = input.values();
  std::vector<double> out(slices * 4 * h * w);
  for (std::size_t s = 0; s < slices; ++s) {
    const double* src = x.data() + s * h * w;
    for (int oy = 0; oy < 2 * h; ++oy) {
      const auto& a = ty[oy];
      for (int ox = 0; ox < 2 * w; ++ox) {
        const auto& b = tx[ox];
        out[(s * 2 * h + oy) * 2 * w + ox] =
            a.w_lo * (b.w_lo * src[a.lo * w + b.lo] + b.w_hi * src[a.lo * w + b.hi]) +
            a.w_hi * (b.w_lo * src[a.hi * w + b.lo] + b.w_hi * src[a.hi * w + b.hi]);
      }
    }
  }
  return Tensor::make_result(
      {input.dim(0), input.dim(1), 2 * h, 2 * w}, std::move(out), {input},
      [=](TensorNode& self) {
        double* g = self.input_grad(0);
        if (!g) return;
        for (std::size_t s = 0; s < slices; ++s) {
          double* dst = g + s * h * w;
          for (int oy = 0; oy < 2 * h; ++oy) {
            const auto& a = ty[oy];
            for (int ox = 0; ox < 2 * w; ++ox) {
              const auto& b = tx[ox];
              const double d = self.grad[(s * 2 * h + oy) * 2 * w + ox];
              dst[a.lo * w + b.lo] += d * a.w_lo * b.w_lo;
              dst[a.lo * w + b.hi] += d * a.w_lo * b.w_hi;
              dst[a.hi * w + b.lo] += d * a.w_hi * b.w_lo;
              dst[a.hi * w + b.hi] += d * a.w_hi * b.w_hi;
            }
          }
        }
      });
}

Tensor downsample2x(const Tensor& input) {
  require_4d(input, "downsample2x");
  const int h = input.dim(2);
  const int w = input.dim(3);
  REQUIRE(h % 2 == 0 && w % 2 == 0,
          "downsample2x: spatial size " + shape_string(input.shape()) +
              " not divisible by 2");
  const int oh = h / 2;
  const int ow = w / 2;
  const std::size_t slices = static_cast<std::size_t>(input.dim(0)) * input.dim(1);
  const auto x = input.values();
  std::vector<double> out(slices * oh * ow);
  for (std::size_t s = 0; s < slices; ++s) {
    const double* src = x.data() + s * h * w;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx)
        out[(s * oh + y) * ow + xx] =
            0.25 * (src[(2 * y) * w + 2 * xx] + src[(2 * y) * w + 2 * xx + 1] +
                    src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1]);
  }
  return Tensor::make_result(
      {input.dim(0), input.dim(1), oh, ow}, std::move(out), {input},
      [=](TensorNode& self) {
        double* g = self.input_grad(0);
        if (!g) return;
        for (std::size_t s = 0; s < slices; ++s) {
          double* dst = g + s * h * w;
          for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx) {
              const double d = 0.25 * self.grad[(s * oh + y) * ow + xx];
              dst[(2 * y) * w + 2 * xx] += d;
              dst[(2 * y) * w + 2 * xx + 1] += d;
              dst[(2 * y + 1) * w + 2 * xx] += d;
              dst[(2 * y + 1) * w + 2 * xx + 1] += d;
            }
        }
      });
}

}  // namespace dvmvs
