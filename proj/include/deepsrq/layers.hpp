#ifndef DEEPSRQ_LAYERS_HPP
#define DEEPSRQ_LAYERS_HPP

// Layer set of the quality network: same-padded convolution, ELU, 2x2 max
// pooling, flatten, dense and inverted dropout. Each layer caches what its
// backward pass needs from the most recent forward call (one sample).

#include "deepsrq/rng.hpp"
#include "deepsrq/tensor.hpp"

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace deepsrq {

// ---------------------------------------------------------------------------
// Stateless kernels.

/// Cross-correlation with zero padding (k-1)/2. input HxWxC, weights kxkxCxK.
template <typename T>
Tensor<T> conv2d_same_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (input.rank() != 3 || weights.rank() != 4 || bias.rank() != 1)
    throw NnError(NnErrc::ShapeMismatch, "conv2d expects HxWxC input, kxkxCxK weights, K bias");
  const int H = input.extent(0), W = input.extent(1), C = input.extent(2);
  const int k = weights.extent(0), K = weights.extent(3);
  if (weights.extent(1) != k || weights.extent(2) != C || bias.extent(0) != K)
    throw NnError(NnErrc::ShapeMismatch, "conv2d weight/bias shape does not match input");
  if (k % 2 == 0) throw NnError(NnErrc::ShapeMismatch, "same padding requires an odd kernel size");
  const int pad = (k - 1) / 2;

  Tensor<T> out({H, W, K});
  const T* in = input.data();
  const T* w = weights.data();
  T* o = out.data();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      T* orow = o + (static_cast<std::size_t>(y) * W + x) * K;
      for (int j = 0; j < K; ++j) orow[j] = bias[j];
      for (int ky = 0; ky < k; ++ky) {
        const int iy = y + ky - pad;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = x + kx - pad;
          if (ix < 0 || ix >= W) continue;
          const T* irow = in + (static_cast<std::size_t>(iy) * W + ix) * C;
          const T* wbase = w + static_cast<std::size_t>(ky * k + kx) * C * K;
          for (int c = 0; c < C; ++c) {
            const T v = irow[c];
            const T* wrow = wbase + static_cast<std::size_t>(c) * K;
            for (int j = 0; j < K; ++j) orow[j] += v * wrow[j];
          }
        }
      }
    }
  return out;
}

/// Accumulates weight/bias gradients and returns the input gradient.
template <typename T>
Tensor<T> conv2d_same_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& grad_out,
                               Tensor<T>& grad_weights, Tensor<T>& grad_bias) {
  const int H = input.extent(0), W = input.extent(1), C = input.extent(2);
  const int k = weights.extent(0), K = weights.extent(3);
  const int pad = (k - 1) / 2;
  require_shape(grad_out, {H, W, K}, "conv2d backward");

  Tensor<T> grad_in(input.shape());
  const T* in = input.data();
  const T* w = weights.data();
  const T* g = grad_out.data();
  T* gi = grad_in.data();
  T* gw = grad_weights.data();
  T* gb = grad_bias.data();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const T* grow = g + (static_cast<std::size_t>(y) * W + x) * K;
      for (int j = 0; j < K; ++j) gb[j] += grow[j];
      for (int ky = 0; ky < k; ++ky) {
        const int iy = y + ky - pad;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = x + kx - pad;
          if (ix < 0 || ix >= W) continue;
          const std::size_t ioff = (static_cast<std::size_t>(iy) * W + ix) * C;
          const std::size_t woff = static_cast<std::size_t>(ky * k + kx) * C * K;
          for (int c = 0; c < C; ++c) {
            const T v = in[ioff + c];
            const T* wrow = w + woff + static_cast<std::size_t>(c) * K;
            T* gwrow = gw + woff + static_cast<std::size_t>(c) * K;
            T acc{};
            for (int j = 0; j < K; ++j) {
              gwrow[j] += v * grow[j];
              acc += wrow[j] * grow[j];
            }
            gi[ioff + c] += acc;
          }
        }
      }
    }
  return grad_in;
}

/// x for x >= 0, alpha (e^x - 1) otherwise.
template <typename T>
Tensor<T> elu(const Tensor<T>& x, T alpha) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = x[i] >= T{0} ? x[i] : alpha * std::expm1(x[i]);
  return out;
}

template <typename T>
T elu_derivative(T x, T alpha) {
  return x >= T{0} ? T{1} : alpha * std::exp(x);
}

template <typename T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::uint32_t> argmax;  // flat input index for each output element
};

/// 2x2 window, stride 2. Ties go to the first element in row-major window order.
template <typename T>
PoolResult<T> maxpool2x2_forward(const Tensor<T>& input) {
  if (input.rank() != 3) throw NnError(NnErrc::ShapeMismatch, "maxpool expects HxWxC");
  const int H = input.extent(0), W = input.extent(1), C = input.extent(2);
  if (H % 2 != 0 || W % 2 != 0) throw NnError(NnErrc::OddExtent, "maxpool2x2 needs even extents");
  PoolResult<T> r{Tensor<T>({H / 2, W / 2, C}), std::vector<std::uint32_t>(shape_size({H / 2, W / 2, C}))};
  for (int y = 0; y < H / 2; ++y)
    for (int x = 0; x < W / 2; ++x)
      for (int c = 0; c < C; ++c) {
        std::size_t best = (static_cast<std::size_t>(2 * y) * W + 2 * x) * C + c;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t i = (static_cast<std::size_t>(2 * y + dy) * W + 2 * x + dx) * C + c;
            if (input[i] > input[best]) best = i;
          }
        const std::size_t o = (static_cast<std::size_t>(y) * (W / 2) + x) * C + c;
        r.output[o] = input[best];
        r.argmax[o] = static_cast<std::uint32_t>(best);
      }
  return r;
}

/// input D (any shape, flattened), weights DxU, bias U.
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (weights.rank() != 2 || bias.rank() != 1)
    throw NnError(NnErrc::ShapeMismatch, "dense expects DxU weights and U bias");
  const int D = weights.extent(0), U = weights.extent(1);
  if (input.size() != static_cast<std::size_t>(D) || bias.extent(0) != U)
    throw NnError(NnErrc::ShapeMismatch, "dense input width " + std::to_string(input.size()) +
                                             " does not match weights " + shape_string(weights.shape()));
  Tensor<T> out({U});
  for (int u = 0; u < U; ++u) out[u] = bias[u];
  const T* w = weights.data();
  for (int d = 0; d < D; ++d) {
    const T v = input[d];
    const T* wrow = w + static_cast<std::size_t>(d) * U;
    for (int u = 0; u < U; ++u) out[u] += v * wrow[u];
  }
  return out;
}

/// Inverted dropout: in training mode each element is zeroed with
/// probability p and survivors are scaled by 1/(1-p). Identity otherwise.
/// `mask` (if given) receives the per-element multiplier.
template <typename T>
Tensor<T> dropout_forward(const Tensor<T>& input, double p, bool training, Rng& rng,
                          std::vector<T>* mask = nullptr) {
  if (!(p >= 0 && p < 1)) throw NnError(NnErrc::BadConfig, "dropout probability must be in [0,1)");
  if (!training || p == 0) {
    if (mask) mask->assign(input.size(), T{1});
    return input;
  }
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> out(input.shape());
  std::vector<T> local;
  std::vector<T>& m = mask ? *mask : local;
  m.resize(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    m[i] = rng.uniform() < p ? T{0} : scale;
    out[i] = input[i] * m[i];
  }
  return out;
}

/// Mean over the batch of squared differences; `grad` receives 2(pred-label)/B.
template <typename T>
T mse_loss(std::span<const T> pred, std::span<const T> labels, std::vector<T>* grad = nullptr) {
  if (pred.size() != labels.size() || pred.empty())
    throw NnError(NnErrc::ShapeMismatch, "mse_loss needs equal, nonzero lengths");
  const auto B = static_cast<T>(pred.size());
  T sum{};
  if (grad) grad->resize(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - labels[i];
    sum += d * d;
    if (grad) (*grad)[i] = T{2} * d / B;
  }
  return sum / B;
}

// ---------------------------------------------------------------------------
// Layers.

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
};

template <typename T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  virtual std::string_view kind() const = 0;
  virtual Shape output_shape(const Shape& input) const = 0;
  virtual Tensor<T> forward(const Tensor<T>& input, const ForwardContext& ctx) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual std::vector<Param<T>*> params() { return {}; }

  const std::string& name() const noexcept { return name_; }
  std::size_t param_count() {
    std::size_t n = 0;
    for (auto* p : params()) n += p->value.size();
    return n;
  }

 private:
  std::string name_;
};

template <typename T>
class Conv2dSame final : public Layer<T> {
 public:
  Conv2dSame(std::string name, int in_channels, int out_channels, int kernel)
      : Layer<T>(std::move(name)),
        weight_(this->name() + "/weight", {kernel, kernel, in_channels, out_channels}),
        bias_(this->name() + "/bias", {out_channels}) {
    if (kernel < 1 || kernel % 2 == 0)
      throw NnError(NnErrc::BadConfig, "same-padded convolution requires an odd kernel size");
    if (in_channels < 1 || out_channels < 1) throw NnError(NnErrc::BadConfig, "channel counts must be positive");
  }

  std::string_view kind() const override { return "Conv2dSame"; }
  int kernel() const { return weight_.value.extent(0); }
  int in_channels() const { return weight_.value.extent(2); }
  int out_channels() const { return weight_.value.extent(3); }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 3 || in[2] != in_channels())
      throw NnError(NnErrc::ShapeMismatch, this->name() + " input " + shape_string(in));
    return {in[0], in[1], out_channels()};
  }

  Tensor<T> forward(const Tensor<T>& input, const ForwardContext&) override {
    input_ = input;
    return conv2d_same_forward(input, weight_.value, bias_.value);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    return conv2d_same_backward(input_, weight_.value, grad_out, weight_.grad, bias_.grad);
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }

 private:
  Param<T> weight_, bias_;
  Tensor<T> input_;
};

template <typename T>
class Elu final : public Layer<T> {
 public:
  Elu(std::string name, T alpha) : Layer<T>(std::move(name)), alpha_(alpha) {
    if (!(alpha > 0)) throw NnError(NnErrc::BadConfig, "ELU alpha must be positive");
  }
  std::string_view kind() const override { return "Elu"; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> forward(const Tensor<T>& input, const ForwardContext&) override {
    input_ = input;
    return elu(input, alpha_);
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> g(grad_out.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * elu_derivative(input_[i], alpha_);
    return g;
  }
  const Tensor<T>& last_input() const noexcept { return input_; }

 private:
  T alpha_;
  Tensor<T> input_;
};

template <typename T>
class MaxPool2x2 final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  std::string_view kind() const override { return "MaxPool2x2"; }
  Shape output_shape(const Shape& in) const override {
    if (in.size() != 3) throw NnError(NnErrc::ShapeMismatch, this->name() + " expects HxWxC");
    if (in[0] % 2 || in[1] % 2) throw NnError(NnErrc::OddExtent, this->name() + " input " + shape_string(in));
    return {in[0] / 2, in[1] / 2, in[2]};
  }

  Tensor<T> forward(const Tensor<T>& input, const ForwardContext&) override {
    auto r = maxpool2x2_forward(input);
    input_shape_ = input.shape();
    argmax_ = std::move(r.argmax);
    return std::move(r.output);
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> g(input_shape_);
    for (std::size_t o = 0; o < grad_out.size(); ++o) g[argmax_[o]] += grad_out[o];
    return g;
  }
  /// Winning input index of each output from the last forward pass.
  const std::vector<std::uint32_t>& argmax() const noexcept { return argmax_; }

 private:
  Shape input_shape_;
  std::vector<std::uint32_t> argmax_;
};

template <typename T>
class Flatten final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  std::string_view kind() const override { return "Flatten"; }
  Shape output_shape(const Shape& in) const override { return {static_cast<int>(shape_size(in))}; }
  Tensor<T> forward(const Tensor<T>& input, const ForwardContext&) override {
    input_shape_ = input.shape();
    return input.reshaped({static_cast<int>(input.size())});
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override { return grad_out.reshaped(input_shape_); }

 private:
  Shape input_shape_;
};

template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense(std::string name, int in_width, int out_width)
      : Layer<T>(std::move(name)),
        weight_(this->name() + "/weight", {in_width, out_width}),
        bias_(this->name() + "/bias", {out_width}) {
    if (in_width < 1 || out_width < 1) throw NnError(NnErrc::BadConfig, "dense widths must be positive");
  }
  std::string_view kind() const override { return "Dense"; }
  int in_width() const { return weight_.value.extent(0); }
  int out_width() const { return weight_.value.extent(1); }

  Shape output_shape(const Shape& in) const override {
    if (shape_size(in) != static_cast<std::size_t>(in_width()))
      throw NnError(NnErrc::ShapeMismatch, this->name() + " input " + shape_string(in));
    return {out_width()};
  }

  Tensor<T> forward(const Tensor<T>& input, const ForwardContext&) override {
    input_ = input;
    return dense_forward(input, weight_.value, bias_.value);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    const int D = in_width(), U = out_width();
    require_shape(grad_out, {U}, "dense backward");
    Tensor<T> gi(input_.shape());
    const T* w = weight_.value.data();
    T* gw = weight_.grad.data();
    for (int u = 0; u < U; ++u) bias_.grad[u] += grad_out[u];
    for (int d = 0; d < D; ++d) {
      const T v = input_[d];
      const T* wrow = w + static_cast<std::size_t>(d) * U;
      T* gwrow = gw + static_cast<std::size_t>(d) * U;
      T acc{};
      for (int u = 0; u < U; ++u) {
        gwrow[u] += v * grad_out[u];
        acc += wrow[u] * grad_out[u];
      }
      gi[d] = acc;
    }
    return gi;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }

 private:
  Param<T> weight_, bias_;
  Tensor<T> input_;
};

template <typename T>
class Dropout final : public Layer<T> {
 public:
  Dropout(std::string name, double p) : Layer<T>(std::move(name)), p_(p) {
    if (!(p >= 0 && p < 1)) throw NnError(NnErrc::BadConfig, "dropout probability must be in [0,1)");
  }
  std::string_view kind() const override { return "Dropout"; }
  Shape output_shape(const Shape& in) const override { return in; }
  double probability() const { return p_; }

  // Reuse the previous training mask instead of drawing a new one. Used by
  // finite-difference checks, which need a fixed function.
  void set_replay(bool on) { replay_ = on; }

  Tensor<T> forward(const Tensor<T>& input, const ForwardContext& ctx) override {
    if (!ctx.training) {
      mask_.assign(input.size(), T{1});
      return input;
    }
    if (replay_ && mask_.size() == input.size()) {
      Tensor<T> out(input.shape());
      for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] * mask_[i];
      return out;
    }
    if (!ctx.rng) throw NnError(NnErrc::BadConfig, "training-mode dropout needs an RNG");
    return dropout_forward(input, p_, true, *ctx.rng, &mask_);
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> g(grad_out.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * mask_[i];
    return g;
  }

 private:
  double p_;
  bool replay_ = false;
  std::vector<T> mask_;
};

}  // namespace deepsrq

#endif  // DEEPSRQ_LAYERS_HPP
