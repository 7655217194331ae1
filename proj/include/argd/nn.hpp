#pragma once

// Layers with explicit forward/backward passes. Each layer caches what its
// backward pass needs during forward; backward must follow the matching
// forward call.

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "argd/kernels.hpp"
#include "argd/tensor.hpp"

namespace argd::nn {

template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> velocity;
  bool decay = true;

  Parameter(std::string n, std::vector<int> s, bool d = true)
      : name(std::move(n)), shape(std::move(s)), decay(d) {
    const std::size_t count = Tensor<T>::count(shape);
    value.assign(count, T{});
    grad.assign(count, T{});
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T{}); }
};

/// Non-trainable persistent state (batch-norm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  std::vector<T>* values;
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, bool train) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual void collect(const std::string& /*prefix*/, std::vector<Parameter<T>*>& /*params*/,
                       std::vector<Buffer<T>>& /*buffers*/) {}
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

template <typename T>
void kaiming_normal(Parameter<T>& p, int fan, std::mt19937_64& gen) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan));
  for (auto& v : p.value) v = static_cast<T>(dist(gen));
}

template <typename T>
void uniform_init(Parameter<T>& p, double bound, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : p.value) v = static_cast<T>(dist(gen));
}

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, bool bias,
         std::mt19937_64& gen)
      : weight_("weight", {out_channels, in_channels, kernel, kernel}),
        bias_("bias", {bias ? out_channels : 0}, false),
        has_bias_(bias) {
    geom_.in_channels = in_channels;
    geom_.out_channels = out_channels;
    geom_.kernel = kernel;
    geom_.stride = stride;
    geom_.pad = pad;
    kaiming_normal(weight_, out_channels * kernel * kernel, gen);
  }

  Tensor<T> forward(const Tensor<T>& x, bool /*train*/) override {
    require_rank(x, 4, "Conv2d input");
    if (x.dim(1) != geom_.in_channels) {
      throw InputError("Conv2d input has " + std::to_string(x.dim(1)) + " channels, expected " +
                       std::to_string(geom_.in_channels));
    }
    geom_.batch = x.dim(0);
    geom_.in_height = x.dim(2);
    geom_.in_width = x.dim(3);
    input_ = x;
    Tensor<T> y({geom_.batch, geom_.out_channels, geom_.out_height(), geom_.out_width()});
    kernels::conv2d_forward<T>(geom_, x.span(), weight_.value,
                               has_bias_ ? std::span<const T>(bias_.value) : std::span<const T>(),
                               y.span());
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> grad_in(input_.shape());
    std::vector<T> gw(weight_.value.size());
    std::vector<T> gb(has_bias_ ? bias_.value.size() : 0);
    kernels::conv2d_backward<T>(geom_, input_.span(), weight_.value, grad_out.span(),
                                grad_in.span(), gw, gb);
    for (std::size_t i = 0; i < gw.size(); ++i) weight_.grad[i] += gw[i];
    for (std::size_t i = 0; i < gb.size(); ++i) bias_.grad[i] += gb[i];
    return grad_in;
  }

  void collect(const std::string& prefix, std::vector<Parameter<T>*>& params,
               std::vector<Buffer<T>>& /*buffers*/) override {
    weight_.name = prefix + "weight";
    params.push_back(&weight_);
    if (has_bias_) {
      bias_.name = prefix + "bias";
      params.push_back(&bias_);
    }
  }

 private:
  kernels::ConvGeometry geom_;
  Parameter<T> weight_;
  Parameter<T> bias_;
  bool has_bias_;
  Tensor<T> input_;
};

template <typename T>
class BatchNorm2d final : public Layer<T> {
 public:
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5)
      : gamma_("weight", {channels}, false),
        beta_("bias", {channels}, false),
        running_mean_(static_cast<std::size_t>(channels), T{}),
        running_var_(static_cast<std::size_t>(channels), T{1}),
        momentum_(momentum),
        eps_(eps) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), T{1});
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    require_rank(x, 4, "BatchNorm2d input");
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    if (c != static_cast<int>(running_mean_.size())) throw InputError("BatchNorm2d channel mismatch");
    const double count = static_cast<double>(n) * static_cast<double>(hw);
    train_ = train;
    xhat_ = Tensor<T>(x.shape());
    inv_std_.assign(static_cast<std::size_t>(c), T{});
    Tensor<T> y(x.shape());
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
      double mean = 0.0, var = 0.0;
      if (train) {
        for (int b = 0; b < n; ++b) {
          const T* p = x.data() + (static_cast<std::size_t>(b) * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) mean += p[i];
        }
        mean /= count;
        for (int b = 0; b < n; ++b) {
          const T* p = x.data() + (static_cast<std::size_t>(b) * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            const double d = p[i] - mean;
            var += d * d;
          }
        }
        var /= count;
        const double unbiased = count > 1 ? var * count / (count - 1) : var;
        running_mean_[ch] = static_cast<T>((1 - momentum_) * running_mean_[ch] + momentum_ * mean);
        running_var_[ch] = static_cast<T>((1 - momentum_) * running_var_[ch] + momentum_ * unbiased);
      } else {
        mean = running_mean_[ch];
        var = running_var_[ch];
      }
      const T inv = static_cast<T>(1.0 / std::sqrt(var + eps_));
      inv_std_[ch] = inv;
      const T m = static_cast<T>(mean);
      const T g = gamma_.value[ch], bt = beta_.value[ch];
      for (int b = 0; b < n; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T xh = (x[off + i] - m) * inv;
          xhat_[off + i] = xh;
          y[off + i] = g * xh + bt;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    const int n = grad_out.dim(0), c = grad_out.dim(1);
    const std::size_t hw = static_cast<std::size_t>(grad_out.dim(2)) * grad_out.dim(3);
    const double count = static_cast<double>(n) * static_cast<double>(hw);
    Tensor<T> grad_in(grad_out.shape());
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (int b = 0; b < n; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_g += grad_out[off + i];
          sum_gx += static_cast<double>(grad_out[off + i]) * xhat_[off + i];
        }
      }
      gamma_.grad[ch] += static_cast<T>(sum_gx);
      beta_.grad[ch] += static_cast<T>(sum_g);
      const T scale = gamma_.value[ch] * inv_std_[ch];
      const T mean_g = static_cast<T>(sum_g / count);
      const T mean_gx = static_cast<T>(sum_gx / count);
      for (int b = 0; b < n; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          grad_in[off + i] = train_ ? scale * (grad_out[off + i] - mean_g - xhat_[off + i] * mean_gx)
                                    : scale * grad_out[off + i];
        }
      }
    }
    return grad_in;
  }

  void collect(const std::string& prefix, std::vector<Parameter<T>*>& params,
               std::vector<Buffer<T>>& buffers) override {
    gamma_.name = prefix + "weight";
    beta_.name = prefix + "bias";
    params.push_back(&gamma_);
    params.push_back(&beta_);
    buffers.push_back({prefix + "running_mean", &running_mean_});
    buffers.push_back({prefix + "running_var", &running_var_});
  }

 private:
  Parameter<T> gamma_;
  Parameter<T> beta_;
  std::vector<T> running_mean_;
  std::vector<T> running_var_;
  double momentum_;
  double eps_;
  bool train_ = false;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool /*train*/) override {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{} ? x[i] : T{};
    output_ = y;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> g(grad_out.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = output_[i] > T{} ? grad_out[i] : T{};
    return g;
  }

 private:
  Tensor<T> output_;
};

/// (N, C, H, W) -> (N, C)
template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool /*train*/) override {
    require_rank(x, 4, "GlobalAvgPool input");
    in_shape_ = x.shape();
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor<T> y({n, c});
    for (std::size_t i = 0; i < y.size(); ++i) {
      T s{};
      for (std::size_t j = 0; j < hw; ++j) s += x[i * hw + j];
      y[i] = s / static_cast<T>(hw);
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> g(in_shape_);
    const std::size_t hw = static_cast<std::size_t>(in_shape_[2]) * in_shape_[3];
    for (std::size_t i = 0; i < grad_out.size(); ++i) {
      const T v = grad_out[i] / static_cast<T>(hw);
      for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] = v;
    }
    return g;
  }

 private:
  std::vector<int> in_shape_;
};

/// (N, in) -> (N, out)
template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(int in, int out, std::mt19937_64& gen)
      : weight_("weight", {out, in}), bias_("bias", {out}, false), in_(in), out_(out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    uniform_init(weight_, bound, gen);
    uniform_init(bias_, bound, gen);
  }

  Tensor<T> forward(const Tensor<T>& x, bool /*train*/) override {
    require_rank(x, 2, "Linear input");
    if (x.dim(1) != in_) throw InputError("Linear input width mismatch");
    input_ = x;
    const int n = x.dim(0);
    Tensor<T> y({n, out_});
    for (int b = 0; b < n; ++b) {
      for (int o = 0; o < out_; ++o) {
        T s = bias_.value[o];
        const T* w = weight_.value.data() + static_cast<std::size_t>(o) * in_;
        const T* xi = x.data() + static_cast<std::size_t>(b) * in_;
        for (int i = 0; i < in_; ++i) s += w[i] * xi[i];
        y[static_cast<std::size_t>(b) * out_ + o] = s;
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    const int n = grad_out.dim(0);
    Tensor<T> g({n, in_});
    for (int b = 0; b < n; ++b) {
      const T* xi = input_.data() + static_cast<std::size_t>(b) * in_;
      T* gi = g.data() + static_cast<std::size_t>(b) * in_;
      for (int o = 0; o < out_; ++o) {
        const T go = grad_out[static_cast<std::size_t>(b) * out_ + o];
        bias_.grad[o] += go;
        T* gw = weight_.grad.data() + static_cast<std::size_t>(o) * in_;
        const T* w = weight_.value.data() + static_cast<std::size_t>(o) * in_;
        for (int i = 0; i < in_; ++i) {
          gw[i] += go * xi[i];
          gi[i] += go * w[i];
        }
      }
    }
    return g;
  }

  void collect(const std::string& prefix, std::vector<Parameter<T>*>& params,
               std::vector<Buffer<T>>& /*buffers*/) override {
    weight_.name = prefix + "weight";
    bias_.name = prefix + "bias";
    params.push_back(&weight_);
    params.push_back(&bias_);
  }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
  int in_;
  int out_;
  Tensor<T> input_;
};

template <typename T>
class Sequential final : public Layer<T> {
 public:
  Sequential() = default;

  Sequential& add(LayerPtr<T> layer) {
    layers_.push_back(std::move(layer));
    return *this;
  }
  template <typename L, typename... Args>
  Sequential& emplace(Args&&... args) {
    layers_.push_back(std::make_unique<L>(std::forward<Args>(args)...));
    return *this;
  }
  bool empty() const { return layers_.empty(); }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> h = x;
    for (auto& l : layers_) h = l->forward(h, train);
    return h;
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }
  void collect(const std::string& prefix, std::vector<Parameter<T>*>& params,
               std::vector<Buffer<T>>& buffers) override {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i]->collect(prefix + std::to_string(i) + ".", params, buffers);
    }
  }

 private:
  std::vector<LayerPtr<T>> layers_;
};

/// Pre-activation residual block of a wide residual network:
/// BN-ReLU-conv3x3(stride)-BN-ReLU-conv3x3 plus an identity or 1x1 shortcut.
template <typename T>
class WideBasicBlock final : public Layer<T> {
 public:
  WideBasicBlock(int in, int out, int stride, std::mt19937_64& gen)
      : bn1_(in), bn2_(out), conv1_(in, out, 3, stride, 1, false, gen),
        conv2_(out, out, 3, 1, 1, false, gen), equal_(in == out && stride == 1) {
    if (!equal_) shortcut_ = std::make_unique<Conv2d<T>>(in, out, 1, stride, 0, false, gen);
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> a = relu1_.forward(bn1_.forward(x, train), train);
    Tensor<T> h = conv1_.forward(a, train);
    h = conv2_.forward(relu2_.forward(bn2_.forward(h, train), train), train);
    const Tensor<T> skip = equal_ ? x : shortcut_->forward(a, train);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += skip[i];
    return h;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> g = conv2_.backward(grad_out);
    g = bn2_.backward(relu2_.backward(g));
    Tensor<T> grad_a = conv1_.backward(g);
    if (equal_) {
      Tensor<T> gx = bn1_.backward(relu1_.backward(grad_a));
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += grad_out[i];
      return gx;
    }
    const Tensor<T> gs = shortcut_->backward(grad_out);
    for (std::size_t i = 0; i < grad_a.size(); ++i) grad_a[i] += gs[i];
    return bn1_.backward(relu1_.backward(grad_a));
  }

  void collect(const std::string& prefix, std::vector<Parameter<T>*>& params,
               std::vector<Buffer<T>>& buffers) override {
    bn1_.collect(prefix + "bn1.", params, buffers);
    conv1_.collect(prefix + "conv1.", params, buffers);
    bn2_.collect(prefix + "bn2.", params, buffers);
    conv2_.collect(prefix + "conv2.", params, buffers);
    if (shortcut_) shortcut_->collect(prefix + "shortcut.", params, buffers);
  }

 private:
  BatchNorm2d<T> bn1_;
  BatchNorm2d<T> bn2_;
  ReLU<T> relu1_;
  ReLU<T> relu2_;
  Conv2d<T> conv1_;
  Conv2d<T> conv2_;
  std::unique_ptr<Conv2d<T>> shortcut_;
  bool equal_;
};

}  // namespace argd::nn
