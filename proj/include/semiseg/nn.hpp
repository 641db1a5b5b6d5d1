#pragma once

// Minimal differentiable building blocks for the reference network. Forward
// passes are pure: activations needed by backward live in a caller-owned
// Trace, and parameter gradients go to caller-owned buffers. That keeps a
// single parameter set shared by every stream of a training step.

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "semiseg/error.hpp"
#include "semiseg/rng.hpp"
#include "semiseg/tensor.hpp"

namespace semiseg {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Output of a feature perturbation: out = in * multiplier + offset, with the
/// offset treated as a constant. An empty multiplier means identity.
template <typename T>
struct Perturbed {
  Tensor<T> output;
  Tensor<T> multiplier;

  /// dL/din from dL/dout.
  [[nodiscard]] Tensor<T> backward(Tensor<T> grad) const {
    if (!multiplier.empty())
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= multiplier[i];
    return grad;
  }
};

template <typename T>
using PerturbFn = std::function<Perturbed<T>(const Tensor<T>&)>;

/// Perturbation inserted in front of layer `before_layer` of a stack.
template <typename T>
struct LayerHook {
  int before_layer = 0;
  PerturbFn<T> fn;
};

template <typename T>
struct Trace {
  std::vector<Tensor<T>> saved;  // input of every layer, then the final output
  int hook_layer = -1;
  Tensor<T> hook_multiplier;
  Tensor<T> pre_hook;            // unperturbed input of the hooked layer
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* value;
};

/// Differentiable component with its own parameters.
template <typename T>
class Module {
 public:
  virtual ~Module() = default;

  [[nodiscard]] virtual Tensor<T> forward(const Tensor<T>& x, Trace<T>* trace,
                                          const LayerHook<T>* hook = nullptr) const = 0;
  /// Returns dL/dx. `grads` is either empty (input gradient only) or holds
  /// one buffer per parameter, in parameters() order, to accumulate into.
  [[nodiscard]] virtual Tensor<T> backward(const Trace<T>& trace, const Tensor<T>& grad_out,
                                           std::span<Tensor<T>> grads) const = 0;
  virtual std::vector<NamedParam<T>> parameters() = 0;
  [[nodiscard]] virtual std::vector<const Tensor<T>*> parameters() const = 0;
  [[nodiscard]] virtual std::vector<std::string> parameter_names() const = 0;
  [[nodiscard]] virtual int in_channels() const = 0;
  [[nodiscard]] virtual int out_channels() const = 0;
  [[nodiscard]] virtual int stride() const = 0;
  [[nodiscard]] virtual std::unique_ptr<Module<T>> clone() const = 0;
};

struct ConvSpec {
  int in_ch = 0;
  int out_ch = 0;
  int kernel = 3;
  int stride = 1;
  bool relu = true;
};

namespace detail {

inline int conv_out(int n, int k, int s) { return (n + 2 * (k / 2) - k) / s + 1; }

template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int s, int Ho, int Wo, T* cols) {
  const int pad = k / 2;
  const int L = Ho * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * L;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * s - pad + ky;
          T* r = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(r, r + Wo, T{0});
            continue;
          }
          const T* xr = x + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * s - pad + kx;
            r[ox] = (ix >= 0 && ix < W) ? xr[ix] : T{0};
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, int C, int H, int W, int k, int s, int Ho, int Wo, T* dx) {
  const int pad = k / 2;
  const int L = Ho * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * L;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * s - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* dr = dx + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * s - pad + kx;
            if (ix >= 0 && ix < W) dr[ix] += row[oy * Wo + ox];
          }
        }
      }
}

}  // namespace detail

/// Sequence of same-padded convolutions, each optionally followed by ReLU.
template <typename T>
class ConvStack final : public Module<T> {
 public:
  ConvStack(std::string prefix, std::vector<ConvSpec> specs) : prefix_(std::move(prefix)), specs_(std::move(specs)) {
    if (specs_.empty()) throw ArgumentError("ConvStack: no layers");
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      const auto& s = specs_[i];
      if (s.in_ch <= 0 || s.out_ch <= 0 || s.kernel <= 0 || s.kernel % 2 == 0 || s.stride <= 0)
        throw ArgumentError("ConvStack: invalid layer spec");
      if (i > 0 && s.in_ch != specs_[i - 1].out_ch) throw ArgumentError("ConvStack: channel chain broken");
      weights_.emplace_back(std::vector<int>{s.out_ch, s.in_ch, s.kernel, s.kernel});
      biases_.emplace_back(std::vector<int>{s.out_ch});
    }
  }

  /// He-normal weights, zero biases.
  void init(Rng& rng) {
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      const double fan_in = static_cast<double>(specs_[i].in_ch) * specs_[i].kernel * specs_[i].kernel;
      const double sd = std::sqrt(2.0 / fan_in);
      for (auto& w : weights_[i].values()) w = static_cast<T>(rng.normal(0.0, sd));
      biases_[i].fill(T{0});
    }
  }

  [[nodiscard]] const std::vector<ConvSpec>& specs() const noexcept { return specs_; }

  [[nodiscard]] Tensor<T> forward(const Tensor<T>& x, Trace<T>* trace,
                                  const LayerHook<T>* hook = nullptr) const override {
    if (x.rank() != 4 || x.dim(1) != in_channels())
      throw ArgumentError(prefix_ + ": expected N x " + std::to_string(in_channels()) + " x H x W input");
    if (hook && (hook->before_layer < 0 || hook->before_layer >= static_cast<int>(specs_.size())))
      throw ArgumentError(prefix_ + ": hook layer out of range");
    if (trace) {
      trace->saved.clear();
      trace->saved.reserve(specs_.size() + 1);
      trace->hook_layer = -1;
      trace->hook_multiplier = Tensor<T>();
      trace->pre_hook = Tensor<T>();
    }
    Tensor<T> cur = x;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      if (hook && hook->before_layer == static_cast<int>(i)) {
        Perturbed<T> p = hook->fn(cur);
        if (!p.output.same_shape(cur)) throw ArgumentError(prefix_ + ": hook changed the tensor shape");
        if (trace) {
          trace->hook_layer = static_cast<int>(i);
          trace->hook_multiplier = std::move(p.multiplier);
          trace->pre_hook = std::move(cur);
        }
        cur = std::move(p.output);
      }
      Tensor<T> next = conv_forward(i, cur);
      if (trace) trace->saved.push_back(std::move(cur));
      cur = std::move(next);
    }
    if (trace) trace->saved.push_back(cur);
    return cur;
  }

  [[nodiscard]] Tensor<T> backward(const Trace<T>& trace, const Tensor<T>& grad_out,
                                   std::span<Tensor<T>> grads) const override {
    if (trace.saved.size() != specs_.size() + 1) throw ArgumentError(prefix_ + ": trace does not match");
    if (!grads.empty() && grads.size() != 2 * specs_.size()) throw ArgumentError(prefix_ + ": gradient buffer count");
    Tensor<T> g = grad_out;
    for (std::size_t i = specs_.size(); i-- > 0;) {
      const bool hooked_out = trace.hook_layer == static_cast<int>(i) + 1;
      const Tensor<T>& out = hooked_out ? trace.pre_hook : trace.saved[i + 1];
      if (specs_[i].relu)
        for (std::size_t j = 0; j < g.size(); ++j)
          if (!(out[j] > T{0})) g[j] = T{0};
      g = conv_backward(i, trace.saved[i], g, grads.empty() ? nullptr : &grads[2 * i],
                        grads.empty() ? nullptr : &grads[2 * i + 1], i > 0 || need_input_grad_);
      if (trace.hook_layer == static_cast<int>(i) && !trace.hook_multiplier.empty())
        for (std::size_t j = 0; j < g.size(); ++j) g[j] *= trace.hook_multiplier[j];
    }
    return g;
  }

  std::vector<NamedParam<T>> parameters() override {
    std::vector<NamedParam<T>> out;
    const auto names = parameter_names();
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      out.push_back({names[2 * i], &weights_[i]});
      out.push_back({names[2 * i + 1], &biases_[i]});
    }
    return out;
  }
  [[nodiscard]] std::vector<const Tensor<T>*> parameters() const override {
    std::vector<const Tensor<T>*> out;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      out.push_back(&weights_[i]);
      out.push_back(&biases_[i]);
    }
    return out;
  }

  [[nodiscard]] std::vector<std::string> parameter_names() const override {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      out.push_back(prefix_ + "." + std::to_string(i) + ".weight");
      out.push_back(prefix_ + "." + std::to_string(i) + ".bias");
    }
    return out;
  }

  [[nodiscard]] int in_channels() const override { return specs_.front().in_ch; }
  [[nodiscard]] int out_channels() const override { return specs_.back().out_ch; }
  [[nodiscard]] int stride() const override {
    int s = 1;
    for (const auto& sp : specs_) s *= sp.stride;
    return s;
  }
  [[nodiscard]] std::unique_ptr<Module<T>> clone() const override { return std::make_unique<ConvStack>(*this); }

  /// Copy of layers [from, to) sharing current parameter values.
  [[nodiscard]] ConvStack slice(std::size_t from, std::size_t to) const {
    if (from >= to || to > specs_.size()) throw ArgumentError(prefix_ + ": bad slice");
    ConvStack out(prefix_, std::vector<ConvSpec>(specs_.begin() + from, specs_.begin() + to));
    for (std::size_t i = from; i < to; ++i) {
      out.weights_[i - from] = weights_[i];
      out.biases_[i - from] = biases_[i];
    }
    return out;
  }

  /// Skip computing the gradient w.r.t. the stack's input (saves a GEMM when
  /// the input is data).
  void set_need_input_grad(bool v) noexcept { need_input_grad_ = v; }

 private:
  Tensor<T> conv_forward(std::size_t li, const Tensor<T>& x) const {
    const auto& s = specs_[li];
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int Ho = detail::conv_out(H, s.kernel, s.stride), Wo = detail::conv_out(W, s.kernel, s.stride);
    const int Kc = s.in_ch * s.kernel * s.kernel, L = Ho * Wo;
    Tensor<T> y({N, s.out_ch, Ho, Wo});
    AlignedVector<T> cols(static_cast<std::size_t>(Kc) * L);
    Eigen::Map<const RowMatrix<T>> Wm(weights_[li].data(), s.out_ch, Kc);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(biases_[li].data(), s.out_ch);
    for (int n = 0; n < N; ++n) {
      const T* xn = x.data() + static_cast<std::size_t>(n) * s.in_ch * H * W;
      Eigen::Map<RowMatrix<T>> Y(y.data() + static_cast<std::size_t>(n) * s.out_ch * L, s.out_ch, L);
      if (s.kernel == 1 && s.stride == 1) {
        Y.noalias() = Wm * Eigen::Map<const RowMatrix<T>>(xn, Kc, L);
      } else {
        detail::im2col(xn, s.in_ch, H, W, s.kernel, s.stride, Ho, Wo, cols.data());
        Y.noalias() = Wm * Eigen::Map<const RowMatrix<T>>(cols.data(), Kc, L);
      }
      Y.colwise() += b;
      if (s.relu) Y = Y.cwiseMax(T{0});
    }
    return y;
  }

  Tensor<T> conv_backward(std::size_t li, const Tensor<T>& x, const Tensor<T>& gy, Tensor<T>* gw, Tensor<T>* gb,
                          bool want_dx) const {
    const auto& s = specs_[li];
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int Ho = gy.dim(2), Wo = gy.dim(3);
    const int Kc = s.in_ch * s.kernel * s.kernel, L = Ho * Wo;
    Tensor<T> dx;
    if (want_dx) dx = Tensor<T>(x.shape());
    AlignedVector<T> cols(static_cast<std::size_t>(Kc) * L), dcols(static_cast<std::size_t>(Kc) * L);
    Eigen::Map<const RowMatrix<T>> Wm(weights_[li].data(), s.out_ch, Kc);
    const bool direct = s.kernel == 1 && s.stride == 1;
    for (int n = 0; n < N; ++n) {
      const T* xn = x.data() + static_cast<std::size_t>(n) * s.in_ch * H * W;
      Eigen::Map<const RowMatrix<T>> G(gy.data() + static_cast<std::size_t>(n) * s.out_ch * L, s.out_ch, L);
      if (gw) {
        if (!direct) detail::im2col(xn, s.in_ch, H, W, s.kernel, s.stride, Ho, Wo, cols.data());
        Eigen::Map<const RowMatrix<T>> X(direct ? xn : cols.data(), Kc, L);
        Eigen::Map<RowMatrix<T>> GW(gw->data(), s.out_ch, Kc);
        GW.noalias() += G * X.transpose();
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> GB(gb->data(), s.out_ch);
        GB += G.rowwise().sum();
      }
      if (want_dx) {
        T* dxn = dx.data() + static_cast<std::size_t>(n) * s.in_ch * H * W;
        if (direct) {
          Eigen::Map<RowMatrix<T>>(dxn, Kc, L).noalias() = Wm.transpose() * G;
        } else {
          Eigen::Map<RowMatrix<T>>(dcols.data(), Kc, L).noalias() = Wm.transpose() * G;
          detail::col2im(dcols.data(), s.in_ch, H, W, s.kernel, s.stride, Ho, Wo, dxn);
        }
      }
    }
    return dx;
  }

  std::string prefix_;
  std::vector<ConvSpec> specs_;
  std::vector<Tensor<T>> weights_;
  std::vector<Tensor<T>> biases_;
  bool need_input_grad_ = true;
};

/// Bilinear resize of the last two dims (align_corners = false).
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  if (x.rank() != 4) throw ArgumentError("upsample_bilinear: rank-4 input expected");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == out_h && W == out_w) return x;
  Tensor<T> y({N, C, out_h, out_w});
  const double sy = static_cast<double>(H) / out_h, sx = static_cast<double>(W) / out_w;
  std::vector<int> x0(out_w), x1(out_w);
  std::vector<T> wx(out_w);
  for (int ox = 0; ox < out_w; ++ox) {
    const double fx = std::max(0.0, (ox + 0.5) * sx - 0.5);
    x0[ox] = std::min(static_cast<int>(fx), W - 1);
    x1[ox] = std::min(x0[ox] + 1, W - 1);
    wx[ox] = static_cast<T>(fx - x0[ox]);
  }
  for (int nc = 0; nc < N * C; ++nc) {
    const T* in = x.data() + static_cast<std::size_t>(nc) * H * W;
    T* out = y.data() + static_cast<std::size_t>(nc) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const double fy = std::max(0.0, (oy + 0.5) * sy - 0.5);
      const int y0 = std::min(static_cast<int>(fy), H - 1), y1 = std::min(y0 + 1, H - 1);
      const T wy = static_cast<T>(fy - y0);
      const T* r0 = in + y0 * W;
      const T* r1 = in + y1 * W;
      for (int ox = 0; ox < out_w; ++ox) {
        const T top = r0[x0[ox]] * (T{1} - wx[ox]) + r0[x1[ox]] * wx[ox];
        const T bot = r1[x0[ox]] * (T{1} - wx[ox]) + r1[x1[ox]] * wx[ox];
        out[oy * out_w + ox] = top * (T{1} - wy) + bot * wy;
      }
    }
  }
  return y;
}

/// Adjoint of upsample_bilinear.
template <typename T>
Tensor<T> upsample_bilinear_backward(const Tensor<T>& grad_out, int in_h, int in_w) {
  const int N = grad_out.dim(0), C = grad_out.dim(1), out_h = grad_out.dim(2), out_w = grad_out.dim(3);
  if (in_h == out_h && in_w == out_w) return grad_out;
  Tensor<T> g({N, C, in_h, in_w});
  const double sy = static_cast<double>(in_h) / out_h, sx = static_cast<double>(in_w) / out_w;
  for (int nc = 0; nc < N * C; ++nc) {
    const T* go = grad_out.data() + static_cast<std::size_t>(nc) * out_h * out_w;
    T* gi = g.data() + static_cast<std::size_t>(nc) * in_h * in_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const double fy = std::max(0.0, (oy + 0.5) * sy - 0.5);
      const int y0 = std::min(static_cast<int>(fy), in_h - 1), y1 = std::min(y0 + 1, in_h - 1);
      const T wy = static_cast<T>(fy - y0);
      for (int ox = 0; ox < out_w; ++ox) {
        const double fx = std::max(0.0, (ox + 0.5) * sx - 0.5);
        const int x0 = std::min(static_cast<int>(fx), in_w - 1), x1 = std::min(x0 + 1, in_w - 1);
        const T wx = static_cast<T>(fx - x0);
        const T v = go[oy * out_w + ox];
        gi[y0 * in_w + x0] += v * (T{1} - wy) * (T{1} - wx);
        gi[y0 * in_w + x1] += v * (T{1} - wy) * wx;
        gi[y1 * in_w + x0] += v * wy * (T{1} - wx);
        gi[y1 * in_w + x1] += v * wy * wx;
      }
    }
  }
  return g;
}

/// Softmax over dim 1 of an N x K x H x W tensor.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  if (logits.rank() != 4) throw ArgumentError("softmax_channels: rank-4 input expected");
  const int N = logits.dim(0), K = logits.dim(1);
  const std::size_t P = logits.plane_size();
  Tensor<T> out(logits.shape());
  for (int n = 0; n < N; ++n) {
    const T* z = logits.data() + static_cast<std::size_t>(n) * K * P;
    T* p = out.data() + static_cast<std::size_t>(n) * K * P;
    for (std::size_t i = 0; i < P; ++i) {
      T mx = z[i];
      for (int k = 1; k < K; ++k) mx = std::max(mx, z[k * P + i]);
      T sum{0};
      for (int k = 0; k < K; ++k) sum += p[k * P + i] = std::exp(z[k * P + i] - mx);
      for (int k = 0; k < K; ++k) p[k * P + i] /= sum;
    }
  }
  return out;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (const T v : t.values())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace semiseg
