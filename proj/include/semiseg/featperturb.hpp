#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include "semiseg/model.hpp"

namespace semiseg {

enum class PerturbKind { none, channel_dropout, uniform_noise, vat };

/// Where feature perturbations are inserted.
enum class PerturbLocation {
  encoder_decoder,  // on the encoder output
  pre_classifier,   // in front of the decoder's final (classifier) layer
};

std::string to_string(PerturbKind k);
PerturbKind parse_perturb_kind(std::string_view s);
std::string to_string(PerturbLocation l);
PerturbLocation parse_perturb_location(std::string_view s);

struct FeaturePerturbSpec {
  PerturbKind kind = PerturbKind::channel_dropout;
  double dropout_prob = 0.5;
  double noise_amplitude = 0.3;
  double vat_eps = 2.0;
  double vat_xi = 1e-6;
  int vat_iters = 1;
  PerturbLocation location = PerturbLocation::encoder_decoder;

  void validate() const;
};

/// Leading dims are units (N*C or C); the last two dims are spatial.
template <typename T>
std::size_t channel_units(const Tensor<T>& feat) {
  if (feat.rank() < 3) throw ArgumentError("feature map must have rank >= 3");
  return feat.size() / feat.plane_size();
}

/// Zeroes each channel independently with probability p and scales the
/// survivors by 1/(1-p). All positions of a channel share its fate.
template <typename T>
Perturbed<T> channel_dropout_ex(const Tensor<T>& feat, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ArgumentError("channel_dropout: p must lie in [0, 1)");
  const std::size_t units = channel_units(feat), plane = feat.plane_size();
  const T keep_scale = T{1} / (T{1} - static_cast<T>(p));
  Perturbed<T> out{feat, Tensor<T>(feat.shape())};
  for (std::size_t u = 0; u < units; ++u) {
    const T m = rng.bernoulli(p) ? T{0} : keep_scale;
    for (std::size_t i = u * plane; i < (u + 1) * plane; ++i) {
      out.multiplier[i] = m;
      out.output[i] = feat[i] * m;
    }
  }
  return out;
}

template <typename T>
Tensor<T> channel_dropout(const Tensor<T>& feat, double p, Rng& rng) {
  return channel_dropout_ex(feat, p, rng).output;
}

/// out = feat * (1 + n), n ~ U[-amplitude, amplitude] elementwise.
template <typename T>
Perturbed<T> uniform_noise_ex(const Tensor<T>& feat, double amplitude, Rng& rng) {
  if (!(amplitude >= 0.0)) throw ArgumentError("uniform_noise: amplitude must be >= 0");
  Perturbed<T> out{feat, Tensor<T>(feat.shape(), T{1})};
  if (amplitude == 0.0) return out;
  for (std::size_t i = 0; i < feat.size(); ++i) {
    out.multiplier[i] = static_cast<T>(1.0 + rng.uniform(-amplitude, amplitude));
    out.output[i] = feat[i] * out.multiplier[i];
  }
  return out;
}

template <typename T>
Tensor<T> uniform_noise(const Tensor<T>& feat, double amplitude, Rng& rng) {
  return uniform_noise_ex(feat, amplitude, rng).output;
}

/// Map from features to per-pixel logits (N x K x h x w) with a
/// vector-Jacobian product. Only the input gradient is needed.
template <typename T>
class DifferentiableMap {
 public:
  virtual ~DifferentiableMap() = default;
  [[nodiscard]] virtual Tensor<T> forward(const Tensor<T>& x) const = 0;
  [[nodiscard]] virtual Tensor<T> vjp(const Tensor<T>& x, const Tensor<T>& grad_out) const = 0;
};

/// Wraps a module (typically a model's decoder) at feature resolution.
template <typename T>
class ModuleMap final : public DifferentiableMap<T> {
 public:
  explicit ModuleMap(const Module<T>& m) : m_(m) {}
  [[nodiscard]] Tensor<T> forward(const Tensor<T>& x) const override { return m_.forward(x, nullptr); }
  [[nodiscard]] Tensor<T> vjp(const Tensor<T>& x, const Tensor<T>& grad_out) const override {
    Trace<T> tr;
    (void)m_.forward(x, &tr);
    return m_.backward(tr, grad_out, {});
  }

 private:
  const Module<T>& m_;
};

namespace detail {

/// Rescales each item of the batch (or the whole tensor for rank 3) to unit
/// L2 norm. Items with zero norm are left untouched; returns false if any.
template <typename T>
bool normalize_items(Tensor<T>& t) {
  const std::size_t items = t.rank() == 4 ? static_cast<std::size_t>(t.dim(0)) : 1;
  const std::size_t per = t.size() / items;
  bool ok = true;
  for (std::size_t n = 0; n < items; ++n) {
    double ss = 0.0;
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) ss += static_cast<double>(t[i]) * t[i];
    if (ss <= 0.0) {
      ok = false;
      continue;
    }
    const double inv = 1.0 / std::sqrt(ss);
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) t[i] = static_cast<T>(t[i] * inv);
  }
  return ok;
}

}  // namespace detail

/// Adversarial direction by power iteration on KL(softmax(h(e)) ||
/// softmax(h(e + r))); returns e + eps * d with ||d|| = 1 per item. The
/// offset is a constant for backpropagation purposes.
template <typename T>
Perturbed<T> vat_perturb_ex(const Tensor<T>& feat, const DifferentiableMap<T>& decoder, const FeaturePerturbSpec& spec,
                            Rng& rng) {
  if (!(spec.vat_eps >= 0.0) || !(spec.vat_xi > 0.0) || spec.vat_iters < 1)
    throw ArgumentError("vat_perturb: need vat_eps >= 0, vat_xi > 0, vat_iters >= 1");
  const Tensor<T> p = softmax_channels(decoder.forward(feat));
  Tensor<T> d(feat.shape());
  for (auto& v : d.values()) v = static_cast<T>(rng.normal());
  detail::normalize_items(d);
  for (int it = 0; it < spec.vat_iters; ++it) {
    Tensor<T> x = feat;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += static_cast<T>(spec.vat_xi) * d[i];
    Tensor<T> gl = softmax_channels(decoder.forward(x));
    gl -= p;  // d KL(p || q) / d logits_q
    Tensor<T> g = decoder.vjp(x, gl);
    if (!all_finite(g))
      throw NumericError("vat_perturb: non-finite gradient at power iteration " + std::to_string(it));
    // A vanishing gradient keeps the previous direction.
    Tensor<T> prev = d;
    d = std::move(g);
    const std::size_t items = d.rank() == 4 ? static_cast<std::size_t>(d.dim(0)) : 1;
    const std::size_t per = d.size() / items;
    detail::normalize_items(d);
    for (std::size_t n = 0; n < items; ++n) {
      double ss = 0.0;
      for (std::size_t i = n * per; i < (n + 1) * per; ++i) ss += static_cast<double>(d[i]) * d[i];
      if (std::abs(ss - 1.0) > 1e-3)
        for (std::size_t i = n * per; i < (n + 1) * per; ++i) d[i] = prev[i];
    }
  }
  Perturbed<T> out{feat, Tensor<T>()};
  for (std::size_t i = 0; i < feat.size(); ++i) out.output[i] += static_cast<T>(spec.vat_eps) * d[i];
  return out;
}

template <typename T>
Tensor<T> vat_perturb(const Tensor<T>& feat, const DifferentiableMap<T>& decoder, const FeaturePerturbSpec& spec,
                      Rng& rng) {
  return vat_perturb_ex(feat, decoder, spec, rng).output;
}

/// Dispatches on spec.kind. `decoder` is required only for VAT.
template <typename T>
Perturbed<T> apply_perturbation(const Tensor<T>& feat, const FeaturePerturbSpec& spec, Rng& rng,
                                const DifferentiableMap<T>* decoder = nullptr) {
  switch (spec.kind) {
    case PerturbKind::none: return Perturbed<T>{feat, Tensor<T>()};
    case PerturbKind::channel_dropout: return channel_dropout_ex(feat, spec.dropout_prob, rng);
    case PerturbKind::uniform_noise: return uniform_noise_ex(feat, spec.noise_amplitude, rng);
    case PerturbKind::vat:
      if (!decoder) throw ArgumentError("apply_perturbation: VAT needs a decoder");
      return vat_perturb_ex(feat, *decoder, spec, rng);
  }
  throw ArgumentError("apply_perturbation: unknown kind");
}

}  // namespace semiseg
