#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "semiseg/nn.hpp"

namespace semiseg {

/// Hard per-pixel targets plus a validity plane, for a batch (N x H x W).
struct PseudoLabel {
  int n = 0;
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> hard;
  std::vector<std::uint8_t> valid;

  PseudoLabel() = default;
  PseudoLabel(int n_, int h_, int w_)
      : n(n_), height(h_), width(w_), hard(static_cast<std::size_t>(n_) * h_ * w_, 0),
        valid(static_cast<std::size_t>(n_) * h_ * w_, 0) {}

  [[nodiscard]] std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * width; }
  [[nodiscard]] std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  }
  [[nodiscard]] LabelMask hard_mask(int i) const {
    LabelMask m(height, width);
    std::copy_n(hard.begin() + static_cast<std::ptrdiff_t>(plane() * i), plane(), m.data.begin());
    return m;
  }

  friend bool operator==(const PseudoLabel&, const PseudoLabel&) = default;
};

/// hard = argmax, valid = (max prob >= tau). Accepts K x H x W or
/// N x K x H x W probabilities.
template <typename T>
PseudoLabel pseudo_label(const Tensor<T>& probs, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ArgumentError("pseudo_label: tau must lie in [0, 1]");
  if (probs.rank() != 3 && probs.rank() != 4) throw ArgumentError("pseudo_label: rank 3 or 4 probabilities expected");
  const int off = probs.rank() == 4 ? 1 : 0;
  const int N = off ? probs.dim(0) : 1, K = probs.dim(off), H = probs.dim(off + 1), W = probs.dim(off + 2);
  PseudoLabel pl(N, H, W);
  const std::size_t P = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    const T* p = probs.data() + static_cast<std::size_t>(n) * K * P;
    for (std::size_t i = 0; i < P; ++i) {
      double sum = 0.0;
      int best = 0;
      T best_p = p[i];
      for (int k = 0; k < K; ++k) {
        const T v = p[k * P + i];
        sum += v;
        if (v > best_p) best_p = v, best = k;
      }
      if (std::abs(sum - 1.0) > 1e-3)
        throw ContractError("pseudo_label: probabilities do not sum to 1 (got " + std::to_string(sum) + ")");
      pl.hard[n * P + i] = best;
      pl.valid[n * P + i] = static_cast<double>(best_p) >= tau ? 1 : 0;
    }
  }
  return pl;
}

/// Ground-truth masks as targets: valid wherever the label is not ignored.
inline PseudoLabel targets_from_masks(std::span<const LabelMask> masks) {
  if (masks.empty()) throw ArgumentError("targets_from_masks: empty batch");
  PseudoLabel pl(static_cast<int>(masks.size()), masks[0].height, masks[0].width);
  for (std::size_t n = 0; n < masks.size(); ++n) {
    if (masks[n].height != pl.height || masks[n].width != pl.width)
      throw ArgumentError("targets_from_masks: masks differ in size");
    for (std::size_t i = 0; i < pl.plane(); ++i) {
      const auto v = masks[n].data[i];
      const bool ok = v != masks[n].ignore_index;
      pl.hard[n * pl.plane() + i] = ok ? v : 0;
      pl.valid[n * pl.plane() + i] = ok ? 1 : 0;
    }
  }
  return pl;
}

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;         // d value / d logits
  std::size_t count = 0;  // pixels that contributed
};

namespace detail {

template <typename T>
void check_logits_vs(const Tensor<T>& logits, const PseudoLabel& pl, const char* who) {
  if (logits.rank() != 4 || logits.dim(0) != pl.n || logits.dim(2) != pl.height || logits.dim(3) != pl.width)
    throw ArgumentError(std::string(who) + ": logits and targets disagree in shape");
}

/// Cross-entropy over an explicit pixel selection (flat indices n*P + i),
/// averaged over the selection.
template <typename T>
LossResult<T> ce_over(const Tensor<T>& logits, const PseudoLabel& pl, const std::vector<std::size_t>& pixels,
                      bool want_grad, const char* who) {
  const int K = logits.dim(1);
  const std::size_t P = pl.plane();
  LossResult<T> out;
  if (want_grad) out.grad = Tensor<T>(logits.shape());
  out.count = pixels.size();
  if (pixels.empty()) return out;
  const double inv = 1.0 / static_cast<double>(pixels.size());
  double total = 0.0;
  std::vector<double> e(static_cast<std::size_t>(K));
  for (const std::size_t flat : pixels) {
    const std::size_t n = flat / P, i = flat % P;
    const int target = pl.hard[flat];
    if (target < 0 || target >= K) throw ArgumentError(std::string(who) + ": target class out of range");
    const T* z = logits.data() + n * K * P + i;
    double mx = z[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(z[k * P]));
    double sum = 0.0;
    for (int k = 0; k < K; ++k) sum += e[k] = std::exp(static_cast<double>(z[k * P]) - mx);
    total += (std::log(sum) + mx - static_cast<double>(z[target * P])) * inv;
    if (want_grad) {
      T* g = out.grad.data() + n * K * P + i;
      for (int k = 0; k < K; ++k) g[k * P] = static_cast<T>((e[k] / sum - (k == target ? 1.0 : 0.0)) * inv);
    }
  }
  out.value = total;
  return out;
}

}  // namespace detail

/// Mean cross-entropy over valid pixels of the whole batch; 0 with zero
/// gradient when nothing is valid.
template <typename T>
LossResult<T> masked_ce(const Tensor<T>& logits, const PseudoLabel& pl, bool want_grad = true) {
  detail::check_logits_vs(logits, pl, "masked_ce");
  std::vector<std::size_t> pixels;
  pixels.reserve(pl.valid.size());
  for (std::size_t i = 0; i < pl.valid.size(); ++i)
    if (pl.valid[i]) pixels.push_back(i);
  return detail::ce_over(logits, pl, pixels, want_grad, "masked_ce");
}

/// Plain cross-entropy against masks, skipping ignore_index.
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const LabelMask> targets, bool want_grad = true) {
  return masked_ce(logits, targets_from_masks(targets), want_grad);
}

/// Online hard example mining: CE over non-ignored pixels whose target-class
/// probability is below `thresh` (thresh >= 1 keeps all), topped up with the
/// lowest-probability pixels to at least min_kept when available.
template <typename T>
LossResult<T> ohem_ce(const Tensor<T>& logits, std::span<const LabelMask> targets, double thresh, int min_kept,
                      bool want_grad = true) {
  if (min_kept < 1) throw ArgumentError("ohem_ce: min_kept must be >= 1");
  const PseudoLabel pl = targets_from_masks(targets);
  detail::check_logits_vs(logits, pl, "ohem_ce");
  const Tensor<T> probs = softmax_channels(logits);
  const int K = logits.dim(1);
  const std::size_t P = pl.plane();
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t flat = 0; flat < pl.valid.size(); ++flat) {
    if (!pl.valid[flat]) continue;
    const int t = pl.hard[flat];
    if (t < 0 || t >= K) throw ArgumentError("ohem_ce: target class out of range");
    cand.emplace_back(static_cast<double>(probs[(flat / P) * K * P + static_cast<std::size_t>(t) * P + flat % P]), flat);
  }
  std::sort(cand.begin(), cand.end());
  std::vector<std::size_t> kept;
  for (std::size_t r = 0; r < cand.size(); ++r)
    if (cand[r].first < thresh || thresh >= 1.0 || r < static_cast<std::size_t>(min_kept)) kept.push_back(cand[r].second);
  std::sort(kept.begin(), kept.end());
  return detail::ce_over(logits, pl, kept, want_grad, "ohem_ce");
}

}  // namespace semiseg
