#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "semiseg/model.hpp"

namespace semiseg {

/// K x K counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);
  ConfusionMatrix(int num_classes, std::vector<std::uint64_t> counts);

  [[nodiscard]] int num_classes() const noexcept { return k_; }
  [[nodiscard]] std::uint64_t at(int gt, int pred) const { return counts_.at(static_cast<std::size_t>(gt) * k_ + pred); }
  [[nodiscard]] std::uint64_t total() const noexcept;
  [[nodiscard]] const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

  void add(int gt, int pred) { ++counts_[static_cast<std::size_t>(gt) * k_ + pred]; }

 private:
  int k_;
  std::vector<std::uint64_t> counts_;
};

/// Counts every pixel whose ground truth is not gt.ignore_index.
void confusion_update(ConfusionMatrix& cm, const LabelMask& pred, const LabelMask& gt);

struct ClassScores {
  std::vector<double> per_class;  // NaN where undefined (class absent from gt and prediction)
  double mean = 0.0;
};

/// IoU_k = tp / (tp + fp + fn), mean over classes with non-zero denominator.
ClassScores miou(const ConfusionMatrix& cm);
/// DSC_k = 2tp / (2tp + fp + fn), mean over foreground classes (k >= 1).
ClassScores dice(const ConfusionMatrix& cm);

struct ChangeScores {
  double changed_iou = 0.0;
  double overall_accuracy = 0.0;
};
ChangeScores cd_metrics(const ConfusionMatrix& cm);

double pixel_accuracy(const ConfusionMatrix& cm);

/// Per-pixel argmax of an N x K x H x W (or K x H x W) map; returns item n.
template <typename T>
LabelMask argmax_mask(const Tensor<T>& probs, int n = 0) {
  const int off = probs.rank() == 4 ? 1 : 0;
  const int K = probs.dim(off), H = probs.dim(off + 1), W = probs.dim(off + 2);
  const std::size_t P = static_cast<std::size_t>(H) * W;
  const T* p = probs.data() + static_cast<std::size_t>(n) * K * P;
  LabelMask m(H, W);
  for (std::size_t i = 0; i < P; ++i) {
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (p[k * P + i] > p[best * P + i]) best = k;
    m.data[i] = best;
  }
  return m;
}

/// Averages window probabilities over all placements (edge windows clamped
/// inside the image) and renormalizes per pixel. A window covering the whole
/// image is plain predict(). Returns 1 x K x H x W.
template <typename T>
Tensor<T> sliding_window_predict(const SegModel<T>& model, const ImageTensor& image, int window, int stride) {
  if (stride < 1 || window < stride) throw ArgumentError("sliding_window_predict: need window >= stride >= 1");
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const Tensor<T> whole = stack<T>(std::span<const ImageTensor>(&image, 1));
  if (window >= H && window >= W) return model.predict(whole);
  const int wh = std::min(window, H), ww = std::min(window, W);
  auto starts = [&](int extent, int win) {
    std::vector<int> s;
    for (int p = 0;; p += stride) {
      const int q = std::min(p, extent - win);
      if (s.empty() || s.back() != q) s.push_back(q);
      if (p + win >= extent) break;
    }
    return s;
  };
  const int K = model.num_classes();
  Tensor<T> acc({1, K, H, W});
  std::vector<int> hits(static_cast<std::size_t>(H) * W, 0);
  for (int y0 : starts(H, wh))
    for (int x0 : starts(W, ww)) {
      Tensor<T> crop({1, C, wh, ww});
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < wh; ++y)
          for (int x = 0; x < ww; ++x) crop(0, c, y, x) = static_cast<T>(image(c, y0 + y, x0 + x));
      const Tensor<T> p = model.predict(crop);
      for (int k = 0; k < K; ++k)
        for (int y = 0; y < wh; ++y)
          for (int x = 0; x < ww; ++x) acc(0, k, y0 + y, x0 + x) += p(0, k, y, x);
      for (int y = 0; y < wh; ++y)
        for (int x = 0; x < ww; ++x) ++hits[static_cast<std::size_t>(y0 + y) * W + x0 + x];
    }
  const std::size_t P = static_cast<std::size_t>(H) * W;
  for (std::size_t i = 0; i < P; ++i) {
    T sum{0};
    for (int k = 0; k < K; ++k) sum += acc[k * P + i] /= static_cast<T>(hits[i]);
    for (int k = 0; k < K; ++k) acc[k * P + i] /= sum;
  }
  return acc;
}

struct EvalResult {
  ConfusionMatrix cm;
  ClassScores iou;
  double accuracy = 0.0;
};

/// Whole-image (window <= 0) or sliding-window evaluation of a model.
EvalResult evaluate(const SegModel<float>& model, const std::vector<ImageTensor>& images,
                    const std::vector<LabelMask>& masks, int window = 0, int stride = 0);

/// JSON report: per-class IoU rows, mean IoU, accuracy, Dice and any metadata.
void write_eval_report(const std::filesystem::path& path, const EvalResult& result, const std::string& meta_json);

}  // namespace semiseg
