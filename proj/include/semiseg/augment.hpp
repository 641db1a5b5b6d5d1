#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "semiseg/rng.hpp"
#include "semiseg/tensor.hpp"

namespace semiseg {

struct Rect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  [[nodiscard]] int area() const noexcept { return w * h; }
  [[nodiscard]] bool contains(int px, int py) const noexcept {
    return px >= x && px < x + w && py >= y && py < y + h;
  }
  friend bool operator==(const Rect&, const Rect&) = default;
};

struct ColorOp {
  std::string name;  // brightness | contrast | saturation | hue | grayscale | blur
  double magnitude = 0.0;
  friend bool operator==(const ColorOp&, const ColorOp&) = default;
};

/// Everything needed to replay one sample's augmentation bit-exactly.
struct AugRecord {
  double scale = 1.0;
  int resized_h = 0;  // image size after resizing, before padding
  int resized_w = 0;
  Rect crop_box;      // in padded/resized coordinates
  bool hflip = false;
  std::vector<ColorOp> color_ops;
  std::optional<Rect> cutmix_box;
  std::optional<int> cutmix_partner;
  bool cutmix_skipped = false;  // mixing requested but batch too small

  friend bool operator==(const AugRecord&, const AugRecord&) = default;
};

/// One line of JSON.
std::string to_string(const AugRecord& rec);
AugRecord aug_record_from_string(const std::string& line);

struct ColorJitter {
  double brightness = 0.5;
  double contrast = 0.5;
  double saturation = 0.5;
  double hue = 0.25;
};

struct AugPipelineConfig {
  int train_size = 64;
  double scale_min = 0.5;
  double scale_max = 2.0;
  double hflip_prob = 0.5;
  ColorJitter jitter;
  double jitter_prob = 0.8;
  double grayscale_prob = 0.2;
  double blur_prob = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
  double cutmix_prob = 0.5;
  double cutmix_area_min = 0.1;
  double cutmix_area_max = 0.5;
  /// When false the strong view is the weak view itself (no photometric ops,
  /// no CutMix).
  bool strong_enabled = true;

  void validate() const;
};

struct WeakResult {
  ImageTensor image;
  std::optional<LabelMask> mask;
  AugRecord record;
};

/// Random resize in [scale_min, scale_max], pad to at least train_size
/// (zeros / ignore_index), random train_size crop, random horizontal flip.
WeakResult weak_augment(const ImageTensor& image, const std::optional<LabelMask>& mask,
                        const AugPipelineConfig& cfg, Rng& rng);

/// Applies the geometric part of `rec` to image and mask.
WeakResult replay_weak(const ImageTensor& image, const std::optional<LabelMask>& mask, const AugRecord& rec);

/// Photometric part of the strong perturbation. Output geometry is unchanged.
std::pair<ImageTensor, AugRecord> strong_color(const ImageTensor& image, const AugPipelineConfig& cfg, Rng& rng);

/// Applies the recorded color ops in order.
ImageTensor replay_color(const ImageTensor& image, const std::vector<ColorOp>& ops);

struct CutMixResult {
  std::vector<ImageTensor> images;
  std::vector<LabelMask> masks;
  std::vector<AugRecord> records;
};

/// Pastes a random box from sample (i+1) mod B into sample i with
/// probability `prob`. Boxes are taken from the unmixed inputs. With fewer
/// than two samples nothing is mixed and the record says so.
CutMixResult cutmix_batch(const std::vector<ImageTensor>& images, const std::vector<LabelMask>& masks, double prob,
                          Rng& rng, double area_min = 0.1, double area_max = 0.5);

Rect sample_cutmix_box(int height, int width, double area_min, double area_max, Rng& rng);

/// Copies the `box` region of `src` into `dst` for any H x W plane stored
/// row-major (masks, validity planes).
template <typename V>
void paste_box(std::vector<V>& dst, const std::vector<V>& src, int width, const Rect& box) {
  for (int y = box.y; y < box.y + box.h; ++y)
    for (int x = box.x; x < box.x + box.w; ++x) {
      const auto i = static_cast<std::size_t>(y) * width + x;
      dst[i] = src[i];
    }
}

void paste_box(ImageTensor& dst, const ImageTensor& src, const Rect& box);

struct StrongView {
  ImageTensor image;
  AugRecord record;
};

/// n_views independent strong_color draws of the same weak view.
std::vector<StrongView> sample_strong_views(const ImageTensor& weak_image, int n_views, const AugPipelineConfig& cfg,
                                            Rng& rng);

// Resampling primitives, exposed for tests and the sliding-window code.
ImageTensor resize_bilinear(const ImageTensor& image, int out_h, int out_w);
LabelMask resize_nearest(const LabelMask& mask, int out_h, int out_w);
ImageTensor to_grayscale(const ImageTensor& image);
ImageTensor gaussian_blur(const ImageTensor& image, double sigma);

}  // namespace semiseg
