#include "semiseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <json.hpp>

namespace semiseg {
namespace {

using nlohmann::json;

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

void check_image(const ImageTensor& image, const char* who) {
  if (image.rank() != 3 || image.dim(1) < 1 || image.dim(2) < 1)
    throw ArgumentError(std::string(who) + ": image must be C x H x W with H, W >= 1");
}

json rect_json(const Rect& r) { return json::array({r.x, r.y, r.w, r.h}); }
Rect rect_from(const json& j) { return Rect{j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()}; }

// Grayscale luminance of channel triple starting at `c0`.
double luma(const ImageTensor& im, int c0, int y, int x) {
  return 0.299 * im(c0, y, x) + 0.587 * im(c0 + 1, y, x) + 0.114 * im(c0 + 2, y, x);
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r)
    h = std::fmod((g - b) / d, 6.0);
  else if (mx == g)
    h = (b - r) / d + 2.0;
  else
    h = (r - g) / d + 4.0;
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double hh = h * 6.0;
  const int i = static_cast<int>(std::floor(hh)) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

void apply_brightness(ImageTensor& im, double f) {
  for (auto& v : im.values()) v = clamp01(v * f);
}

void apply_contrast(ImageTensor& im, double f) {
  const int C = im.dim(0), H = im.dim(1), W = im.dim(2);
  const int group = C % 3 == 0 ? 3 : 1;
  for (int c0 = 0; c0 < C; c0 += group) {
    double mean = 0.0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) mean += group == 3 ? luma(im, c0, y, x) : im(c0, y, x);
    mean /= static_cast<double>(H) * W;
    for (int c = c0; c < c0 + group; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) im(c, y, x) = clamp01(f * im(c, y, x) + (1.0 - f) * mean);
  }
}

void apply_saturation(ImageTensor& im, double f) {
  const int C = im.dim(0), H = im.dim(1), W = im.dim(2);
  if (C % 3 != 0) return;
  for (int c0 = 0; c0 < C; c0 += 3)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double g = luma(im, c0, y, x);
        for (int c = c0; c < c0 + 3; ++c) im(c, y, x) = clamp01(f * im(c, y, x) + (1.0 - f) * g);
      }
}

void apply_hue(ImageTensor& im, double shift) {
  const int C = im.dim(0), H = im.dim(1), W = im.dim(2);
  if (C % 3 != 0) return;
  for (int c0 = 0; c0 < C; c0 += 3)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double h, s, v, r, g, b;
        rgb_to_hsv(im(c0, y, x), im(c0 + 1, y, x), im(c0 + 2, y, x), h, s, v);
        h = std::fmod(h + shift + 1.0, 1.0);
        hsv_to_rgb(h, s, v, r, g, b);
        im(c0, y, x) = clamp01(r);
        im(c0 + 1, y, x) = clamp01(g);
        im(c0 + 2, y, x) = clamp01(b);
      }
}

void apply_op(ImageTensor& im, const ColorOp& op) {
  if (op.name == "brightness")
    apply_brightness(im, op.magnitude);
  else if (op.name == "contrast")
    apply_contrast(im, op.magnitude);
  else if (op.name == "saturation")
    apply_saturation(im, op.magnitude);
  else if (op.name == "hue")
    apply_hue(im, op.magnitude);
  else if (op.name == "grayscale")
    im = to_grayscale(im);
  else if (op.name == "blur")
    im = gaussian_blur(im, op.magnitude);
  else
    throw ArgumentError("unknown color op '" + op.name + "'");
}

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment: ") + name + " must lie in [0, 1]");
}

}  // namespace

void AugPipelineConfig::validate() const {
  if (train_size <= 0) throw ConfigError("augment: train_size must be positive");
  if (!(scale_min > 0.0 && scale_max >= scale_min)) throw ConfigError("augment: scale range must satisfy 0 < min <= max");
  check_prob(hflip_prob, "hflip_prob");
  check_prob(jitter_prob, "jitter_prob");
  check_prob(grayscale_prob, "grayscale_prob");
  check_prob(blur_prob, "blur_prob");
  check_prob(cutmix_prob, "cutmix_prob");
  if (jitter.brightness < 0 || jitter.contrast < 0 || jitter.saturation < 0 || jitter.hue < 0 || jitter.hue > 0.5)
    throw ConfigError("augment: jitter magnitudes must be >= 0 (hue <= 0.5)");
  if (!(blur_sigma_min > 0.0 && blur_sigma_max >= blur_sigma_min)) throw ConfigError("augment: bad blur sigma range");
  if (!(cutmix_area_min >= 0.0 && cutmix_area_max <= 1.0 && cutmix_area_min <= cutmix_area_max))
    throw ConfigError("augment: cutmix area range must lie in [0, 1]");
}

std::string to_string(const AugRecord& rec) {
  json j;
  j["scale"] = rec.scale;
  j["resized"] = json::array({rec.resized_h, rec.resized_w});
  j["crop_box"] = rect_json(rec.crop_box);
  j["hflip"] = rec.hflip;
  json ops = json::array();
  for (const auto& op : rec.color_ops) ops.push_back(json::array({op.name, op.magnitude}));
  j["color_ops"] = ops;
  j["cutmix_box"] = rec.cutmix_box ? rect_json(*rec.cutmix_box) : json(nullptr);
  j["cutmix_partner"] = rec.cutmix_partner ? json(*rec.cutmix_partner) : json(nullptr);
  j["cutmix_skipped"] = rec.cutmix_skipped;
  return j.dump();
}

AugRecord aug_record_from_string(const std::string& line) {
  try {
    const json j = json::parse(line);
    AugRecord rec;
    rec.scale = j.at("scale").get<double>();
    rec.resized_h = j.at("resized").at(0).get<int>();
    rec.resized_w = j.at("resized").at(1).get<int>();
    rec.crop_box = rect_from(j.at("crop_box"));
    rec.hflip = j.at("hflip").get<bool>();
    for (const auto& op : j.at("color_ops")) rec.color_ops.push_back({op.at(0).get<std::string>(), op.at(1).get<double>()});
    if (!j.at("cutmix_box").is_null()) rec.cutmix_box = rect_from(j.at("cutmix_box"));
    if (!j.at("cutmix_partner").is_null()) rec.cutmix_partner = j.at("cutmix_partner").get<int>();
    rec.cutmix_skipped = j.value("cutmix_skipped", false);
    return rec;
  } catch (const json::exception& e) {
    throw IoError(std::string("AugRecord parse error: ") + e.what());
  }
}

ImageTensor resize_bilinear(const ImageTensor& image, int out_h, int out_w) {
  check_image(image, "resize_bilinear");
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (out_h == H && out_w == W) return image;
  ImageTensor out({C, out_h, out_w});
  const double sy = static_cast<double>(H) / out_h;
  const double sx = static_cast<double>(W) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), H - 1);
    const int y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), W - 1);
      const int x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - x0;
      for (int c = 0; c < C; ++c) {
        const double top = image(c, y0, x0) * (1.0 - wx) + image(c, y0, x1) * wx;
        const double bot = image(c, y1, x0) * (1.0 - wx) + image(c, y1, x1) * wx;
        out(c, y, x) = static_cast<float>(top * (1.0 - wy) + bot * wy);
      }
    }
  }
  return out;
}

LabelMask resize_nearest(const LabelMask& mask, int out_h, int out_w) {
  if (out_h == mask.height && out_w == mask.width) return mask;
  LabelMask out(out_h, out_w, 0, mask.ignore_index);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(static_cast<int>(std::floor((y + 0.5) * mask.height / out_h)), mask.height - 1);
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(static_cast<int>(std::floor((x + 0.5) * mask.width / out_w)), mask.width - 1);
      out.at(y, x) = mask.at(sy, sx);
    }
  }
  return out;
}

ImageTensor to_grayscale(const ImageTensor& image) {
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (C % 3 != 0) return image;
  ImageTensor out(image.shape());
  for (int c0 = 0; c0 < C; c0 += 3)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const float g = clamp01(luma(image, c0, y, x));
        out(c0, y, x) = out(c0 + 1, y, x) = out(c0 + 2, y, x) = g;
      }
  return out;
}

ImageTensor gaussian_blur(const ImageTensor& image, double sigma) {
  if (sigma <= 0.0) return image;
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
    return i;
  };
  ImageTensor tmp(image.shape()), out(image.shape());
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * image(c, y, reflect(x + i, W));
        tmp(c, y, x) = static_cast<float>(acc);
      }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp(c, reflect(y + i, H), x);
        out(c, y, x) = clamp01(acc);
      }
  }
  return out;
}

WeakResult replay_weak(const ImageTensor& image, const std::optional<LabelMask>& mask, const AugRecord& rec) {
  check_image(image, "replay_weak");
  const int C = image.dim(0);
  if (mask && (mask->height != image.dim(1) || mask->width != image.dim(2)))
    throw ArgumentError("replay_weak: mask and image differ in size");
  const ImageTensor resized = resize_bilinear(image, rec.resized_h, rec.resized_w);
  std::optional<LabelMask> rmask;
  if (mask) rmask = resize_nearest(*mask, rec.resized_h, rec.resized_w);

  const Rect& b = rec.crop_box;
  WeakResult out;
  out.record = rec;
  out.image = ImageTensor({C, b.h, b.w});
  if (rmask) out.mask = LabelMask(b.h, b.w, rmask->ignore_index, rmask->ignore_index);
  for (int y = 0; y < b.h; ++y)
    for (int x = 0; x < b.w; ++x) {
      const int dx = rec.hflip ? b.w - 1 - x : x;
      const int sy = b.y + y, sx = b.x + x;
      // outside the resized extent is padding
      if (sy >= rec.resized_h || sx >= rec.resized_w) continue;
      for (int c = 0; c < C; ++c) out.image(c, y, dx) = resized(c, sy, sx);
      if (rmask) out.mask->at(y, dx) = rmask->at(sy, sx);
    }
  return out;
}

WeakResult weak_augment(const ImageTensor& image, const std::optional<LabelMask>& mask, const AugPipelineConfig& cfg,
                        Rng& rng) {
  cfg.validate();
  check_image(image, "weak_augment");
  const int H = image.dim(1), W = image.dim(2);
  AugRecord rec;
  rec.scale = cfg.scale_min == cfg.scale_max ? cfg.scale_min : rng.uniform(cfg.scale_min, cfg.scale_max);
  rec.resized_h = std::max(1, static_cast<int>(std::lround(H * rec.scale)));
  rec.resized_w = std::max(1, static_cast<int>(std::lround(W * rec.scale)));
  const int padded_h = std::max(rec.resized_h, cfg.train_size);
  const int padded_w = std::max(rec.resized_w, cfg.train_size);
  rec.crop_box = Rect{rng.uniform_int(0, padded_w - cfg.train_size), rng.uniform_int(0, padded_h - cfg.train_size),
                      cfg.train_size, cfg.train_size};
  rec.hflip = rng.bernoulli(cfg.hflip_prob);
  return replay_weak(image, mask, rec);
}

ImageTensor replay_color(const ImageTensor& image, const std::vector<ColorOp>& ops) {
  ImageTensor out = image;
  for (const auto& op : ops) apply_op(out, op);
  return out;
}

std::pair<ImageTensor, AugRecord> strong_color(const ImageTensor& image, const AugPipelineConfig& cfg, Rng& rng) {
  cfg.validate();
  check_image(image, "strong_color");
  AugRecord rec;
  rec.resized_h = image.dim(1);
  rec.resized_w = image.dim(2);
  rec.crop_box = Rect{0, 0, image.dim(2), image.dim(1)};
  if (!cfg.strong_enabled) return {image, rec};

  if (rng.bernoulli(cfg.jitter_prob)) {
    std::vector<int> order{0, 1, 2, 3};
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (int which : order) {
      switch (which) {
        case 0:
          if (cfg.jitter.brightness > 0)
            rec.color_ops.push_back(
                {"brightness", rng.uniform(std::max(0.0, 1.0 - cfg.jitter.brightness), 1.0 + cfg.jitter.brightness)});
          break;
        case 1:
          if (cfg.jitter.contrast > 0)
            rec.color_ops.push_back(
                {"contrast", rng.uniform(std::max(0.0, 1.0 - cfg.jitter.contrast), 1.0 + cfg.jitter.contrast)});
          break;
        case 2:
          if (cfg.jitter.saturation > 0)
            rec.color_ops.push_back(
                {"saturation", rng.uniform(std::max(0.0, 1.0 - cfg.jitter.saturation), 1.0 + cfg.jitter.saturation)});
          break;
        default:
          if (cfg.jitter.hue > 0) rec.color_ops.push_back({"hue", rng.uniform(-cfg.jitter.hue, cfg.jitter.hue)});
          break;
      }
    }
  }
  if (rng.bernoulli(cfg.grayscale_prob)) rec.color_ops.push_back({"grayscale", 1.0});
  if (rng.bernoulli(cfg.blur_prob)) rec.color_ops.push_back({"blur", rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max)});
  return {replay_color(image, rec.color_ops), rec};
}

Rect sample_cutmix_box(int height, int width, double area_min, double area_max, Rng& rng) {
  const double area = rng.uniform(area_min, area_max) * height * width;
  const double aspect = rng.uniform(0.3, 1.0 / 0.3);
  const int bw = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, width);
  const int bh = std::clamp(static_cast<int>(std::lround(std::sqrt(area / aspect))), 1, height);
  const int x = rng.uniform_int(0, width - bw);
  const int y = rng.uniform_int(0, height - bh);
  return Rect{x, y, bw, bh};
}

void paste_box(ImageTensor& dst, const ImageTensor& src, const Rect& box) {
  if (!dst.same_shape(src)) throw ArgumentError("paste_box: shape mismatch");
  for (int c = 0; c < dst.dim(0); ++c)
    for (int y = box.y; y < box.y + box.h; ++y)
      for (int x = box.x; x < box.x + box.w; ++x) dst(c, y, x) = src(c, y, x);
}

CutMixResult cutmix_batch(const std::vector<ImageTensor>& images, const std::vector<LabelMask>& masks, double prob,
                          Rng& rng, double area_min, double area_max) {
  if (!masks.empty() && masks.size() != images.size()) throw ArgumentError("cutmix_batch: images/masks size mismatch");
  const std::size_t B = images.size();
  CutMixResult out{images, masks, std::vector<AugRecord>(B)};
  for (std::size_t i = 0; i < B; ++i) {
    check_image(images[i], "cutmix_batch");
    if (!images[i].same_shape(images[0])) throw ArgumentError("cutmix_batch: images differ in shape");
    out.records[i].resized_h = images[i].dim(1);
    out.records[i].resized_w = images[i].dim(2);
    out.records[i].crop_box = Rect{0, 0, images[i].dim(2), images[i].dim(1)};
  }
  for (std::size_t i = 0; i < B; ++i) {
    if (!rng.bernoulli(prob)) continue;
    if (B < 2) {
      out.records[i].cutmix_skipped = true;
      continue;
    }
    const int H = images[i].dim(1), W = images[i].dim(2);
    const Rect box = sample_cutmix_box(H, W, area_min, area_max, rng);
    const std::size_t j = (i + 1) % B;
    paste_box(out.images[i], images[j], box);
    if (!masks.empty()) paste_box(out.masks[i].data, masks[j].data, W, box);
    out.records[i].cutmix_box = box;
    out.records[i].cutmix_partner = static_cast<int>(j);
  }
  return out;
}

std::vector<StrongView> sample_strong_views(const ImageTensor& weak_image, int n_views, const AugPipelineConfig& cfg,
                                            Rng& rng) {
  if (n_views <= 0) throw ArgumentError("sample_strong_views: n_views must be >= 1");
  std::vector<StrongView> views;
  views.reserve(static_cast<std::size_t>(n_views));
  for (int v = 0; v < n_views; ++v) {
    auto [img, rec] = strong_color(weak_image, cfg, rng);
    views.push_back({std::move(img), std::move(rec)});
  }
  return views;
}

}  // namespace semiseg
