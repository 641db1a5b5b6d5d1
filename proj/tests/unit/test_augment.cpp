#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "helpers.hpp"
#include "semiseg/augment.hpp"

using namespace semiseg;

namespace {

// Half-pixel bilinear sample with edge clamping, evaluated point by point.
double bilinear_at(const ImageTensor& im, int c, double fy, double fx) {
  const int H = im.dim(1), W = im.dim(2);
  fy = std::clamp(fy, 0.0, static_cast<double>(H - 1));
  fx = std::clamp(fx, 0.0, static_cast<double>(W - 1));
  const int y0 = static_cast<int>(std::floor(fy)), x0 = static_cast<int>(std::floor(fx));
  const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  const double wy = fy - y0, wx = fx - x0;
  return (1 - wy) * ((1 - wx) * im(c, y0, x0) + wx * im(c, y0, x1)) + wy * ((1 - wx) * im(c, y1, x0) + wx * im(c, y1, x1));
}

AugPipelineConfig quiet_color() {
  AugPipelineConfig cfg;
  cfg.jitter = {0, 0, 0, 0};
  cfg.blur_prob = 0;
  cfg.grayscale_prob = 0;
  return cfg;
}

}  // namespace

TEST_CASE("weak_augment at scale 1 with full crop and no flip is the identity") {
  Rng rng(1);
  const ImageTensor im = testutil::random_image(3, 16, 16, rng);
  const LabelMask m = testutil::random_mask(16, 16, 3, rng);
  AugPipelineConfig cfg;
  cfg.train_size = 16;
  cfg.scale_min = cfg.scale_max = 1.0;
  cfg.hflip_prob = 0.0;
  const auto r = weak_augment(im, m, cfg, rng);
  CHECK(r.image == im);
  CHECK(*r.mask == m);
  CHECK(r.record.crop_box == Rect{0, 0, 16, 16});
}

TEST_CASE("scale 2 upper-left crop matches a per-pixel bilinear oracle") {
  Rng rng(2);
  const ImageTensor im = testutil::random_image(3, 4, 4, rng);
  AugRecord rec;
  rec.scale = 2.0;
  rec.resized_h = rec.resized_w = 8;
  rec.crop_box = Rect{0, 0, 4, 4};
  const auto r = replay_weak(im, std::nullopt, rec);
  REQUIRE(r.image.shape() == std::vector<int>{3, 4, 4});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        const double expect = bilinear_at(im, c, (y + 0.5) / 2.0 - 0.5, (x + 0.5) / 2.0 - 0.5);
        CHECK(r.image(c, y, x) == doctest::Approx(expect).epsilon(1e-6));
      }
}

TEST_CASE("weak_augment keeps mask values within the input classes plus ignore") {
  Rng rng(3);
  AugPipelineConfig cfg;
  cfg.train_size = 24;
  for (int trial = 0; trial < 50; ++trial) {
    const ImageTensor im = testutil::random_image(3, 20, 17, rng);
    const LabelMask m = testutil::random_mask(20, 17, 2, rng);
    const auto r = weak_augment(im, m, cfg, rng);
    CHECK(r.image.shape() == std::vector<int>{3, 24, 24});
    for (auto v : r.mask->data) CHECK((v == 0 || v == 1 || v == kDefaultIgnoreIndex));
    const Rect& b = r.record.crop_box;
    CHECK(b.x >= 0);
    CHECK(b.y >= 0);
    CHECK(b.x + b.w <= std::max(r.record.resized_w, cfg.train_size));
    CHECK(b.y + b.h <= std::max(r.record.resized_h, cfg.train_size));
    CHECK(r.record.scale >= 0.5);
    CHECK(r.record.scale <= 2.0);
  }
}

TEST_CASE("padding is zero in the image and ignore in the mask") {
  Rng rng(4);
  const ImageTensor im = testutil::random_image(3, 8, 8, rng);
  const LabelMask m(8, 8, 1);
  AugRecord rec;
  rec.resized_h = rec.resized_w = 8;
  rec.crop_box = Rect{0, 0, 12, 12};
  const auto r = replay_weak(im, m, rec);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) {
      const bool inside = y < 8 && x < 8;
      CHECK(r.mask->at(y, x) == (inside ? 1 : kDefaultIgnoreIndex));
      if (!inside)
        for (int c = 0; c < 3; ++c) CHECK(r.image(c, y, x) == 0.0f);
    }
}

TEST_CASE("horizontal flip mirrors image and mask together") {
  Rng rng(5);
  const ImageTensor im = testutil::random_image(3, 6, 6, rng);
  const LabelMask m = testutil::random_mask(6, 6, 4, rng);
  AugRecord rec;
  rec.resized_h = rec.resized_w = 6;
  rec.crop_box = Rect{0, 0, 6, 6};
  rec.hflip = true;
  const auto r = replay_weak(im, m, rec);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) {
      CHECK(r.mask->at(y, x) == m.at(y, 5 - x));
      CHECK(r.image(1, y, x) == im(1, y, 5 - x));
    }
}

TEST_CASE("weak augmentation replays bit-exactly from its record") {
  Rng rng(6);
  const ImageTensor im = testutil::random_image(3, 20, 30, rng);
  const LabelMask m = testutil::random_mask(20, 30, 3, rng);
  AugPipelineConfig cfg;
  cfg.train_size = 16;
  for (int i = 0; i < 20; ++i) {
    const auto r = weak_augment(im, m, cfg, rng);
    const auto again = replay_weak(im, m, aug_record_from_string(to_string(r.record)));
    CHECK(again.image == r.image);
    CHECK(*again.mask == *r.mask);
  }
}

TEST_CASE("weak_augment rejects a non-positive train size") {
  Rng rng(7);
  AugPipelineConfig cfg;
  cfg.train_size = 0;
  CHECK_THROWS_AS(weak_augment(testutil::random_image(3, 4, 4, rng), std::nullopt, cfg, rng), ConfigError);
}

TEST_CASE("strong_color with zero magnitudes and no blur or grayscale is the identity") {
  Rng rng(8);
  const ImageTensor im = testutil::random_image(3, 9, 9, rng);
  for (int i = 0; i < 10; ++i) {
    auto [out, rec] = strong_color(im, quiet_color(), rng);
    CHECK(out == im);
    CHECK(rec.color_ops.empty());
  }
}

TEST_CASE("grayscale makes the three channels equal") {
  Rng rng(9);
  AugPipelineConfig cfg = quiet_color();
  cfg.grayscale_prob = 1.0;
  auto [out, rec] = strong_color(testutil::random_image(3, 7, 7, rng), cfg, rng);
  REQUIRE(rec.color_ops.size() == 1);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) {
      CHECK(out(0, y, x) == out(1, y, x));
      CHECK(out(1, y, x) == out(2, y, x));
    }
}

TEST_CASE("brightness equals scalar multiplication by the recorded factor") {
  Rng rng(10);
  AugPipelineConfig cfg = quiet_color();
  cfg.jitter.brightness = 0.5;
  cfg.jitter_prob = 1.0;
  // keep values low so the factor never saturates
  const ImageTensor im = [&] {
    ImageTensor t({3, 5, 5});
    for (auto& v : t.values()) v = static_cast<float>(rng.uniform(0.0, 0.6));
    return t;
  }();
  auto [out, rec] = strong_color(im, cfg, rng);
  REQUIRE(rec.color_ops.size() == 1);
  CHECK(rec.color_ops[0].name == "brightness");
  const double f = rec.color_ops[0].magnitude;
  CHECK(f >= 0.5);
  CHECK(f <= 1.5);
  for (std::size_t i = 0; i < im.size(); ++i) CHECK(out[i] == static_cast<float>(static_cast<double>(im[i]) * f));
}

TEST_CASE("strong_color keeps geometry and replays from its record") {
  Rng rng(11);
  AugPipelineConfig cfg;
  const ImageTensor im = testutil::random_image(3, 12, 10, rng);
  for (int i = 0; i < 20; ++i) {
    auto [out, rec] = strong_color(im, cfg, rng);
    CHECK(out.shape() == im.shape());
    for (auto v : out.values()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    CHECK(replay_color(im, aug_record_from_string(to_string(rec)).color_ops) == out);
  }
}

TEST_CASE("strong_color is the identity when strong perturbation is disabled") {
  Rng rng(12);
  AugPipelineConfig cfg;
  cfg.strong_enabled = false;
  const ImageTensor im = testutil::random_image(3, 8, 8, rng);
  CHECK(strong_color(im, cfg, rng).first == im);
}

TEST_CASE("paste_box with the whole image yields the partner, an empty box the original") {
  Rng rng(13);
  const ImageTensor a = testutil::random_image(3, 4, 4, rng), b = testutil::random_image(3, 4, 4, rng);
  ImageTensor whole = a, none = a;
  paste_box(whole, b, Rect{0, 0, 4, 4});
  paste_box(none, b, Rect{1, 1, 0, 0});
  CHECK(whole == b);
  CHECK(none == a);
}

TEST_CASE("cutmix box (1,1,3,3) on 4x4: per-pixel provenance") {
  Rng rng(14);
  const ImageTensor a = testutil::random_image(3, 4, 4, rng), b = testutil::random_image(3, 4, 4, rng);
  LabelMask ma(4, 4, 0), mb(4, 4, 1);
  const Rect box{1, 1, 3, 3};
  ImageTensor out = a;
  LabelMask mo = ma;
  paste_box(out, b, box);
  paste_box(mo.data, mb.data, 4, box);
  int from_partner = 0;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const bool in = x >= 1 && x < 4 && y >= 1 && y < 4;
      for (int c = 0; c < 3; ++c) CHECK(out(c, y, x) == (in ? b(c, y, x) : a(c, y, x)));
      CHECK(mo.at(y, x) == (in ? 1 : 0));
      from_partner += in;
    }
  CHECK(from_partner == box.area());
}

TEST_CASE("cutmix_batch conserves pixels: partner pixels equal the recorded box area") {
  Rng rng(15);
  for (int trial = 0; trial < 30; ++trial) {
    const int B = 2 + trial % 3;
    std::vector<ImageTensor> ims;
    std::vector<LabelMask> ms;
    for (int i = 0; i < B; ++i) {
      // distinct constant images make provenance unambiguous
      ims.emplace_back(std::vector<int>{3, 10, 12}, static_cast<float>(i + 1) / 10.0f);
      ms.emplace_back(10, 12, i);
    }
    const auto mix = cutmix_batch(ims, ms, 0.7, rng);
    for (int i = 0; i < B; ++i) {
      const auto& rec = mix.records[i];
      int img_partner = 0, mask_partner = 0;
      for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 12; ++x) {
          const float v = mix.images[i](0, y, x);
          const bool own = v == ims[i](0, y, x);
          const bool partner = rec.cutmix_partner && v == ims[*rec.cutmix_partner](0, y, x);
          CHECK(own != partner);  // exactly one source
          img_partner += partner;
          mask_partner += rec.cutmix_partner && mix.masks[i].at(y, x) == *rec.cutmix_partner;
        }
      const int area = rec.cutmix_box ? rec.cutmix_box->area() : 0;
      CHECK(img_partner == area);
      CHECK(mask_partner == area);
      if (rec.cutmix_box) {
        CHECK(*rec.cutmix_partner == (i + 1) % B);
        CHECK(rec.cutmix_box->x + rec.cutmix_box->w <= 12);
        CHECK(rec.cutmix_box->y + rec.cutmix_box->h <= 10);
      }
      CHECK(mix.images[i].shape() == ims[i].shape());
    }
  }
}

TEST_CASE("cutmix on a single sample is skipped and recorded") {
  Rng rng(16);
  const std::vector<ImageTensor> one{testutil::random_image(3, 4, 4, rng)};
  const auto mix = cutmix_batch(one, {}, 1.0, rng);
  CHECK(mix.images[0] == one[0]);
  CHECK(mix.records[0].cutmix_skipped);
  CHECK_FALSE(mix.records[0].cutmix_box.has_value());
}

TEST_CASE("cutmix box area ratio stays within the configured range") {
  Rng rng(17);
  for (int i = 0; i < 500; ++i) {
    const Rect r = sample_cutmix_box(64, 64, 0.1, 0.5, rng);
    CHECK(r.x >= 0);
    CHECK(r.y >= 0);
    CHECK(r.x + r.w <= 64);
    CHECK(r.y + r.h <= 64);
    CHECK(r.area() > 0);
    CHECK(r.area() <= 64 * 64);
  }
}

TEST_CASE("sample_strong_views draws independent views") {
  Rng rng(18);
  AugPipelineConfig cfg;
  const ImageTensor weak = testutil::random_image(3, 16, 16, rng);
  int distinct = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto v = sample_strong_views(weak, 2, cfg, rng);
    REQUIRE(v.size() == 2);
    distinct += !(v[0].image == v[1].image);
  }
  CHECK(distinct >= 18);
  const auto seven = sample_strong_views(weak, 7, cfg, rng);
  CHECK(seven.size() == 7);
  std::set<std::string> recs;
  for (const auto& s : seven) recs.insert(to_string(s.record));
  CHECK(recs.size() > 1);
  CHECK_THROWS_AS(sample_strong_views(weak, 0, cfg, rng), ArgumentError);
}

TEST_CASE("one strong view equals a single strong_color pass from the same stream") {
  AugPipelineConfig cfg;
  Rng src(19);
  const ImageTensor weak = testutil::random_image(3, 16, 16, src);
  Rng a(20), b(20);
  CHECK(sample_strong_views(weak, 1, cfg, a)[0].image == strong_color(weak, cfg, b).first);
}

TEST_CASE("aug record text form round-trips") {
  AugRecord r;
  r.scale = 1.37;
  r.resized_h = 12;
  r.resized_w = 9;
  r.crop_box = {1, 2, 8, 8};
  r.hflip = true;
  r.color_ops = {{"hue", -0.12}, {"blur", 1.5}};
  r.cutmix_box = Rect{0, 1, 3, 4};
  r.cutmix_partner = 2;
  CHECK(aug_record_from_string(to_string(r)) == r);
  CHECK(to_string(r).find('\n') == std::string::npos);
}

TEST_CASE("augment config validation") {
  AugPipelineConfig c;
  c.blur_prob = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.scale_min = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
