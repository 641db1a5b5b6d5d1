#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "semiseg/eval.hpp"

using namespace semiseg;

namespace {

SegModel<float> small_model(std::uint64_t seed) {
  TinyNetConfig l;
  l.encoder_widths = {6, 8};
  l.encoder_strides = {2, 1};
  l.decoder_width = 8;
  Rng rng(seed);
  return make_tiny_segnet<float>(l, rng);
}

}  // namespace

TEST_CASE("binary confusion matrix gives the hand-computed mean IoU") {
  const ConfusionMatrix cm(2, {50, 10, 20, 20});
  const auto s = miou(cm);
  CHECK(s.per_class[0] == doctest::Approx(50.0 / 80.0));
  CHECK(s.per_class[1] == doctest::Approx(20.0 / 50.0));
  CHECK(s.mean == doctest::Approx(0.5125).epsilon(1e-12));
  CHECK(pixel_accuracy(cm) == doctest::Approx(0.7));
}

TEST_CASE("confusion counts on hand-set 3x3 masks") {
  LabelMask gt(3, 3), pred(3, 3);
  gt.data = {0, 0, 1, 1, 2, 2, 0, 1, 255};
  pred.data = {0, 1, 1, 1, 2, 0, 0, 2, 2};
  ConfusionMatrix cm(3);
  confusion_update(cm, pred, gt);
  // gt 0: pred 0,1,0   gt 1: pred 1,1,2   gt 2: pred 2,0   ignored: 1 pixel
  CHECK(cm == ConfusionMatrix(3, {2, 1, 0, 0, 2, 1, 1, 0, 1}));
  CHECK(cm.total() == 8);
}

TEST_CASE("perfect and disjoint predictions") {
  LabelMask gt(4, 4, 0);
  for (int i = 0; i < 8; ++i) gt.data[i] = 1;
  ConfusionMatrix perfect(2), wrong(2);
  confusion_update(perfect, gt, gt);
  CHECK(miou(perfect).mean == 1.0);
  LabelMask flipped = gt;
  for (auto& v : flipped.data) v = 1 - v;
  confusion_update(wrong, flipped, gt);
  CHECK(miou(wrong).mean == 0.0);
}

TEST_CASE("change detection metrics") {
  // 10% changed pixels, predicted as unchanged everywhere
  const ConfusionMatrix cm(2, {90, 0, 10, 0});
  const auto cd = cd_metrics(cm);
  CHECK(cd.overall_accuracy == doctest::Approx(0.9));
  CHECK(cd.changed_iou == 0.0);
  const auto good = cd_metrics(ConfusionMatrix(2, {85, 5, 2, 8}));
  CHECK(good.changed_iou == doctest::Approx(8.0 / 15.0));
  CHECK_THROWS_AS(cd_metrics(ConfusionMatrix(3)), ArgumentError);
}

TEST_CASE("dice from tp, fp and fn counts") {
  const ConfusionMatrix cm(2, {40, 10, 20, 30});  // class 1: tp 30, fp 10, fn 20
  const auto d = dice(cm);
  CHECK(d.per_class[1] == doctest::Approx(2.0 / 3.0));
  CHECK(d.mean == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("classes absent from ground truth and prediction are excluded") {
  const ConfusionMatrix cm(3, {5, 1, 0, 2, 4, 0, 0, 0, 0});
  const auto s = miou(cm);
  CHECK(std::isnan(s.per_class[2]));
  CHECK(s.mean == doctest::Approx((5.0 / 8.0 + 4.0 / 7.0) / 2.0));
  CHECK_THROWS_AS(miou(ConfusionMatrix(3)), UndefinedMetricError);
  CHECK_THROWS_AS(dice(ConfusionMatrix(2)), UndefinedMetricError);
}

TEST_CASE("confusion matrices add up over shards and ignore masked pixels") {
  Rng rng(2);
  ConfusionMatrix whole(4), a(4), b(4);
  for (int i = 0; i < 6; ++i) {
    auto gt = testutil::random_mask(5, 5, 4, rng);
    gt.data[0] = gt.ignore_index;
    const auto pred = testutil::random_mask(5, 5, 4, rng);
    confusion_update(whole, pred, gt);
    confusion_update(i % 2 ? a : b, pred, gt);
  }
  a += b;
  CHECK(a == whole);
  CHECK(whole.total() == 6 * 24);
  LabelMask bad(5, 5, 7);
  CHECK_THROWS(confusion_update(whole, bad, bad));
  CHECK_THROWS_AS(confusion_update(whole, LabelMask(4, 4), LabelMask(5, 5)), ArgumentError);
}

TEST_CASE("mean IoU is invariant to relabeling classes") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    ConfusionMatrix cm(3), perm(3);
    const int p[3] = {2, 0, 1};
    for (int i = 0; i < 200; ++i) {
      const int g = rng.uniform_int(0, 2), q = rng.uniform_int(0, 2);
      cm.add(g, q);
      perm.add(p[g], p[q]);
    }
    CHECK(miou(cm).mean == doctest::Approx(miou(perm).mean).epsilon(1e-12));
  }
}

TEST_CASE("sliding window with a window covering the image equals plain prediction") {
  const auto model = small_model(1);
  Rng rng(4);
  const auto img = testutil::random_image(3, 12, 20, rng);
  const auto whole = model.predict(stack<float>(std::span<const ImageTensor>(&img, 1)));
  CHECK(sliding_window_predict(model, img, 20, 7) == whole);
  CHECK(sliding_window_predict(model, img, 512, 341) == whole);
  CHECK_THROWS_AS(sliding_window_predict(model, img, 4, 8), ArgumentError);
  CHECK_THROWS_AS(sliding_window_predict(model, img, 4, 0), ArgumentError);
}

TEST_CASE("sliding window output is a distribution per pixel") {
  const auto model = small_model(2);
  Rng rng(5);
  const auto img = testutil::random_image(3, 19, 23, rng);
  const auto p = sliding_window_predict(model, img, 8, 5);
  CHECK(p.shape() == std::vector<int>{1, 3, 19, 23});
  for (int y = 0; y < 19; ++y)
    for (int x = 0; x < 23; ++x) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += p(0, k, y, x);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("two overlapping windows are averaged where they overlap") {
  const auto model = small_model(3);
  Rng rng(6);
  const auto img = testutil::random_image(3, 8, 12, rng);
  auto crop = [&](int x0) {
    ImageTensor c({3, 8, 8});
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) c(ch, y, x) = img(ch, y, x0 + x);
    return model.predict(stack<float>(std::span<const ImageTensor>(&c, 1)));
  };
  const auto left = crop(0), right = crop(4);
  const auto p = sliding_window_predict(model, img, 8, 6);  // starts 0 and 4 (clamped)
  for (int k = 0; k < 3; ++k)
    for (int y = 0; y < 8; ++y) {
      CHECK(p(0, k, y, 1) == doctest::Approx(left(0, k, y, 1)).epsilon(1e-5));
      CHECK(p(0, k, y, 10) == doctest::Approx(right(0, k, y, 6)).epsilon(1e-5));
      double sum = 0.0, mixed = 0.5 * (left(0, k, y, 6) + right(0, k, y, 2));
      for (int j = 0; j < 3; ++j) sum += 0.5 * (left(0, j, y, 6) + right(0, j, y, 2));
      CHECK(p(0, k, y, 6) == doctest::Approx(mixed / sum).epsilon(1e-5));
    }
}

TEST_CASE("evaluation report lists every class") {
  const auto model = small_model(4);
  Rng rng(7);
  std::vector<ImageTensor> imgs{testutil::random_image(3, 16, 16, rng), testutil::random_image(3, 16, 16, rng)};
  std::vector<LabelMask> masks{testutil::random_mask(16, 16, 3, rng), testutil::random_mask(16, 16, 3, rng)};
  const auto r = evaluate(model, imgs, masks);
  CHECK(r.cm.total() == 512);
  CHECK(evaluate(model, imgs, masks, 16, 8).cm == r.cm);
  const auto path = std::filesystem::temp_directory_path() / "semiseg_unit_report.json";
  write_eval_report(path, r, R"({"checkpoint":"x"})");
  std::ifstream is(path);
  const auto j = nlohmann::json::parse(is);
  CHECK(j.at("per_class").size() == 3);
  CHECK(j.at("mean_iou").get<double>() == doctest::Approx(r.iou.mean));
  CHECK(j.at("meta").at("checkpoint") == "x");
  CHECK(j.at("confusion_matrix").size() == 3);
}
