#include "semiseg/eval.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace semiseg {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : k_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 1) throw ArgumentError("ConfusionMatrix: need at least one class");
}

ConfusionMatrix::ConfusionMatrix(int num_classes, std::vector<std::uint64_t> counts)
    : k_(num_classes), counts_(std::move(counts)) {
  if (num_classes < 1 || counts_.size() != static_cast<std::size_t>(num_classes) * num_classes)
    throw ArgumentError("ConfusionMatrix: counts must be K x K");
}

std::uint64_t ConfusionMatrix::total() const noexcept {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  if (o.k_ != k_) throw ArgumentError("ConfusionMatrix: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
  return *this;
}

void confusion_update(ConfusionMatrix& cm, const LabelMask& pred, const LabelMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw ArgumentError("confusion_update: shape mismatch");
  const int K = cm.num_classes();
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int g = gt.data[i];
    if (g == gt.ignore_index) continue;
    const int p = pred.data[i];
    if (g < 0 || g >= K || p < 0 || p >= K)
      throw ArgumentError("confusion_update: class index out of range at pixel " + std::to_string(i));
    cm.add(g, p);
  }
}

namespace {

struct Tally {
  std::uint64_t tp, fp, fn;
};

Tally tally(const ConfusionMatrix& cm, int k) {
  Tally t{cm.at(k, k), 0, 0};
  for (int j = 0; j < cm.num_classes(); ++j) {
    if (j == k) continue;
    t.fp += cm.at(j, k);
    t.fn += cm.at(k, j);
  }
  return t;
}

ClassScores scores(const ConfusionMatrix& cm, int first_class, bool dice_form, const char* who) {
  if (cm.total() == 0) throw UndefinedMetricError(std::string(who) + ": empty confusion matrix");
  ClassScores out;
  out.per_class.assign(static_cast<std::size_t>(cm.num_classes()), std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int n = 0;
  for (int k = 0; k < cm.num_classes(); ++k) {
    const Tally t = tally(cm, k);
    const double num = dice_form ? 2.0 * t.tp : static_cast<double>(t.tp);
    const double den = num + static_cast<double>(t.fp + t.fn);
    if (den == 0.0) continue;
    out.per_class[k] = num / den;
    if (k >= first_class) {
      sum += out.per_class[k];
      ++n;
    }
  }
  out.mean = n ? sum / n : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace

ClassScores miou(const ConfusionMatrix& cm) { return scores(cm, 0, false, "miou"); }

ClassScores dice(const ConfusionMatrix& cm) { return scores(cm, cm.num_classes() > 1 ? 1 : 0, true, "dice"); }

double pixel_accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw UndefinedMetricError("pixel_accuracy: empty confusion matrix");
  std::uint64_t tr = 0;
  for (int k = 0; k < cm.num_classes(); ++k) tr += cm.at(k, k);
  return static_cast<double>(tr) / static_cast<double>(cm.total());
}

ChangeScores cd_metrics(const ConfusionMatrix& cm) {
  if (cm.num_classes() != 2) throw ArgumentError("cd_metrics: binary (K = 2) confusion matrix required");
  if (cm.total() == 0) throw UndefinedMetricError("cd_metrics: empty confusion matrix");
  const Tally t = tally(cm, 1);
  const double den = static_cast<double>(t.tp + t.fp + t.fn);
  return ChangeScores{den > 0 ? static_cast<double>(t.tp) / den : 0.0, pixel_accuracy(cm)};
}

EvalResult evaluate(const SegModel<float>& model, const std::vector<ImageTensor>& images,
                    const std::vector<LabelMask>& masks, int window, int stride) {
  if (images.size() != masks.size() || images.empty()) throw ArgumentError("evaluate: need matching, non-empty lists");
  EvalResult r{ConfusionMatrix(model.num_classes()), {}, 0.0};
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor<float> probs = window > 0 ? sliding_window_predict(model, images[i], window, stride)
                                           : model.predict(stack<float>(std::span<const ImageTensor>(&images[i], 1)));
    confusion_update(r.cm, argmax_mask(probs), masks[i]);
  }
  r.iou = miou(r.cm);
  r.accuracy = pixel_accuracy(r.cm);
  return r;
}

void write_eval_report(const std::filesystem::path& path, const EvalResult& result, const std::string& meta_json) {
  using nlohmann::json;
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json rows = json::array();
  const ClassScores dsc = dice(result.cm);
  for (int k = 0; k < result.cm.num_classes(); ++k)
    rows.push_back({{"class", k}, {"iou", num(result.iou.per_class[k])}, {"dice", num(dsc.per_class[k])}});
  json matrix = json::array();
  for (int g = 0; g < result.cm.num_classes(); ++g) {
    json row = json::array();
    for (int p = 0; p < result.cm.num_classes(); ++p) row.push_back(result.cm.at(g, p));
    matrix.push_back(row);
  }
  json report{{"per_class", rows},
              {"mean_iou", num(result.iou.mean)},
              {"mean_dice", num(dsc.mean)},
              {"pixel_accuracy", result.accuracy},
              {"scored_pixels", result.cm.total()},
              {"confusion_matrix", matrix},
              {"meta", meta_json.empty() ? json::object() : json::parse(meta_json)}};
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write report " + path.string());
  os << report.dump(2) << "\n";
}

}  // namespace semiseg
