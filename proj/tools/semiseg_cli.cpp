#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "semiseg/config.hpp"
#include "semiseg/data.hpp"
#include "semiseg/eval.hpp"
#include "semiseg/version.hpp"

namespace fs = std::filesystem;
using namespace semiseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

fs::path output_root() {
  const char* env = std::getenv("SEMISEG_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::current_path();
}

fs::path resolve_out(const std::string& given, const char* fallback) {
  if (!given.empty()) return given;
  return output_root() / fallback;
}

struct SynthArgs {
  std::string out;
  int items = 520;
  int size = 64;
  int classes = 3;
  std::uint64_t seed = 0;
  bool overwrite = false;
};

int cmd_synth(const SynthArgs& a) {
  const fs::path root = resolve_out(a.out, "synth");
  if (a.classes < 2 || a.classes > kMaxSynthClasses)
    throw ArgumentError("--classes must lie in [2, " + std::to_string(kMaxSynthClasses) + "]");
  if (a.items < 1) throw ArgumentError("--items must be >= 1");
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!a.overwrite) throw ArgumentError(root.string() + " is not empty; pass --overwrite to replace it");
    fs::remove_all(root);
  }
  const DatasetIndex idx = synth_dataset(root, a.items, a.size, a.classes, a.seed);
  std::size_t hq = 0;
  for (const auto& it : idx.items) hq += it.high_quality;
  std::cout << "wrote " << idx.items.size() << " items (" << a.size << "x" << a.size << ", " << a.classes
            << " classes, " << hq << " high quality) to " << root.string() << "\n";
  return kExitOk;
}

struct SplitArgs {
  std::string data;
  std::string out;
  std::optional<int> n_labeled;
  std::optional<double> fraction;
  std::string protocol = "blended";
  std::uint64_t seed = 0;
};

int cmd_split(const SplitArgs& a) {
  const DatasetIndex idx = load_index(a.data);
  SplitSpec spec{parse_split_protocol(a.protocol), a.n_labeled, a.fraction, a.seed};
  if (!spec.n_labeled && !spec.fraction) throw ArgumentError("give --n-labeled or --fraction");
  const Split s = make_splits(idx, spec);
  const fs::path dir = a.out.empty() ? idx.root / "splits" : fs::path(a.out);
  write_split_files(idx, s, dir);
  std::cout << "labeled " << s.labeled.size() << ", unlabeled " << s.unlabeled.size() << " -> " << dir.string()
            << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data;
  std::string splits;
  std::string config;
  std::string out;
  std::optional<std::string> variant;
  std::optional<double> tau, lambda, mu, lr;
  std::optional<int> image_streams, feature_streams, epochs, batch_l, batch_u, checkpoint_every;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> perturb;
  std::optional<long> max_steps;
  bool no_strong = false;
  bool ohem = false;
};

RunConfig effective_config(const TrainArgs& a) {
  RunConfig c = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  VariantConfig& v = c.train.variant;
  if (a.variant) v = VariantConfig::preset(parse_variant(*a.variant));
  if (a.image_streams) v.n_image_streams = *a.image_streams;
  if (a.feature_streams) v.n_feature_streams = *a.feature_streams;
  if (a.tau) v.tau = *a.tau;
  v.override_weights(a.lambda, a.mu);
  if (a.lr) c.train.base_lr = *a.lr;
  if (a.epochs) c.train.total_epochs = *a.epochs;
  if (a.batch_l) c.train.batch_l = *a.batch_l;
  if (a.batch_u) c.train.batch_u = *a.batch_u;
  if (a.checkpoint_every) c.train.checkpoint_every = *a.checkpoint_every;
  if (a.seed) c.train.seed = *a.seed;
  if (a.perturb) c.fp.kind = parse_perturb_kind(*a.perturb);
  if (a.no_strong) c.aug.strong_enabled = false;
  if (a.ohem && !c.train.ohem) c.train.ohem = OhemConfig{};
  c.aug.train_size = c.train.train_size;
  c.validate();
  return c;
}

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  const RunConfig cfg = effective_config(a);
  const DatasetIndex idx = load_index(a.data);
  if (idx.num_classes != cfg.layout.num_classes)
    throw ConfigError("dataset has " + std::to_string(idx.num_classes) + " classes, model.num_classes is " +
                      std::to_string(cfg.layout.num_classes));
  const fs::path split_dir = a.splits.empty() ? idx.root / "splits" : fs::path(a.splits);
  TrainData data;
  for (auto& s : load_items(idx.root, read_split_file(split_dir / "labeled.txt"), idx.ignore_index)) {
    if (!s.mask) throw ConfigError("labeled split entry without a mask");
    data.labeled_images.push_back(std::move(s.image));
    data.labeled_masks.push_back(std::move(*s.mask));
  }
  for (auto& s : load_items(idx.root, read_split_file(split_dir / "unlabeled.txt"), idx.ignore_index))
      data.unlabeled_images.push_back(std::move(s.image));

  const fs::path out = resolve_out(a.out, "run");
  fs::create_directories(out);
  const std::string canonical = to_json(cfg);
  save_run_config(out / "config.json", cfg);
  RunManifest manifest{hex_digest(config_hash(cfg)), cfg.train.seed, kVersion, argv, utc_timestamp(), "",
                       canonical, "running"};
  write_manifest(out / "manifest.json", manifest);

  SegModel<float> model = init_model(cfg.layout, cfg.train.seed);
  TrainOptions opts;
  opts.output_dir = out;
  opts.max_steps = a.max_steps;
  opts.aug = cfg.aug;
  opts.fp = cfg.fp;
  opts.layout = cfg.layout;
  opts.config_hash = config_hash(cfg);
  const TrainResult r = run_training(cfg.train, data, model, opts);

  manifest.finished_at = utc_timestamp();
  manifest.status = r.aborted ? "aborted: " + r.error : "ok";
  write_manifest(out / "manifest.json", manifest);
  if (r.aborted) {
    std::cerr << "training aborted at " << r.error << "\n";
    if (r.checkpoint) std::cerr << "last good checkpoint: " << r.checkpoint->string() << "\n";
    return kExitRuntime;
  }
  const StepLog last = r.log.empty() ? StepLog{} : r.log.back();
  std::cout << "trained " << r.log.size() << " steps (" << to_string(cfg.train.variant.variant)
            << "), final loss " << last.loss_total << ", checkpoint " << r.checkpoint->string() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split;
  std::string report;
  int window = 0;
  std::optional<int> stride;
};

int cmd_eval(const EvalArgs& a) {
  if (!fs::exists(a.checkpoint)) throw IoError("checkpoint not found: " + a.checkpoint);
  CheckpointMeta meta;
  const SegModel<float> model = load_checkpoint(a.checkpoint, &meta);
  const DatasetIndex idx = load_index(a.data);
  if (idx.num_classes != model.num_classes())
    throw ConfigError("checkpoint predicts " + std::to_string(model.num_classes()) + " classes, dataset has " +
                      std::to_string(idx.num_classes));
  std::vector<DatasetItem> items;
  if (a.split.empty()) {
    for (const auto& it : idx.items)
      if (it.mask) items.push_back(it);
  } else {
    items = read_split_file(a.split);
  }
  std::vector<ImageTensor> images;
  std::vector<LabelMask> masks;
  for (auto& s : load_items(idx.root, items, idx.ignore_index)) {
    if (!s.mask) throw ConfigError("evaluation split entry without a mask");
    images.push_back(std::move(s.image));
    masks.push_back(std::move(*s.mask));
  }
  const int stride = a.window > 0 ? a.stride.value_or(std::max(1, a.window * 2 / 3)) : 0;
  const EvalResult r = evaluate(model, images, masks, a.window, stride);
  const fs::path report = a.report.empty() ? fs::path(a.checkpoint).parent_path() / "eval.json" : fs::path(a.report);
  const nlohmann::json meta_json{{"checkpoint", a.checkpoint},
                                 {"config_hash", hex_digest(meta.config_hash)},
                                 {"dataset", idx.root.string()},
                                 {"items", images.size()},
                                 {"window", a.window},
                                 {"stride", stride},
                                 {"version", kVersion},
                                 {"evaluated_at", utc_timestamp()}};
  write_eval_report(report, r, meta_json.dump());
  std::cout << "mIoU " << r.iou.mean << " over " << images.size() << " items; report " << report.string() << "\n";
  for (int k = 0; k < r.cm.num_classes(); ++k) std::cout << "  class " << k << " IoU " << r.iou.per_class[k] << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised segmentation: synthetic data, splits, training and evaluation"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic shapes dataset");
  synth->add_option("--out", sa.out, "Dataset directory (default $SEMISEG_OUTPUT_ROOT/synth)");
  synth->add_option("--items", sa.items, "Number of image/mask pairs")->capture_default_str();
  synth->add_option("--size", sa.size, "Image side length")->capture_default_str();
  synth->add_option("--classes", sa.classes, "Classes including background")->capture_default_str();
  synth->add_option("--seed", sa.seed)->capture_default_str();
  synth->add_flag("--overwrite", sa.overwrite, "Replace a non-empty output directory");

  SplitArgs pa;
  auto* split = app.add_subcommand("split", "Write labeled/unlabeled split files");
  split->add_option("--data", pa.data, "Dataset directory")->required();
  split->add_option("--out", pa.out, "Split directory (default <data>/splits)");
  split->add_option("--n-labeled", pa.n_labeled);
  split->add_option("--fraction", pa.fraction, "Labeled fraction, used without --n-labeled");
  split->add_option("--protocol", pa.protocol, "original_only | blended | prioritized_high_quality | fraction")
      ->capture_default_str();
  split->add_option("--seed", pa.seed)->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--data", ta.data, "Dataset directory")->required();
  train->add_option("--splits", ta.splits, "Directory with labeled.txt/unlabeled.txt (default <data>/splits)");
  train->add_option("--config", ta.config, "JSON run config");
  train->add_option("--out", ta.out, "Run directory (default $SEMISEG_OUTPUT_ROOT/run)");
  train->add_option("--variant", ta.variant);
  train->add_option("--tau", ta.tau, "Confidence threshold");
  train->add_option("--lambda", ta.lambda, "Feature-stream weight");
  train->add_option("--mu", ta.mu, "Image-stream weight");
  train->add_option("--image-streams", ta.image_streams);
  train->add_option("--feature-streams", ta.feature_streams);
  train->add_option("--perturb", ta.perturb, "none | channel_dropout | uniform_noise | vat");
  train->add_option("--lr", ta.lr, "Base learning rate");
  train->add_option("--epochs", ta.epochs);
  train->add_option("--batch-l", ta.batch_l);
  train->add_option("--batch-u", ta.batch_u);
  train->add_option("--checkpoint-every", ta.checkpoint_every, "Steps between checkpoints");
  train->add_option("--max-steps", ta.max_steps);
  train->add_option("--seed", ta.seed);
  train->add_flag("--no-strong", ta.no_strong, "Use the weak view as the strong view");
  train->add_flag("--ohem", ta.ohem, "Supervised loss with online hard example mining");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint)->required();
  eval->add_option("--data", ea.data, "Dataset directory")->required();
  eval->add_option("--split", ea.split, "Split file (default: every annotated item)");
  eval->add_option("--report", ea.report, "Report path (default <checkpoint dir>/eval.json)");
  eval->add_option("--window", ea.window, "Sliding-window size; 0 evaluates whole images")->capture_default_str();
  eval->add_option("--stride", ea.stride, "Window stride (default 2/3 of the window)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*split) return cmd_split(pa);
    if (*train) return cmd_train(ta, std::vector<std::string>(argv, argv + argc));
    if (*eval) return cmd_eval(ea);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
