#include "semiseg/train.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "semiseg/data.hpp"

namespace semiseg {

void TrainConfig::validate() const {
  if (!(base_lr > 0)) throw ConfigError("base_lr must be > 0");
  if (total_epochs < 1) throw ArgumentError("total_epochs must be >= 1");
  if (!(poly_power > 0)) throw ConfigError("poly_power must be > 0");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (batch_l < 1 || batch_u < 1) throw ConfigError("batch sizes must be >= 1");
  if (train_size < 1) throw ConfigError("train_size must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (ohem && (ohem->thresh <= 0 || ohem->thresh > 1 || ohem->min_kept < 0))
    throw ConfigError("ohem: thresh in (0, 1], min_kept >= 0");
  variant.validate();
}

double poly_lr(double base, long iter, long total_iters, double power) {
  if (total_iters <= 0) throw ArgumentError("poly_lr: total_iters must be > 0");
  if (iter < 0 || iter > total_iters) throw ArgumentError("poly_lr: iter outside [0, total_iters]");
  return base * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(total_iters), power);
}

void Sgd::step(SegModel<float>& model, const Gradients<float>& grads, double lr) {
  auto params = model.parameters();
  if (grads.size() != params.size()) throw ArgumentError("Sgd: gradient count differs from parameter count");
  if (velocity_.empty())
    for (const auto& p : params) velocity_.emplace_back(p.value->size(), 0.0f);
  const auto m = static_cast<float>(momentum_), wd = static_cast<float>(weight_decay_), a = static_cast<float>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float>& w = *params[i].value;
    const Tensor<float>& g = grads[i];
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = m * v[j] + (g[j] + wd * w[j]);
      w[j] -= a * v[j];
    }
  }
}

std::string to_json_line(const StepLog& s) {
  nlohmann::json j{{"step", s.step},     {"epoch", s.epoch},           {"lr", s.lr},
                   {"loss_s", s.loss_s}, {"loss_u", s.loss_u},         {"loss_total", s.loss_total},
                   {"mask_ratio", s.mask_ratio}};
  return j.dump();
}

StepLog step_log_from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  return StepLog{j.at("step").get<long>(),        j.at("epoch").get<int>(),         j.at("lr").get<double>(),
                 j.at("loss_s").get<double>(),    j.at("loss_u").get<double>(),     j.at("loss_total").get<double>(),
                 j.at("mask_ratio").get<double>()};
}

SegModel<float> init_model(const TinyNetConfig& layout, std::uint64_t seed) {
  Rng rng = Rng(seed).derive("init");
  return make_tiny_segnet<float>(layout, rng);
}

namespace {

void write_checkpoint_atomic(const std::filesystem::path& path, const SegModel<float>& model,
                             const TrainOptions& opts) {
  auto tmp = path;
  tmp += ".tmp";
  save_checkpoint(tmp, model, opts.layout, opts.config_hash);
  std::filesystem::rename(tmp, path);
}

template <typename V>
std::vector<V> gather(const std::vector<V>& src, const std::vector<std::size_t>& idx) {
  std::vector<V> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(src[i]);
  return out;
}

}  // namespace

TrainResult run_training(const TrainConfig& cfg, const TrainData& data, SegModel<float>& model,
                         const TrainOptions& opts) {
  cfg.validate();
  opts.aug.validate();
  opts.fp.validate();
  if (data.labeled_images.empty() || data.labeled_images.size() != data.labeled_masks.size())
    throw ArgumentError("run_training: need matching, non-empty labeled images and masks");
  const bool use_u = cfg.variant.uses_unlabeled();
  if (use_u && data.unlabeled_images.empty()) throw ArgumentError("run_training: variant needs unlabeled images");

  AugPipelineConfig aug = opts.aug;
  aug.train_size = cfg.train_size;
  // Epoch length follows the unlabeled set even when it is unused, so every
  // variant runs the same number of iterations. Without unlabeled data the
  // labeled list stands in for it.
  const std::size_t n_u = data.unlabeled_images.empty() ? data.labeled_images.size() : data.unlabeled_images.size();
  const int b_u = data.unlabeled_images.empty() ? cfg.batch_l : cfg.batch_u;

  const Rng root(cfg.seed);
  const Rng sched = root.derive("schedule"), aug_root = root.derive("augment"), drop_root = root.derive("dropout");

  const auto steps_per_epoch = static_cast<long>(
      epoch_batches(data.labeled_images.size(), n_u, cfg.batch_l, b_u, 0).size());
  TrainResult res;
  res.total_iters = steps_per_epoch * cfg.total_epochs;

  std::ofstream metrics;
  if (opts.output_dir) {
    std::filesystem::create_directories(*opts.output_dir);
    metrics.open(*opts.output_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw IoError("cannot open metrics log in " + opts.output_dir->string());
  }
  const auto ckpt_path = opts.output_dir ? std::optional(*opts.output_dir / "model.ckpt") : std::nullopt;

  Sgd opt(cfg.momentum, cfg.weight_decay);
  StepOptions<float> sopts;
  sopts.ohem = cfg.ohem;
  long step = 0;
  for (int epoch = 0; epoch < cfg.total_epochs && !(opts.max_steps && step >= *opts.max_steps); ++epoch) {
    const auto plan = epoch_batches(data.labeled_images.size(), n_u, cfg.batch_l, b_u,
                                    sched.derive(static_cast<std::uint64_t>(epoch)).seed());
    for (const BatchPlan& b : plan) {
      if (opts.max_steps && step >= *opts.max_steps) break;
      const auto li = gather(data.labeled_images, b.labeled);
      const auto lm = gather(data.labeled_masks, b.labeled);
      const auto ui = use_u ? gather(data.unlabeled_images, b.unlabeled) : std::vector<ImageTensor>{};
      const StepInputs in{li, lm, ui};
      const StepRng rng{aug_root.derive(static_cast<std::uint64_t>(step)),
                        drop_root.derive(static_cast<std::uint64_t>(step))};
      const double lr = poly_lr(cfg.base_lr, step, res.total_iters, cfg.poly_power);
      Gradients<float> grads = model.zero_gradients();
      StepMetrics m;
      try {
        m = train_step(model, grads, in, cfg.variant, aug, opts.fp, rng, sopts);
      } catch (const NumericError& e) {
        res.aborted = true;
        res.error = "step " + std::to_string(step) + ": " + e.what();
        return res;
      }
      opt.step(model, grads, lr);
      StepLog s{step, epoch, lr, m.loss_s, m.loss_u, m.loss_total, m.mask_ratio};
      res.log.push_back(s);
      if (metrics) metrics << to_json_line(s) << "\n" << std::flush;
      if (opts.on_step) opts.on_step(s);
      ++step;
      if (ckpt_path && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
        write_checkpoint_atomic(*ckpt_path, model, opts);
        res.checkpoint = ckpt_path;
      }
    }
  }
  if (ckpt_path) {
    write_checkpoint_atomic(*ckpt_path, model, opts);
    res.checkpoint = ckpt_path;
  }
  return res;
}

}  // namespace semiseg
