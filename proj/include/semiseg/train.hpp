#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "semiseg/consistency.hpp"

namespace semiseg {

struct TrainConfig {
  double base_lr = 0.01;
  int total_epochs = 20;
  double poly_power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_l = 8;
  int batch_u = 8;
  int train_size = 64;
  VariantConfig variant = VariantConfig::preset(Variant::unimatch);
  std::optional<OhemConfig> ohem;
  std::uint64_t seed = 0;
  /// Steps between checkpoints; 0 writes only the final one.
  int checkpoint_every = 0;

  void validate() const;
};

/// base * (1 - iter / total_iters)^power
double poly_lr(double base, long iter, long total_iters, double power);

/// SGD with momentum and L2 weight decay:
///   v = m * v + (g + wd * w);  w -= lr * v
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(SegModel<float>& model, const Gradients<float>& grads, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<float>> velocity_;
};

struct TrainData {
  std::vector<ImageTensor> labeled_images;
  std::vector<LabelMask> labeled_masks;
  std::vector<ImageTensor> unlabeled_images;
};

struct StepLog {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss_s = 0.0;
  double loss_u = 0.0;
  double loss_total = 0.0;
  double mask_ratio = 0.0;
  friend bool operator==(const StepLog&, const StepLog&) = default;
};

/// One JSON object per line.
std::string to_json_line(const StepLog& s);
StepLog step_log_from_json(const std::string& line);

struct TrainOptions {
  /// Metrics log and checkpoints go here when set.
  std::optional<std::filesystem::path> output_dir;
  /// Stops after this many steps (schedule still spans all epochs).
  std::optional<long> max_steps;
  AugPipelineConfig aug;
  FeaturePerturbSpec fp;
  TinyNetConfig layout;
  std::uint64_t config_hash = 0;
  std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
  std::vector<StepLog> log;
  long total_iters = 0;
  bool aborted = false;
  std::string error;
  std::optional<std::filesystem::path> checkpoint;  // last successfully written
};

/// Fresh network initialized from the "init" substream of `seed`.
SegModel<float> init_model(const TinyNetConfig& layout, std::uint64_t seed);

/// epochs x epoch_batches steps of train_step with SGD under poly_lr.
/// Randomness comes from named substreams of cfg.seed: "schedule" (batch
/// order per epoch), "augment" and "dropout" (per step). A non-finite loss
/// stops training; the last written checkpoint is left untouched.
TrainResult run_training(const TrainConfig& cfg, const TrainData& data, SegModel<float>& model,
                         const TrainOptions& opts = {});

}  // namespace semiseg
