#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "semiseg/augment.hpp"
#include "semiseg/featperturb.hpp"
#include "semiseg/losses.hpp"
#include "semiseg/model.hpp"

namespace semiseg {

enum class Variant { supervised_only, fixmatch, uniperb, dusperb, unimatch, hybrid_single, hybrid_dual, feature_only };

std::string to_string(Variant v);
/// Throws ConfigError listing the valid names.
Variant parse_variant(std::string_view s);
std::vector<std::string> variant_names();

/// Stream layout and weights of the unsupervised loss
///   L_u = lambda * mean_f H(p^w, p^fp_f) + mu * mean_s H(p^w, p^s_s)
/// with each H restricted to pixels whose weak confidence reaches tau.
struct VariantConfig {
  Variant variant = Variant::unimatch;
  int n_image_streams = 2;
  int n_feature_streams = 1;
  double lambda = 0.5;
  double mu = 0.5;
  double tau = 0.95;
  /// Image streams also perturb their own encoder features (hybrid views).
  bool hybrid = false;

  /// Defaults for a variant.
  static VariantConfig preset(Variant v);

  /// Applies user overrides. When exactly one of lambda/mu is given for a
  /// variant that uses both stream kinds, the other becomes its complement
  /// so the weights keep summing to one.
  VariantConfig& override_weights(std::optional<double> lambda_override, std::optional<double> mu_override);

  [[nodiscard]] bool uses_unlabeled() const noexcept { return variant != Variant::supervised_only; }
  void validate() const;
};

/// Combines per-stream losses into L_u. Empty lists contribute zero.
double combine_unsup(std::span<const double> fp_losses, std::span<const double> strong_losses,
                     const VariantConfig& cfg);

/// L_u from stream logits sharing one pseudo label.
template <typename T>
double unimatch_unsup_loss(std::span<const Tensor<T>> fp_logits, std::span<const Tensor<T>> strong_logits,
                           const PseudoLabel& pl, const VariantConfig& cfg) {
  if (fp_logits.empty() && strong_logits.empty()) throw ArgumentError("unimatch_unsup_loss: no streams given");
  std::vector<double> f, s;
  for (const auto& l : fp_logits) f.push_back(masked_ce(l, pl, false).value);
  for (const auto& l : strong_logits) s.push_back(masked_ce(l, pl, false).value);
  return combine_unsup(f, s, cfg);
}

struct OhemConfig {
  double thresh = 0.7;
  int min_kept = 0;  // 0: batch pixels / 16
};

struct StepInputs {
  std::span<const ImageTensor> labeled_images;
  std::span<const LabelMask> labeled_masks;
  std::span<const ImageTensor> unlabeled_images;
};

/// Randomness of one step. Every consumer inside the step (labeled views,
/// weak views, each strong stream, each feature stream) derives its own
/// child stream, so adding or removing a stream never shifts the draws of
/// another.
struct StepRng {
  Rng augment;
  Rng dropout;
};

struct StepMetrics {
  double loss_s = 0.0;
  double loss_u = 0.0;
  double loss_total = 0.0;
  double mask_ratio = 0.0;
  std::vector<double> fp_losses;
  std::vector<double> strong_losses;
};

/// Intermediates of one step, exported for inspection and tests.
template <typename T>
struct StepTrace {
  Tensor<T> sup_logits;
  std::vector<LabelMask> sup_masks;
  Tensor<T> weak_logits;
  PseudoLabel pseudo;                  // weak-view pseudo label, padding excluded
  std::vector<Tensor<T>> fp_logits;
  std::vector<Tensor<T>> strong_logits;
  std::vector<PseudoLabel> strong_targets;  // pseudo label mixed like each strong view
  std::vector<std::vector<AugRecord>> strong_records;
};

template <typename T>
struct StepOptions {
  /// Replaces the computed weak-view pseudo label.
  const PseudoLabel* pseudo_override = nullptr;
  StepTrace<T>* trace = nullptr;
  std::optional<OhemConfig> ohem;
};

/// One optimization step's forward/backward. Gradients of
///   loss_total = (L_s + L_u) / 2
/// are accumulated into `grads`; the model is not modified.
template <typename T>
StepMetrics train_step(const SegModel<T>& model, Gradients<T>& grads, const StepInputs& in, const VariantConfig& cfg,
                       const AugPipelineConfig& aug, const FeaturePerturbSpec& fp, const StepRng& rng,
                       const StepOptions<T>& opts = {});

}  // namespace semiseg

#include "semiseg/detail/train_step.ipp"
