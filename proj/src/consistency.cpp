#include "semiseg/consistency.hpp"

#include <numeric>

namespace semiseg {
namespace {

struct VariantName {
  Variant v;
  const char* name;
};

constexpr VariantName kVariants[] = {
    {Variant::supervised_only, "supervised_only"}, {Variant::fixmatch, "fixmatch"},
    {Variant::uniperb, "uniperb"},                 {Variant::dusperb, "dusperb"},
    {Variant::unimatch, "unimatch"},               {Variant::hybrid_single, "hybrid_single"},
    {Variant::hybrid_dual, "hybrid_dual"},         {Variant::feature_only, "feature_only"},
};

double mean(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::string to_string(Variant v) {
  for (const auto& e : kVariants)
    if (e.v == v) return e.name;
  return "?";
}

std::vector<std::string> variant_names() {
  std::vector<std::string> out;
  for (const auto& e : kVariants) out.emplace_back(e.name);
  return out;
}

Variant parse_variant(std::string_view s) {
  for (const auto& e : kVariants)
    if (s == e.name) return e.v;
  std::string valid;
  for (const auto& e : kVariants) valid += (valid.empty() ? "" : ", ") + std::string(e.name);
  throw ConfigError("unknown variant '" + std::string(s) + "'; valid variants: " + valid);
}

VariantConfig VariantConfig::preset(Variant v) {
  VariantConfig c;
  c.variant = v;
  c.tau = 0.95;
  c.hybrid = false;
  switch (v) {
    case Variant::supervised_only: c.n_image_streams = 0, c.n_feature_streams = 0, c.lambda = 0.0, c.mu = 0.0; break;
    case Variant::fixmatch: c.n_image_streams = 1, c.n_feature_streams = 0, c.lambda = 0.0, c.mu = 1.0; break;
    // image and feature terms simply summed
    case Variant::uniperb: c.n_image_streams = 1, c.n_feature_streams = 1, c.lambda = 1.0, c.mu = 1.0; break;
    case Variant::dusperb: c.n_image_streams = 2, c.n_feature_streams = 0, c.lambda = 0.0, c.mu = 1.0; break;
    case Variant::unimatch: c.n_image_streams = 2, c.n_feature_streams = 1, c.lambda = 0.5, c.mu = 0.5; break;
    case Variant::hybrid_single:
      c.n_image_streams = 1, c.n_feature_streams = 0, c.lambda = 0.0, c.mu = 1.0, c.hybrid = true;
      break;
    case Variant::hybrid_dual:
      c.n_image_streams = 2, c.n_feature_streams = 0, c.lambda = 0.0, c.mu = 1.0, c.hybrid = true;
      break;
    case Variant::feature_only: c.n_image_streams = 0, c.n_feature_streams = 1, c.lambda = 1.0, c.mu = 0.0; break;
  }
  return c;
}

VariantConfig& VariantConfig::override_weights(std::optional<double> lambda_override, std::optional<double> mu_override) {
  const bool both_kinds = n_image_streams > 0 && n_feature_streams > 0;
  if (lambda_override) lambda = *lambda_override;
  if (mu_override) mu = *mu_override;
  if (both_kinds && lambda_override && !mu_override) mu = std::max(0.0, 1.0 - lambda);
  if (both_kinds && mu_override && !lambda_override) lambda = std::max(0.0, 1.0 - mu);
  return *this;
}

void VariantConfig::validate() const {
  if (n_image_streams < 0 || n_feature_streams < 0) throw ConfigError("variant: stream counts must be >= 0");
  if (!(lambda >= 0.0) || !(mu >= 0.0)) throw ConfigError("variant: lambda and mu must be >= 0");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("variant: tau must lie in [0, 1]");
  if (uses_unlabeled() && n_image_streams + n_feature_streams == 0)
    throw ConfigError("variant: " + to_string(variant) + " needs at least one consistency stream");
}

double combine_unsup(std::span<const double> fp_losses, std::span<const double> strong_losses, const VariantConfig& cfg) {
  double u = 0.0;
  if (!fp_losses.empty()) u += cfg.lambda * mean(fp_losses);
  if (!strong_losses.empty()) u += cfg.mu * mean(strong_losses);
  return u;
}

}  // namespace semiseg
