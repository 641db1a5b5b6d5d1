#include "semiseg/featperturb.hpp"

namespace semiseg {

std::string to_string(PerturbKind k) {
  switch (k) {
    case PerturbKind::none: return "none";
    case PerturbKind::channel_dropout: return "channel_dropout";
    case PerturbKind::uniform_noise: return "uniform_noise";
    case PerturbKind::vat: return "vat";
  }
  return "?";
}

PerturbKind parse_perturb_kind(std::string_view s) {
  if (s == "none") return PerturbKind::none;
  if (s == "channel_dropout" || s == "dropout") return PerturbKind::channel_dropout;
  if (s == "uniform_noise" || s == "noise") return PerturbKind::uniform_noise;
  if (s == "vat") return PerturbKind::vat;
  throw ConfigError("unknown feature perturbation '" + std::string(s) +
                    "' (expected none, channel_dropout, uniform_noise, vat)");
}

std::string to_string(PerturbLocation l) {
  return l == PerturbLocation::encoder_decoder ? "encoder_decoder" : "pre_classifier";
}

PerturbLocation parse_perturb_location(std::string_view s) {
  if (s == "encoder_decoder") return PerturbLocation::encoder_decoder;
  if (s == "pre_classifier") return PerturbLocation::pre_classifier;
  throw ConfigError("unknown perturbation location '" + std::string(s) + "'");
}

void FeaturePerturbSpec::validate() const {
  if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) throw ConfigError("feature_perturb: dropout_prob must lie in [0, 1)");
  if (!(noise_amplitude >= 0.0)) throw ConfigError("feature_perturb: noise_amplitude must be >= 0");
  if (!(vat_eps >= 0.0) || !(vat_xi > 0.0)) throw ConfigError("feature_perturb: need vat_eps >= 0 and vat_xi > 0");
  if (vat_iters < 1) throw ConfigError("feature_perturb: vat_iters must be >= 1");
}

}  // namespace semiseg
