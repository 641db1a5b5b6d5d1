#include "semiseg/config.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "semiseg/version.hpp"

namespace semiseg {

using nlohmann::json;

void RunConfig::validate() const {
  train.validate();
  aug.validate();
  fp.validate();
  layout.validate();
  if (aug.train_size != train.train_size) throw ConfigError("augment.train_size differs from train.train_size");
}

namespace {

json variant_json(const VariantConfig& v) {
  return {{"name", to_string(v.variant)}, {"image_streams", v.n_image_streams}, {"feature_streams", v.n_feature_streams},
          {"lambda", v.lambda},           {"mu", v.mu},                         {"tau", v.tau},
          {"hybrid", v.hybrid}};
}

json to_tree(const RunConfig& c) {
  const TrainConfig& t = c.train;
  json train{{"base_lr", t.base_lr},           {"total_epochs", t.total_epochs}, {"poly_power", t.poly_power},
             {"momentum", t.momentum},         {"weight_decay", t.weight_decay}, {"batch_l", t.batch_l},
             {"batch_u", t.batch_u},           {"train_size", t.train_size},     {"seed", t.seed},
             {"checkpoint_every", t.checkpoint_every}};
  train["ohem"] = t.ohem ? json{{"thresh", t.ohem->thresh}, {"min_kept", t.ohem->min_kept}} : json(nullptr);
  const AugPipelineConfig& a = c.aug;
  json aug{{"scale_min", a.scale_min},
           {"scale_max", a.scale_max},
           {"hflip_prob", a.hflip_prob},
           {"brightness", a.jitter.brightness},
           {"contrast", a.jitter.contrast},
           {"saturation", a.jitter.saturation},
           {"hue", a.jitter.hue},
           {"jitter_prob", a.jitter_prob},
           {"grayscale_prob", a.grayscale_prob},
           {"blur_prob", a.blur_prob},
           {"blur_sigma_min", a.blur_sigma_min},
           {"blur_sigma_max", a.blur_sigma_max},
           {"cutmix_prob", a.cutmix_prob},
           {"cutmix_area_min", a.cutmix_area_min},
           {"cutmix_area_max", a.cutmix_area_max},
           {"strong_enabled", a.strong_enabled}};
  const FeaturePerturbSpec& f = c.fp;
  json fp{{"kind", to_string(f.kind)},     {"dropout_prob", f.dropout_prob}, {"noise_amplitude", f.noise_amplitude},
          {"vat_eps", f.vat_eps},          {"vat_xi", f.vat_xi},             {"vat_iters", f.vat_iters},
          {"location", to_string(f.location)}};
  const TinyNetConfig& l = c.layout;
  json model{{"in_channels", l.in_channels},
             {"num_classes", l.num_classes},
             {"encoder_widths", l.encoder_widths},
             {"encoder_strides", l.encoder_strides},
             {"decoder_width", l.decoder_width}};
  return {{"train", train}, {"variant", variant_json(t.variant)}, {"augment", aug}, {"feature_perturb", fp},
          {"model", model}};
}

// Reads only keys present in `j`, rejecting any it does not know.
class Reader {
 public:
  Reader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
  }
  template <typename V>
  Reader& get(const char* key, V& out) {
    seen_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        out = it->get<V>();
      } catch (const json::exception&) {
        throw ConfigError("config key '" + section_ + "." + key + "' has the wrong type");
      }
    }
    return *this;
  }
  [[nodiscard]] const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + section_ + "." + k + "'");
  }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string, std::less<>> seen_;
};

}  // namespace

std::string to_json(const RunConfig& cfg) { return to_tree(cfg).dump(); }

RunConfig run_config_from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Reader top(root, "<root>");
  if (const json* v = top.find("variant")) {
    Reader r(*v, "variant");
    std::string name = to_string(c.train.variant.variant);
    r.get("name", name);
    c.train.variant = VariantConfig::preset(parse_variant(name));
    r.get("image_streams", c.train.variant.n_image_streams)
        .get("feature_streams", c.train.variant.n_feature_streams)
        .get("lambda", c.train.variant.lambda)
        .get("mu", c.train.variant.mu)
        .get("tau", c.train.variant.tau)
        .get("hybrid", c.train.variant.hybrid)
        .finish();
  }
  if (const json* v = top.find("train")) {
    Reader r(*v, "train");
    TrainConfig& t = c.train;
    r.get("base_lr", t.base_lr)
        .get("total_epochs", t.total_epochs)
        .get("poly_power", t.poly_power)
        .get("momentum", t.momentum)
        .get("weight_decay", t.weight_decay)
        .get("batch_l", t.batch_l)
        .get("batch_u", t.batch_u)
        .get("train_size", t.train_size)
        .get("seed", t.seed)
        .get("checkpoint_every", t.checkpoint_every);
    if (const json* o = r.find("ohem"); o && !o->is_null()) {
      OhemConfig oc;
      Reader(*o, "train.ohem").get("thresh", oc.thresh).get("min_kept", oc.min_kept).finish();
      t.ohem = oc;
    }
    r.finish();
    c.aug.train_size = t.train_size;
  }
  if (const json* v = top.find("augment")) {
    AugPipelineConfig& a = c.aug;
    Reader(*v, "augment")
        .get("scale_min", a.scale_min)
        .get("scale_max", a.scale_max)
        .get("hflip_prob", a.hflip_prob)
        .get("brightness", a.jitter.brightness)
        .get("contrast", a.jitter.contrast)
        .get("saturation", a.jitter.saturation)
        .get("hue", a.jitter.hue)
        .get("jitter_prob", a.jitter_prob)
        .get("grayscale_prob", a.grayscale_prob)
        .get("blur_prob", a.blur_prob)
        .get("blur_sigma_min", a.blur_sigma_min)
        .get("blur_sigma_max", a.blur_sigma_max)
        .get("cutmix_prob", a.cutmix_prob)
        .get("cutmix_area_min", a.cutmix_area_min)
        .get("cutmix_area_max", a.cutmix_area_max)
        .get("strong_enabled", a.strong_enabled)
        .finish();
  }
  if (const json* v = top.find("feature_perturb")) {
    FeaturePerturbSpec& f = c.fp;
    std::string kind = to_string(f.kind), loc = to_string(f.location);
    Reader(*v, "feature_perturb")
        .get("kind", kind)
        .get("dropout_prob", f.dropout_prob)
        .get("noise_amplitude", f.noise_amplitude)
        .get("vat_eps", f.vat_eps)
        .get("vat_xi", f.vat_xi)
        .get("vat_iters", f.vat_iters)
        .get("location", loc)
        .finish();
    f.kind = parse_perturb_kind(kind);
    f.location = parse_perturb_location(loc);
  }
  if (const json* v = top.find("model")) {
    TinyNetConfig& l = c.layout;
    Reader(*v, "model")
        .get("in_channels", l.in_channels)
        .get("num_classes", l.num_classes)
        .get("encoder_widths", l.encoder_widths)
        .get("encoder_strides", l.encoder_strides)
        .get("decoder_width", l.decoder_width)
        .finish();
  }
  top.finish();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return run_config_from_json(ss.str());
}

void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write config " + path.string());
  os << to_tree(cfg).dump(2) << "\n";
}

std::uint64_t config_hash(const RunConfig& cfg) { return Rng::hash(to_json(cfg)); }

std::string hex_digest(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
  json j{{"config_hash", m.config_hash},
         {"seed", m.seed},
         {"version", m.version},
         {"command_line", m.command_line},
         {"started_at", m.started_at},
         {"finished_at", m.finished_at},
         {"effective_config", json::parse(m.effective_config.empty() ? "{}" : m.effective_config)},
         {"status", m.status}};
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write manifest " + path.string());
  os << j.dump(2) << "\n";
}

RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read manifest " + path.string());
  const json j = json::parse(is);
  RunManifest m;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.version = j.at("version").get<std::string>();
  m.command_line = j.at("command_line").get<std::vector<std::string>>();
  m.started_at = j.at("started_at").get<std::string>();
  m.finished_at = j.at("finished_at").get<std::string>();
  m.effective_config = j.at("effective_config").dump();
  m.status = j.at("status").get<std::string>();
  return m;
}

}  // namespace semiseg
