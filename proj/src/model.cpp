#include "semiseg/model.hpp"

#include <fstream>

#include <json.hpp>

namespace semiseg {
namespace {

constexpr char kMagic[8] = {'S', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw IoError("checkpoint: truncated file");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > (1u << 24)) throw IoError("checkpoint: implausible string length");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw IoError("checkpoint: truncated file");
  return s;
}

}  // namespace

void TinyNetConfig::validate() const {
  if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (encoder_widths.empty() || encoder_widths.size() != encoder_strides.size())
    throw ConfigError("model: encoder widths/strides must be non-empty and equally long");
  for (int w : encoder_widths)
    if (w < 1) throw ConfigError("model: encoder widths must be >= 1");
  for (int s : encoder_strides)
    if (s < 1) throw ConfigError("model: encoder strides must be >= 1");
  if (decoder_width < 1) throw ConfigError("model: decoder_width must be >= 1");
}

void save_checkpoint(const std::filesystem::path& path, const SegModel<float>& model, const TinyNetConfig& layout,
                     std::uint64_t config_hash) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot write " + path.string());
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::int32_t>(os, model.num_classes());
  put<std::int32_t>(os, model.feature_dim());
  put<std::int32_t>(os, model.stride());
  put<std::int32_t>(os, model.in_channels());
  put<std::uint64_t>(os, config_hash);
  nlohmann::json lj{{"in_channels", layout.in_channels},
                    {"num_classes", layout.num_classes},
                    {"encoder_widths", layout.encoder_widths},
                    {"encoder_strides", layout.encoder_strides},
                    {"decoder_width", layout.decoder_width}};
  put_string(os, lj.dump());

  const auto params = model.parameters();
  const auto names = model.parameter_names();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    put_string(os, names[i]);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(params[i]->rank()));
    for (int d : params[i]->shape()) put<std::int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(params[i]->data()),
             static_cast<std::streamsize>(params[i]->size() * sizeof(float)));
  }
  if (!os) throw IoError("checkpoint: write failed for " + path.string());
}

SegModel<float> load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || !std::equal(magic, magic + 8, kMagic))
    throw IoError("checkpoint: bad magic in " + path.string());
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  CheckpointMeta m;
  m.num_classes = get<std::int32_t>(is);
  m.feature_dim = get<std::int32_t>(is);
  m.stride = get<std::int32_t>(is);
  m.in_channels = get<std::int32_t>(is);
  m.config_hash = get<std::uint64_t>(is);
  try {
    const auto lj = nlohmann::json::parse(get_string(is));
    m.layout.in_channels = lj.at("in_channels").get<int>();
    m.layout.num_classes = lj.at("num_classes").get<int>();
    m.layout.encoder_widths = lj.at("encoder_widths").get<std::vector<int>>();
    m.layout.encoder_strides = lj.at("encoder_strides").get<std::vector<int>>();
    m.layout.decoder_width = lj.at("decoder_width").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad layout header: ") + e.what());
  }
  Rng dummy(0);
  SegModel<float> model = make_tiny_segnet<float>(m.layout, dummy);
  if (model.num_classes() != m.num_classes || model.feature_dim() != m.feature_dim || model.stride() != m.stride)
    throw IoError("checkpoint: header disagrees with stored layout");

  auto params = model.parameters();
  const auto count = get<std::uint32_t>(is);
  if (count != params.size()) throw IoError("checkpoint: parameter count mismatch");
  for (auto& p : params) {
    const std::string name = get_string(is);
    if (name != p.name) throw IoError("checkpoint: expected parameter '" + p.name + "', found '" + name + "'");
    const auto rank = get<std::uint32_t>(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = get<std::int32_t>(is);
    if (shape != p.value->shape()) throw IoError("checkpoint: shape mismatch for '" + name + "'");
    if (!is.read(reinterpret_cast<char*>(p.value->data()), static_cast<std::streamsize>(p.value->size() * sizeof(float))))
      throw IoError("checkpoint: truncated parameter data");
  }
  if (meta) *meta = m;
  return model;
}

}  // namespace semiseg
