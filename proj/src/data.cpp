#include "semiseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace semiseg {
namespace fs = std::filesystem;

namespace {

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// Reads the P5/P6 header; returns max value.
void read_pnm_header(std::istream& is, const char* expect, int& w, int& h, const fs::path& path) {
  auto token = [&]() {
    std::string t;
    while (is >> std::ws && is.peek() == '#') {
      std::string line;
      std::getline(is, line);
    }
    is >> t;
    return t;
  };
  if (token() != expect) throw IoError("netpbm: " + path.string() + " is not " + expect);
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    if (std::stoi(token()) != 255) throw IoError("netpbm: only 8-bit files supported: " + path.string());
  } catch (const std::logic_error&) {
    throw IoError("netpbm: malformed header in " + path.string());
  }
  is.get();  // single whitespace before raster
  if (w <= 0 || h <= 0) throw IoError("netpbm: bad size in " + path.string());
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

}  // namespace

// --- netpbm ----------------------------------------------------------------

void write_ppm(const fs::path& path, const ImageTensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ArgumentError("write_ppm: 3 x H x W image expected");
  const int H = image.dim(1), W = image.dim(2);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P6\n" << W << " " << H << "\n255\n";
  std::vector<char> row(static_cast<std::size_t>(W) * 3);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) row[static_cast<std::size_t>(x) * 3 + c] = static_cast<char>(quantize(image(c, y, x)));
    os.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
}

ImageTensor read_ppm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  int W = 0, H = 0;
  read_pnm_header(is, "P6", W, H, path);
  std::vector<unsigned char> raw(static_cast<std::size_t>(W) * H * 3);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw IoError("truncated image " + path.string());
  ImageTensor im({3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) im(c, y, x) = static_cast<float>(raw[(static_cast<std::size_t>(y) * W + x) * 3 + c]) / 255.0f;
  return im;
}

void write_pgm(const fs::path& path, const LabelMask& mask) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  std::vector<char> raw(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.data[i] < 0 || mask.data[i] > 255) throw ArgumentError("write_pgm: label outside 0..255");
    raw[i] = static_cast<char>(mask.data[i]);
  }
  os.write(raw.data(), static_cast<std::streamsize>(raw.size()));
}

LabelMask read_pgm(const fs::path& path, std::int32_t ignore_index) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  int W = 0, H = 0;
  read_pnm_header(is, "P5", W, H, path);
  std::vector<unsigned char> raw(static_cast<std::size_t>(W) * H);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw IoError("truncated mask " + path.string());
  LabelMask m(H, W, 0, ignore_index);
  std::copy(raw.begin(), raw.end(), m.data.begin());
  return m;
}

// --- index -----------------------------------------------------------------

DatasetIndex load_index(const fs::path& root) {
  DatasetIndex idx;
  idx.root = root;
  {
    std::ifstream is(root / "dataset.json");
    if (!is) throw IoError("missing " + (root / "dataset.json").string());
    try {
      const auto j = nlohmann::json::parse(is);
      idx.num_classes = j.at("num_classes").get<int>();
      idx.ignore_index = j.value("ignore_index", kDefaultIgnoreIndex);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("dataset.json: ") + e.what());
    }
  }
  std::ifstream is(root / "index.txt");
  if (!is) throw IoError("missing " + (root / "index.txt").string());
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    DatasetItem it;
    std::string mask;
    int hq = 0;
    if (!(ls >> it.image >> mask)) throw IoError("index.txt: malformed line '" + line + "'");
    ls >> hq;
    if (mask != "-") it.mask = mask;
    it.high_quality = hq != 0;
    idx.items.push_back(std::move(it));
  }
  return idx;
}

void save_index(const DatasetIndex& index) {
  ensure_dir(index.root);
  {
    std::ofstream os(index.root / "dataset.json", std::ios::trunc);
    os << nlohmann::json{{"num_classes", index.num_classes}, {"ignore_index", index.ignore_index}}.dump(2) << "\n";
  }
  std::ofstream os(index.root / "index.txt", std::ios::trunc);
  for (const auto& it : index.items) os << it.image << " " << it.mask.value_or("-") << " " << (it.high_quality ? 1 : 0) << "\n";
  if (!os) throw IoError("cannot write index.txt under " + index.root.string());
}

// --- splits ----------------------------------------------------------------

std::string to_string(SplitProtocol p) {
  switch (p) {
    case SplitProtocol::original_only: return "original_only";
    case SplitProtocol::blended: return "blended";
    case SplitProtocol::prioritized_high_quality: return "prioritized_high_quality";
    case SplitProtocol::fraction: return "fraction";
  }
  return "?";
}

SplitProtocol parse_split_protocol(std::string_view s) {
  if (s == "original_only") return SplitProtocol::original_only;
  if (s == "blended") return SplitProtocol::blended;
  if (s == "prioritized_high_quality") return SplitProtocol::prioritized_high_quality;
  if (s == "fraction") return SplitProtocol::fraction;
  throw ConfigError("unknown split protocol '" + std::string(s) +
                    "' (expected original_only, blended, prioritized_high_quality, fraction)");
}

int resolve_labeled_count(const SplitSpec& spec, std::size_t dataset_size) {
  if (spec.n_labeled && spec.protocol != SplitProtocol::fraction) {
    if (*spec.n_labeled < 0) throw ArgumentError("make_splits: n_labeled must be >= 0");
    return *spec.n_labeled;
  }
  if (!spec.fraction) {
    if (spec.n_labeled) return *spec.n_labeled;
    throw ArgumentError("make_splits: need n_labeled or fraction");
  }
  if (!(*spec.fraction >= 0.0 && *spec.fraction <= 1.0)) throw ArgumentError("make_splits: fraction must lie in [0, 1]");
  return static_cast<int>(std::lround(*spec.fraction * static_cast<double>(dataset_size)));
}

Split make_splits(const DatasetIndex& index, const SplitSpec& spec) {
  const int n = resolve_labeled_count(spec, index.items.size());
  Rng rng(spec.seed);
  std::vector<std::size_t> hq, rest;
  for (std::size_t i = 0; i < index.items.size(); ++i) {
    if (!index.items[i].mask) continue;  // only annotated items can be labeled
    (index.items[i].high_quality ? hq : rest).push_back(i);
  }
  std::vector<std::size_t> pool;
  switch (spec.protocol) {
    case SplitProtocol::original_only:
      pool = hq;
      std::shuffle(pool.begin(), pool.end(), rng.engine());
      break;
    case SplitProtocol::prioritized_high_quality:
      std::shuffle(hq.begin(), hq.end(), rng.engine());
      std::shuffle(rest.begin(), rest.end(), rng.engine());
      pool = hq;
      pool.insert(pool.end(), rest.begin(), rest.end());
      break;
    case SplitProtocol::blended:
    case SplitProtocol::fraction:
      pool = hq;
      pool.insert(pool.end(), rest.begin(), rest.end());
      std::sort(pool.begin(), pool.end());
      std::shuffle(pool.begin(), pool.end(), rng.engine());
      break;
  }
  if (static_cast<std::size_t>(n) > pool.size())
    throw ArgumentError("make_splits: n_labeled = " + std::to_string(n) + " exceeds the eligible pool of " +
                        std::to_string(pool.size()) + " items");
  Split out;
  out.labeled.assign(pool.begin(), pool.begin() + n);
  std::sort(out.labeled.begin(), out.labeled.end());
  std::vector<bool> taken(index.items.size(), false);
  for (auto i : out.labeled) taken[i] = true;
  for (std::size_t i = 0; i < index.items.size(); ++i)
    if (!taken[i]) out.unlabeled.push_back(i);
  return out;
}

void write_split_files(const DatasetIndex& index, const Split& split, const fs::path& dir) {
  ensure_dir(dir);
  std::ofstream l(dir / "labeled.txt", std::ios::trunc), u(dir / "unlabeled.txt", std::ios::trunc);
  if (!l || !u) throw IoError("cannot write split files under " + dir.string());
  for (auto i : split.labeled) l << index.items[i].image << " " << *index.items[i].mask << "\n";
  for (auto i : split.unlabeled) u << index.items[i].image << "\n";
}

std::vector<DatasetItem> read_split_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open split file " + path.string());
  std::vector<DatasetItem> out;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    DatasetItem it;
    if (!(ls >> it.image)) continue;
    std::string mask;
    if (ls >> mask) it.mask = mask;
    out.push_back(std::move(it));
  }
  return out;
}

std::vector<BatchPlan> epoch_batches(std::size_t n_labeled, std::size_t n_unlabeled, int b_l, int b_u,
                                     std::uint64_t seed) {
  if (b_l < 1 || b_u < 1) throw ArgumentError("epoch_batches: batch sizes must be >= 1");
  if (n_labeled == 0 || n_unlabeled == 0) throw ArgumentError("epoch_batches: empty labeled or unlabeled list");
  const std::size_t steps = std::max((n_labeled + b_l - 1) / b_l, (n_unlabeled + b_u - 1) / b_u);
  auto stream = [&](std::size_t n, std::size_t need, Rng rng) {
    std::vector<std::size_t> out;
    std::vector<std::size_t> perm(n);
    while (out.size() < need) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      out.insert(out.end(), perm.begin(), perm.end());
    }
    out.resize(need);
    return out;
  };
  const Rng root(seed);
  const auto ls = stream(n_labeled, steps * b_l, root.derive("labeled"));
  const auto us = stream(n_unlabeled, steps * b_u, root.derive("unlabeled"));
  std::vector<BatchPlan> plan(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    plan[s].labeled.assign(ls.begin() + s * b_l, ls.begin() + (s + 1) * b_l);
    plan[s].unlabeled.assign(us.begin() + s * b_u, us.begin() + (s + 1) * b_u);
  }
  return plan;
}

std::vector<Sample> load_items(const fs::path& root, const std::vector<DatasetItem>& items, std::int32_t ignore_index) {
  std::vector<Sample> out;
  out.reserve(items.size());
  for (const auto& it : items) {
    Sample s{read_ppm(root / it.image), std::nullopt};
    if (it.mask) {
      s.mask = read_pgm(root / *it.mask, ignore_index);
      if (s.mask->height != s.image.dim(1) || s.mask->width != s.image.dim(2))
        throw IoError("mask size differs from image: " + *it.mask);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// --- synthetic shapes ------------------------------------------------------

bool shape_contains(const ShapeSpec& s, int px, int py) {
  const double x = px + 0.5, y = py + 0.5;
  switch (s.type) {
    case ShapeType::rectangle: return px >= s.x0 && px < s.x0 + s.w && py >= s.y0 && py < s.y0 + s.h;
    case ShapeType::ellipse: {
      const double dx = (x - s.cx) / s.rx, dy = (y - s.cy) / s.ry;
      return dx * dx + dy * dy <= 1.0;
    }
    case ShapeType::triangle: {
      // apex up: (cx, cy - ry), base corners (cx -/+ rx, cy + ry)
      if (y > s.cy + s.ry || y < s.cy - s.ry) return false;
      const double t = (y - (s.cy - s.ry)) / (2.0 * s.ry);  // 0 at apex, 1 at base
      return std::abs(x - s.cx) <= t * s.rx;
    }
    case ShapeType::diamond: return std::abs(x - s.cx) / s.rx + std::abs(y - s.cy) / s.ry <= 1.0;
    case ShapeType::cross: {
      if (!(px >= s.x0 && px < s.x0 + s.w && py >= s.y0 && py < s.y0 + s.h)) return false;
      const int tw = std::max(1, s.w / 3), th = std::max(1, s.h / 3);
      const int vx0 = s.x0 + (s.w - tw) / 2, hy0 = s.y0 + (s.h - th) / 2;
      return (px >= vx0 && px < vx0 + tw) || (py >= hy0 && py < hy0 + th);
    }
  }
  return false;
}

SynthItem render_synthetic(int side, int k, Rng& rng) {
  if (k < 2 || k > kMaxSynthClasses)
    throw ArgumentError("synth: classes must lie in [2, " + std::to_string(kMaxSynthClasses) + "]");
  if (side < 16) throw ArgumentError("synth: side must be >= 16");
  SynthItem item;
  item.mask = LabelMask(side, side, 0);
  std::vector<double> rgb(static_cast<std::size_t>(3) * side * side);

  // textured background
  double base[3];
  for (double& b : base) b = rng.uniform(0.2, 0.8);
  const double amp = rng.uniform(0.08, 0.16);
  const double fx = rng.uniform(0.8, 1.6) * (rng.bernoulli(0.5) ? 1 : -1), fy = rng.uniform(0.8, 1.6),
               phase = rng.uniform(0.0, 2 * std::numbers::pi);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double t = amp * std::sin(fx * x + fy * y + phase);
      for (int c = 0; c < 3; ++c) rgb[(static_cast<std::size_t>(c) * side + y) * side + x] = base[c] + t * (c == 1 ? -1 : 1);
    }

  // one shape per foreground class, random draw order
  std::vector<int> classes(static_cast<std::size_t>(k - 1));
  std::iota(classes.begin(), classes.end(), 1);
  std::shuffle(classes.begin(), classes.end(), rng.engine());
  for (int cls : classes) {
    ShapeSpec s;
    s.cls = cls;
    s.type = static_cast<ShapeType>(cls - 1);
    const double size = rng.uniform(0.2, 0.4) * side;
    if (s.type == ShapeType::rectangle || s.type == ShapeType::cross) {
      s.w = std::clamp(static_cast<int>(std::lround(size * rng.uniform(0.7, 1.3))), 4, side - 2);
      s.h = std::clamp(static_cast<int>(std::lround(size * rng.uniform(0.7, 1.3))), 4, side - 2);
      s.x0 = rng.uniform_int(0, side - s.w);
      s.y0 = rng.uniform_int(0, side - s.h);
    } else {
      s.rx = 0.5 * size * rng.uniform(0.8, 1.2);
      s.ry = s.type == ShapeType::ellipse ? s.rx * rng.uniform(0.8, 1.2) : 0.5 * size * rng.uniform(0.8, 1.2);
      s.cx = rng.uniform(s.rx, side - s.rx);
      s.cy = rng.uniform(s.ry, side - s.ry);
    }
    for (int attempt = 0; attempt < 16; ++attempt) {
      for (double& c : s.color) c = rng.uniform(0.0, 1.0);
      const double diff =
          (std::abs(s.color[0] - base[0]) + std::abs(s.color[1] - base[1]) + std::abs(s.color[2] - base[2])) / 3.0;
      if (diff >= 0.15) break;
    }
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        if (shape_contains(s, x, y)) {
          item.mask.at(y, x) = cls;
          for (int c = 0; c < 3; ++c) rgb[(static_cast<std::size_t>(c) * side + y) * side + x] = s.color[c];
        }
    item.shapes.push_back(s);
  }

  // illumination jitter and sensor noise
  const double gain = rng.uniform(0.75, 1.25);
  const double gx = rng.uniform(-0.15, 0.15), gy = rng.uniform(-0.15, 0.15);
  item.noise = rng.uniform(0.02, 0.10);
  item.high_quality = item.noise < 0.05;
  item.image = ImageTensor({3, side, side});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        double v = rgb[(static_cast<std::size_t>(c) * side + y) * side + x] * gain;
        v += gx * (static_cast<double>(x) / side - 0.5) + gy * (static_cast<double>(y) / side - 0.5);
        v += rng.normal(0.0, item.noise);
        item.image(c, y, x) = static_cast<float>(quantize(v)) / 255.0f;
      }
  return item;
}

std::vector<SynthItem> generate_synthetic(int n_items, int side, int k, std::uint64_t seed) {
  if (n_items < 1) throw ArgumentError("synth: n_items must be >= 1");
  const Rng root(seed);
  std::vector<SynthItem> out;
  out.reserve(static_cast<std::size_t>(n_items));
  for (int i = 0; i < n_items; ++i) {
    Rng r = root.derive(static_cast<std::uint64_t>(i));
    out.push_back(render_synthetic(side, k, r));
  }
  return out;
}

DatasetIndex synth_dataset(const fs::path& root, int n_items, int side, int k, std::uint64_t seed) {
  const auto items = generate_synthetic(n_items, side, k, seed);
  ensure_dir(root / "images");
  ensure_dir(root / "masks");
  ensure_dir(root / "splits");
  DatasetIndex idx;
  idx.root = root;
  idx.num_classes = k;
  for (int i = 0; i < n_items; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%05d", i);
    DatasetItem it{std::string("images/") + name + ".ppm", std::string("masks/") + name + ".pgm",
                   items[i].high_quality};
    write_ppm(root / it.image, items[i].image);
    write_pgm(root / *it.mask, items[i].mask);
    idx.items.push_back(std::move(it));
  }
  save_index(idx);
  return idx;
}

}  // namespace semiseg
