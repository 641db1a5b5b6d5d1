#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "semiseg/rng.hpp"
#include "semiseg/tensor.hpp"

namespace semiseg {

struct DatasetItem {
  std::string image;                // relative to the dataset root
  std::optional<std::string> mask;  // relative to the dataset root
  bool high_quality = false;
  friend bool operator==(const DatasetItem&, const DatasetItem&) = default;
};

/// On-disk layout:
///   root/dataset.json  {"num_classes": K, "ignore_index": 255}
///   root/index.txt     "image_path mask_path|- hq(0/1)" per line
///   root/images/, root/masks/, root/splits/
struct DatasetIndex {
  std::filesystem::path root;
  std::vector<DatasetItem> items;
  int num_classes = 0;
  int ignore_index = kDefaultIgnoreIndex;
};

DatasetIndex load_index(const std::filesystem::path& root);
void save_index(const DatasetIndex& index);

enum class SplitProtocol { original_only, blended, prioritized_high_quality, fraction };
std::string to_string(SplitProtocol p);
SplitProtocol parse_split_protocol(std::string_view s);

struct SplitSpec {
  SplitProtocol protocol = SplitProtocol::blended;
  std::optional<int> n_labeled;
  std::optional<double> fraction;  // used when n_labeled is absent
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<std::size_t> labeled;    // indices into index.items
  std::vector<std::size_t> unlabeled;
};

/// Labeled count: n_labeled, or round(fraction * size).
int resolve_labeled_count(const SplitSpec& spec, std::size_t dataset_size);
Split make_splits(const DatasetIndex& index, const SplitSpec& spec);

/// "image mask" lines for labeled, "image" lines for unlabeled.
void write_split_files(const DatasetIndex& index, const Split& split, const std::filesystem::path& dir);
std::vector<DatasetItem> read_split_file(const std::filesystem::path& path);

struct BatchPlan {
  std::vector<std::size_t> labeled;    // positions in the labeled list
  std::vector<std::size_t> unlabeled;  // positions in the unlabeled list
  friend bool operator==(const BatchPlan&, const BatchPlan&) = default;
};

/// One epoch: max(ceil(|L|/b_l), ceil(|U|/b_u)) entries. Each list is
/// consumed as a concatenation of independent shuffles, so the shorter one
/// is oversampled and every item of the longer one appears at least once.
std::vector<BatchPlan> epoch_batches(std::size_t n_labeled, std::size_t n_unlabeled, int b_l, int b_u,
                                     std::uint64_t seed);

// Netpbm images: binary P6 (RGB) for images, P5 (8-bit index) for masks.
void write_ppm(const std::filesystem::path& path, const ImageTensor& image);
ImageTensor read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const LabelMask& mask);
LabelMask read_pgm(const std::filesystem::path& path, std::int32_t ignore_index = kDefaultIgnoreIndex);

struct Sample {
  ImageTensor image;
  std::optional<LabelMask> mask;
};
std::vector<Sample> load_items(const std::filesystem::path& root, const std::vector<DatasetItem>& items,
                               std::int32_t ignore_index);

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class ShapeType { rectangle, ellipse, triangle, diamond, cross };
inline constexpr int kMaxSynthClasses = 6;

/// Class c (1-based) is always drawn with shape type c-1.
struct ShapeSpec {
  int cls = 1;
  ShapeType type = ShapeType::rectangle;
  // rectangle/cross: integer box; others: centre and half extents
  int x0 = 0, y0 = 0, w = 0, h = 0;
  double cx = 0, cy = 0, rx = 0, ry = 0;
  double color[3] = {0, 0, 0};
};

/// Whether the pixel (px, py) (its centre) belongs to the shape.
bool shape_contains(const ShapeSpec& s, int px, int py);

struct SynthItem {
  ImageTensor image;  // values are multiples of 1/255
  LabelMask mask;
  std::vector<ShapeSpec> shapes;  // in draw order
  double noise = 0.0;
  bool high_quality = false;
};

/// k-1 shapes, one per foreground class, on a textured background.
SynthItem render_synthetic(int side, int k, Rng& rng);

/// Generates n items deterministically from `seed`. Returns in-memory items.
std::vector<SynthItem> generate_synthetic(int n_items, int side, int k, std::uint64_t seed);

/// Writes the dataset layout under `root` and returns its index.
DatasetIndex synth_dataset(const std::filesystem::path& root, int n_items, int side, int k, std::uint64_t seed);

}  // namespace semiseg
