#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "semiseg/nn.hpp"

namespace semiseg {

/// Per-parameter gradient buffers, same order as SegModel::parameters().
template <typename T>
using Gradients = std::vector<Tensor<T>>;

/// Activations retained by one forward stream.
template <typename T>
struct ForwardTrace {
  Trace<T> encoder;
  Trace<T> decoder;
  int feat_h = 0;
  int feat_w = 0;
};

/// Encoder g, decoder h, F = h(g(x)) with logits bilinearly upsampled to the
/// input resolution. One parameter set serves both pseudo labeling and
/// training.
template <typename T>
class SegModel {
 public:
  SegModel(std::unique_ptr<Module<T>> encoder, std::unique_ptr<Module<T>> decoder)
      : encoder_(std::move(encoder)), decoder_(std::move(decoder)) {
    if (!encoder_ || !decoder_) throw ArgumentError("SegModel: null encoder/decoder");
    if (encoder_->out_channels() != decoder_->in_channels())
      throw ArgumentError("SegModel: encoder output channels differ from decoder input channels");
    if (decoder_->out_channels() < 2) throw ArgumentError("SegModel: need at least 2 classes");
  }
  SegModel(const SegModel& o) : encoder_(o.encoder_->clone()), decoder_(o.decoder_->clone()) {}
  SegModel& operator=(const SegModel& o) {
    if (this != &o) {
      encoder_ = o.encoder_->clone();
      decoder_ = o.decoder_->clone();
    }
    return *this;
  }
  SegModel(SegModel&&) noexcept = default;
  SegModel& operator=(SegModel&&) noexcept = default;

  [[nodiscard]] int num_classes() const { return decoder_->out_channels(); }
  [[nodiscard]] int feature_dim() const { return encoder_->out_channels(); }
  [[nodiscard]] int in_channels() const { return encoder_->in_channels(); }
  /// Total downsampling factor of the encoder.
  [[nodiscard]] int stride() const { return encoder_->stride(); }

  [[nodiscard]] const Module<T>& encoder() const { return *encoder_; }
  [[nodiscard]] const Module<T>& decoder() const { return *decoder_; }

  /// Images N x C x H x W -> features N x D x h x w.
  [[nodiscard]] Tensor<T> encode(const Tensor<T>& images, Trace<T>* trace = nullptr) const {
    if (images.rank() != 4 || images.dim(1) != in_channels())
      throw ArgumentError("encode: expected N x " + std::to_string(in_channels()) + " x H x W images");
    return encoder_->forward(images, trace);
  }

  /// Features -> logits N x K x out_h x out_w.
  [[nodiscard]] Tensor<T> decode(const Tensor<T>& feat, int out_h, int out_w, Trace<T>* trace = nullptr,
                                 const LayerHook<T>* hook = nullptr) const {
    if (feat.rank() != 4 || feat.dim(1) != feature_dim())
      throw ArgumentError("decode: expected N x " + std::to_string(feature_dim()) + " x h x w features");
    return upsample_bilinear(decoder_->forward(feat, trace, hook), out_h, out_w);
  }
  /// Output resolution defaults to feature size times the stride.
  [[nodiscard]] Tensor<T> decode(const Tensor<T>& feat) const {
    return decode(feat, feat.dim(2) * encoder_->stride(), feat.dim(3) * encoder_->stride());
  }

  [[nodiscard]] Tensor<T> forward(const Tensor<T>& images, ForwardTrace<T>* trace = nullptr) const {
    Tensor<T> feat = encode(images, trace ? &trace->encoder : nullptr);
    if (trace) {
      trace->feat_h = feat.dim(2);
      trace->feat_w = feat.dim(3);
    }
    return decode(feat, images.dim(2), images.dim(3), trace ? &trace->decoder : nullptr);
  }

  [[nodiscard]] Tensor<T> predict(const Tensor<T>& images) const { return softmax_channels(forward(images)); }

  /// dL/dfeat from dL/dlogits; accumulates decoder grads when `grads` given.
  Tensor<T> decode_backward(const Trace<T>& trace, const Tensor<T>& grad_logits, Gradients<T>* grads) const {
    const Tensor<T>& small = trace.saved.back();
    Tensor<T> g = upsample_bilinear_backward(grad_logits, small.dim(2), small.dim(3));
    return decoder_->backward(trace, g, grads ? decoder_grads(*grads) : std::span<Tensor<T>>{});
  }

  void encode_backward(const Trace<T>& trace, const Tensor<T>& grad_feat, Gradients<T>& grads) const {
    (void)encoder_->backward(trace, grad_feat, encoder_grads(grads));
  }

  /// Canonical parameter order: encoder then decoder.
  std::vector<NamedParam<T>> parameters() {
    auto out = encoder_->parameters();
    for (auto& p : decoder_->parameters()) out.push_back(p);
    return out;
  }
  [[nodiscard]] std::vector<const Tensor<T>*> parameters() const {
    auto out = std::as_const(*encoder_).parameters();
    for (auto* p : std::as_const(*decoder_).parameters()) out.push_back(p);
    return out;
  }

  [[nodiscard]] std::vector<std::string> parameter_names() const {
    auto out = encoder_->parameter_names();
    for (auto& n : decoder_->parameter_names()) out.push_back(n);
    return out;
  }

  [[nodiscard]] Gradients<T> zero_gradients() const {
    Gradients<T> g;
    for (const auto* p : parameters()) g.emplace_back(p->shape());
    return g;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
  }

  /// FNV-1a over the raw parameter bytes.
  [[nodiscard]] std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* p : parameters()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p->data());
      for (std::size_t i = 0; i < p->size() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    }
    return h;
  }

 private:
  std::span<Tensor<T>> encoder_grads(Gradients<T>& g) const {
    return std::span<Tensor<T>>(g).subspan(0, std::as_const(*encoder_).parameters().size());
  }
  std::span<Tensor<T>> decoder_grads(Gradients<T>& g) const {
    return std::span<Tensor<T>>(g).subspan(std::as_const(*encoder_).parameters().size());
  }

  std::unique_ptr<Module<T>> encoder_;
  std::unique_ptr<Module<T>> decoder_;
};

/// Layout of the reference network: stride-2 blocks followed by stride-1
/// blocks in the encoder, a 3x3 block and a 1x1 classifier in the decoder.
struct TinyNetConfig {
  int in_channels = 3;
  int num_classes = 3;
  std::vector<int> encoder_widths{16, 32, 32, 32};
  std::vector<int> encoder_strides{2, 2, 1, 1};
  int decoder_width = 32;

  [[nodiscard]] int feature_dim() const { return encoder_widths.back(); }
  void validate() const;
};

template <typename T>
SegModel<T> make_tiny_segnet(const TinyNetConfig& cfg, Rng& init_rng) {
  cfg.validate();
  std::vector<ConvSpec> enc;
  int ch = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.encoder_widths.size(); ++i) {
    enc.push_back({ch, cfg.encoder_widths[i], 3, cfg.encoder_strides[i], true});
    ch = cfg.encoder_widths[i];
  }
  std::vector<ConvSpec> dec{{ch, cfg.decoder_width, 3, 1, true}, {cfg.decoder_width, cfg.num_classes, 1, 1, false}};
  auto e = std::make_unique<ConvStack<T>>("encoder", enc);
  auto d = std::make_unique<ConvStack<T>>("decoder", dec);
  e->init(init_rng);
  d->init(init_rng);
  e->set_need_input_grad(false);
  return SegModel<T>(std::move(e), std::move(d));
}

/// Change detection: decoder applied to g(a) - g(b), upsampled to the input
/// size. The signed difference is used.
template <typename T>
Tensor<T> cd_forward(const SegModel<T>& model, const Tensor<T>& image_a, const Tensor<T>& image_b,
                     Tensor<T>* feature_difference = nullptr) {
  if (!image_a.same_shape(image_b)) throw ArgumentError("cd_forward: image pair differs in shape");
  Tensor<T> diff = model.encode(image_a);
  diff -= model.encode(image_b);
  Tensor<T> logits = model.decode(diff, image_a.dim(2), image_a.dim(3));
  if (feature_difference) *feature_difference = std::move(diff);
  return logits;
}

// Checkpoints: versioned little-endian binary.
//   "SSEGCKPT" | u32 version | i32 K, D, stride, in_channels | u64 config_hash
//   | u32 layout_len, layout json | u32 count | per param: u32 name_len, name,
//   u32 rank, i32 dims..., f32 values...
struct CheckpointMeta {
  int num_classes = 0;
  int feature_dim = 0;
  int stride = 0;
  int in_channels = 0;
  std::uint64_t config_hash = 0;
  TinyNetConfig layout;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const SegModel<float>& model, const TinyNetConfig& layout,
                     std::uint64_t config_hash);
/// Rebuilds the network from the stored layout and loads all parameters.
SegModel<float> load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace semiseg
