#pragma once

// Implementation of train_step; included from consistency.hpp.

#include <cmath>
#include <optional>

namespace semiseg {
namespace detail {

inline void check_loss(double v, const std::string& stream) {
  if (!std::isfinite(v)) throw NumericError("train_step: non-finite loss in stream '" + stream + "'");
}

template <typename T>
void scale(Tensor<T>& t, double s) {
  const T f = static_cast<T>(s);
  for (auto& v : t.values()) v *= f;
}

/// Feature perturbation applied at the configured location of a decoder pass.
template <typename T>
class StreamPerturber {
 public:
  StreamPerturber(const SegModel<T>& model, const FeaturePerturbSpec& spec) : model_(model), spec_(spec) {
    const int layers = static_cast<int>(std::as_const(model.decoder()).parameters().size() / 2);
    if (spec.location == PerturbLocation::pre_classifier) {
      hook_layer_ = layers - 1;
      if (hook_layer_ < 1) throw ConfigError("pre_classifier perturbation needs a decoder with >= 2 layers");
      if (spec.kind == PerturbKind::vat) {
        const auto* stack = dynamic_cast<const ConvStack<T>*>(&model.decoder());
        if (!stack) throw ConfigError("pre_classifier VAT needs a ConvStack decoder");
        tail_.emplace(stack->slice(static_cast<std::size_t>(hook_layer_), static_cast<std::size_t>(layers)));
        tail_map_.emplace(*tail_);
      }
    } else if (spec.kind == PerturbKind::vat) {
      full_map_.emplace(model.decoder());
    }
  }

  /// Perturbed decode of `feat`; fills `dtr` and, for the encoder/decoder
  /// location, `pert` (whose backward maps decoder input grads to feat grads).
  Tensor<T> decode(const Tensor<T>& feat, int H, int W, Trace<T>& dtr, Perturbed<T>& pert, Rng rng) const {
    if (spec_.location == PerturbLocation::encoder_decoder) {
      pert = apply_perturbation(feat, spec_, rng, full_map_ ? &*full_map_ : nullptr);
      return model_.decode(pert.output, H, W, &dtr);
    }
    pert = Perturbed<T>{};
    const DifferentiableMap<T>* tail = tail_map_ ? &*tail_map_ : nullptr;
    LayerHook<T> hook{hook_layer_, [&](const Tensor<T>& x) { return apply_perturbation(x, spec_, rng, tail); }};
    return model_.decode(feat, H, W, &dtr, &hook);
  }

  /// Gradient w.r.t. the unperturbed features.
  Tensor<T> backward(const Trace<T>& dtr, const Perturbed<T>& pert, const Tensor<T>& grad_logits,
                     Gradients<T>& grads) const {
    Tensor<T> g = model_.decode_backward(dtr, grad_logits, &grads);
    return spec_.location == PerturbLocation::encoder_decoder ? pert.backward(std::move(g)) : g;
  }

 private:
  const SegModel<T>& model_;
  const FeaturePerturbSpec& spec_;
  int hook_layer_ = -1;
  std::optional<ConvStack<T>> tail_;
  std::optional<ModuleMap<T>> tail_map_;
  std::optional<ModuleMap<T>> full_map_;
};

}  // namespace detail

template <typename T>
StepMetrics train_step(const SegModel<T>& model, Gradients<T>& grads, const StepInputs& in, const VariantConfig& cfg,
                       const AugPipelineConfig& aug, const FeaturePerturbSpec& fp, const StepRng& rng,
                       const StepOptions<T>& opts) {
  cfg.validate();
  aug.validate();
  fp.validate();
  if (in.labeled_images.empty() || in.labeled_images.size() != in.labeled_masks.size())
    throw ArgumentError("train_step: need a non-empty labeled batch with one mask per image");
  if (cfg.uses_unlabeled() && in.unlabeled_images.empty()) throw ArgumentError("train_step: empty unlabeled batch");
  if (grads.size() != model.parameters().size()) throw ArgumentError("train_step: gradient buffers do not match model");

  StepMetrics m;
  StepTrace<T>* trace = opts.trace;

  // Supervised term.
  {
    Rng lrng = rng.augment.derive("labeled");
    std::vector<ImageTensor> xs;
    std::vector<LabelMask> ys;
    for (std::size_t i = 0; i < in.labeled_images.size(); ++i) {
      auto r = weak_augment(in.labeled_images[i], in.labeled_masks[i], aug, lrng);
      xs.push_back(std::move(r.image));
      ys.push_back(std::move(*r.mask));
    }
    const Tensor<T> X = stack<T>(std::span<const ImageTensor>(xs));
    ForwardTrace<T> tr;
    const Tensor<T> logits = model.forward(X, &tr);
    LossResult<T> sup;
    if (opts.ohem) {
      const int min_kept = opts.ohem->min_kept > 0 ? opts.ohem->min_kept
                                                   : std::max(1, static_cast<int>(X.dim(0) * X.dim(2) * X.dim(3) / 16));
      sup = ohem_ce(logits, std::span<const LabelMask>(ys), opts.ohem->thresh, min_kept);
    } else {
      sup = cross_entropy(logits, std::span<const LabelMask>(ys));
    }
    detail::check_loss(sup.value, "supervised");
    m.loss_s = sup.value;
    if (sup.count > 0) {
      detail::scale(sup.grad, 0.5);
      const Tensor<T> gfeat = model.decode_backward(tr.decoder, sup.grad, &grads);
      model.encode_backward(tr.encoder, gfeat, grads);
    }
    if (trace) {
      trace->sup_logits = logits;
      trace->sup_masks = std::move(ys);
    }
  }

  if (!cfg.uses_unlabeled()) {
    m.loss_total = 0.5 * m.loss_s;
    return m;
  }

  // Weak views and pseudo labels (no gradient flows into the labels).
  const int B = static_cast<int>(in.unlabeled_images.size());
  std::vector<ImageTensor> weak;
  std::vector<std::uint8_t> region;
  {
    Rng wrng = rng.augment.derive("weak");
    for (const auto& img : in.unlabeled_images) {
      auto r = weak_augment(img, LabelMask(img.dim(1), img.dim(2), 0), aug, wrng);
      weak.push_back(std::move(r.image));
      for (auto v : r.mask->data) region.push_back(v != r.mask->ignore_index ? 1 : 0);
    }
  }
  const Tensor<T> Xw = stack<T>(std::span<const ImageTensor>(weak));
  const int H = Xw.dim(2), W = Xw.dim(3);
  Trace<T> enc_tr;
  const Tensor<T> feat_w = model.encode(Xw, &enc_tr);
  const Tensor<T> logits_w = model.decode(feat_w, H, W);
  PseudoLabel pl;
  if (opts.pseudo_override) {
    pl = *opts.pseudo_override;
    if (pl.n != B || pl.height != H || pl.width != W) throw ArgumentError("train_step: pseudo label override shape");
  } else {
    pl = pseudo_label(softmax_channels(logits_w), cfg.tau);
  }
  std::size_t region_count = 0;
  for (std::size_t i = 0; i < region.size(); ++i) {
    region_count += region[i];
    if (!region[i]) pl.valid[i] = 0;
  }
  m.mask_ratio = region_count ? static_cast<double>(pl.valid_count()) / static_cast<double>(region_count) : 0.0;
  if (trace) {
    trace->weak_logits = logits_w;
    trace->pseudo = pl;
  }

  const detail::StreamPerturber<T> perturber(model, fp);

  // Feature-perturbation streams on the weak view's features.
  if (cfg.n_feature_streams > 0) {
    const double weight = cfg.lambda / cfg.n_feature_streams;
    Tensor<T> gfeat;
    const Rng frng = rng.dropout.derive("feature");
    for (int f = 0; f < cfg.n_feature_streams; ++f) {
      Trace<T> dtr;
      Perturbed<T> pert;
      const Tensor<T> logits = perturber.decode(feat_w, H, W, dtr, pert, frng.derive(static_cast<std::uint64_t>(f)));
      LossResult<T> loss = masked_ce(logits, pl);
      detail::check_loss(loss.value, "feature[" + std::to_string(f) + "]");
      m.fp_losses.push_back(loss.value);
      if (weight > 0.0 && loss.count > 0) {
        detail::scale(loss.grad, 0.5 * weight);
        Tensor<T> g = perturber.backward(dtr, pert, loss.grad, grads);
        if (gfeat.empty())
          gfeat = std::move(g);
        else
          gfeat += g;
      }
      if (trace) trace->fp_logits.push_back(logits);
    }
    if (!gfeat.empty()) model.encode_backward(enc_tr, gfeat, grads);
  }

  // Image-level strong streams.
  if (cfg.n_image_streams > 0) {
    const double weight = cfg.mu / cfg.n_image_streams;
    const Rng srng = rng.augment.derive("strong");
    const Rng hrng = rng.dropout.derive("hybrid");
    for (int s = 0; s < cfg.n_image_streams; ++s) {
      Rng vrng = srng.derive(static_cast<std::uint64_t>(s));
      std::vector<ImageTensor> views;
      std::vector<AugRecord> records(static_cast<std::size_t>(B));
      PseudoLabel target = pl;
      if (aug.strong_enabled) {
        for (int i = 0; i < B; ++i) {
          auto [img, rec] = strong_color(weak[i], aug, vrng);
          views.push_back(std::move(img));
          records[i] = std::move(rec);
        }
        std::vector<LabelMask> hard;
        for (int i = 0; i < B; ++i) hard.push_back(pl.hard_mask(i));
        CutMixResult mix =
            cutmix_batch(views, hard, aug.cutmix_prob, vrng, aug.cutmix_area_min, aug.cutmix_area_max);
        views = std::move(mix.images);
        const std::size_t P = pl.plane();
        for (int i = 0; i < B; ++i) {
          std::copy(mix.masks[i].data.begin(), mix.masks[i].data.end(), target.hard.begin() + static_cast<std::ptrdiff_t>(P * i));
          const auto& r = mix.records[i];
          if (r.cutmix_box) {
            const Rect& bx = *r.cutmix_box;
            const std::size_t j = static_cast<std::size_t>(*r.cutmix_partner);
            for (int y = bx.y; y < bx.y + bx.h; ++y)
              for (int x = bx.x; x < bx.x + bx.w; ++x) target.valid[P * i + y * W + x] = pl.valid[P * j + y * W + x];
          }
          records[i].cutmix_box = r.cutmix_box;
          records[i].cutmix_partner = r.cutmix_partner;
          records[i].cutmix_skipped = r.cutmix_skipped;
        }
      } else {
        views = weak;
      }
      const Tensor<T> Xs = stack<T>(std::span<const ImageTensor>(views));
      const std::string name = (cfg.hybrid ? "hybrid[" : "strong[") + std::to_string(s) + "]";

      Trace<T> etr, dtr;
      Perturbed<T> pert;
      ForwardTrace<T> ftr;
      Tensor<T> logits;
      if (cfg.hybrid) {
        const Tensor<T> feat_s = model.encode(Xs, &etr);
        logits = perturber.decode(feat_s, H, W, dtr, pert, hrng.derive(static_cast<std::uint64_t>(s)));
      } else {
        logits = model.forward(Xs, &ftr);
      }
      LossResult<T> loss = masked_ce(logits, target);
      detail::check_loss(loss.value, name);
      m.strong_losses.push_back(loss.value);
      if (weight > 0.0 && loss.count > 0) {
        detail::scale(loss.grad, 0.5 * weight);
        if (cfg.hybrid) {
          const Tensor<T> g = perturber.backward(dtr, pert, loss.grad, grads);
          model.encode_backward(etr, g, grads);
        } else {
          const Tensor<T> g = model.decode_backward(ftr.decoder, loss.grad, &grads);
          model.encode_backward(ftr.encoder, g, grads);
        }
      }
      if (trace) {
        trace->strong_logits.push_back(std::move(logits));
        trace->strong_targets.push_back(std::move(target));
        trace->strong_records.push_back(std::move(records));
      }
    }
  }

  m.loss_u = combine_unsup(m.fp_losses, m.strong_losses, cfg);
  m.loss_total = 0.5 * (m.loss_s + m.loss_u);
  detail::check_loss(m.loss_total, "total");
  return m;
}

}  // namespace semiseg
