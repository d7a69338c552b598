#include "tpmamba/seg_head.hpp"

#include "tpmamba/init.hpp"

#include <cmath>

namespace tpmamba {

void DecoderConfig::validate() const {
  if (channels <= 0 || n_taps <= 0 || stages <= 0) throw ConfigError("DecoderConfig: extents must be positive");
  if (classes < 2) throw ConfigError("DecoderConfig: need at least 2 classes, got " + std::to_string(classes));
  const auto w = stage_widths();
  if (static_cast<Index>(w.size()) != stages) {
    throw ConfigError("DecoderConfig: " + std::to_string(w.size()) + " stage widths for " + std::to_string(stages) +
                      " stages");
  }
  for (Index v : w) {
    if (v <= 0) throw ConfigError("DecoderConfig: stage widths must be positive");
  }
}

std::vector<Index> DecoderConfig::stage_widths() const {
  if (!widths.empty()) return widths;
  std::vector<Index> w;
  for (Index i = 0; i < stages; ++i) w.push_back(std::max<Index>(1, channels >> i));
  return w;
}

DecoderConfig DecoderConfig::for_encoder(const ViTConfig& vit, Index classes) {
  Index stages = 0;
  while ((Index{1} << stages) < vit.patch) ++stages;
  if ((Index{1} << stages) != vit.patch) {
    throw ConfigError("decoder needs a power-of-two patch size, got " + std::to_string(vit.patch));
  }
  DecoderConfig cfg;
  cfg.channels = vit.channels;
  cfg.classes = classes;
  cfg.n_taps = vit.n_outputs;
  cfg.stages = std::max<Index>(stages, 1);
  return cfg;
}

template <typename S>
Decoder<S>::Decoder(const DecoderConfig& cfg, std::mt19937_64& rng, const std::string& prefix) : cfg_(cfg) {
  cfg_.validate();
  const auto widths = cfg_.stage_widths();
  const Index fused_in = cfg.n_taps * cfg.channels;
  fuse_w_ = {prefix + ".fuse.weight", fan_in_uniform<S>({widths[0], fused_in, 1, 1, 1}, fused_in, rng), true};
  fuse_b_ = {prefix + ".fuse.bias", fan_in_uniform<S>({widths[0]}, fused_in, rng), true};
  Index in = widths[0];
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string name = prefix + ".stage." + std::to_string(i);
    const Index out = widths[i], fan = in * 27;
    stages_.push_back({{name + ".conv.weight", fan_in_uniform<S>({out, in, 3, 3, 3}, fan, rng), true},
                       {name + ".conv.bias", fan_in_uniform<S>({out}, fan, rng), true},
                       {name + ".norm.weight", Tensor<S>({out}, S(1)), true},
                       {name + ".norm.bias", Tensor<S>({out}), true}});
    in = out;
  }
  head_w_ = {prefix + ".head.weight", fan_in_uniform<S>({cfg.classes, in, 1, 1, 1}, in, rng), true};
  head_b_ = {prefix + ".head.bias", fan_in_uniform<S>({cfg.classes}, in, rng), true};
}

template <typename S>
Var<S> Decoder<S>::operator()(const std::vector<Var<S>>& taps, Index batch, Index depth) const {
  if (static_cast<Index>(taps.size()) != cfg_.n_taps) {
    throw DimensionError("decoder: expected " + std::to_string(cfg_.n_taps) + " taps, got " +
                         std::to_string(taps.size()));
  }
  const Shape ts = taps.front().shape();
  for (const Var<S>& t : taps) {
    if (t.shape() != ts) throw DimensionError("decoder: tap shapes differ: " + shape_str(t.shape()) + " vs " + shape_str(ts));
  }
  if (ts.size() != 4 || ts[1] != cfg_.channels || batch * depth != ts[0]) {
    throw DimensionError("decoder: taps " + shape_str(ts) + " do not match B=" + std::to_string(batch) +
                         ", D=" + std::to_string(depth) + ", C=" + std::to_string(cfg_.channels));
  }
  std::vector<Var<S>> vols;
  for (const Var<S>& t : taps) vols.push_back(permute(reshape(t, {batch, depth, ts[1], ts[2], ts[3]}), {0, 2, 1, 3, 4}));
  Var<S> x = conv3d(concat(vols, 1), fuse_w_.var, fuse_b_.var, Conv3dOptions{});
  const Conv3dOptions cube = Conv3dOptions::same({3, 3, 3}, {1, 1, 1});
  for (const Stage& s : stages_) {
    x = conv3d(x, s.conv_w.var, s.conv_b.var, cube);
    x = gelu(instance_norm(x, s.norm_g.var, s.norm_b.var));
    x = upsample_hw(x, 2);
  }
  return conv3d(x, head_w_.var, head_b_.var, Conv3dOptions{});
}

template <typename S>
void Decoder<S>::collect(ParameterList<S>& out) {
  out.push_back(&fuse_w_);
  out.push_back(&fuse_b_);
  for (Stage& s : stages_) {
    for (Parameter<S>* p : {&s.conv_w, &s.conv_b, &s.norm_g, &s.norm_b}) out.push_back(p);
  }
  out.push_back(&head_w_);
  out.push_back(&head_b_);
}

template <typename S>
LossTerms<S> dice_ce_loss(const Var<S>& logits, const LabelMap& labels) {
  const Shape& ls = logits.shape();
  if (ls.size() != 5) throw DimensionError("dice_ce_loss: logits must be [B, K, D, H, W], got " + shape_str(ls));
  const Shape expect{ls[0], ls[2], ls[3], ls[4]};
  if (labels.shape() != expect) {
    throw DimensionError("dice_ce_loss: labels " + shape_str(labels.shape()) + " vs logits " + shape_str(ls));
  }
  const Index batch = ls[0], k_classes = ls[1], vox = ls[2] * ls[3] * ls[4];
  const Index total = batch * vox;
  for (Index i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k_classes) {
      throw InputError("dice_ce_loss: label " + std::to_string(labels[i]) + " out of range for " +
                       std::to_string(k_classes) + " classes");
    }
  }
  const Tensor<S>& z = logits.value();
  auto probs = std::make_shared<Tensor<S>>(ls);
  double ce = 0;
  std::vector<double> inter(k_classes, 0.0), psum(k_classes, 0.0), gsum(k_classes, 0.0);
  for (Index b = 0; b < batch; ++b) {
    const S* zb = z.data() + b * k_classes * vox;
    S* pb = probs->data() + b * k_classes * vox;
    for (Index v = 0; v < vox; ++v) {
      S mx = zb[v];
      for (Index k = 1; k < k_classes; ++k) mx = std::max(mx, zb[k * vox + v]);
      double denom = 0;
      for (Index k = 0; k < k_classes; ++k) denom += std::exp(static_cast<double>(zb[k * vox + v] - mx));
      const Index y = labels[b * vox + v];
      const double log_denom = std::log(denom);
      ce -= static_cast<double>(zb[y * vox + v] - mx) - log_denom;
      for (Index k = 0; k < k_classes; ++k) {
        const double p = std::exp(static_cast<double>(zb[k * vox + v] - mx) - log_denom);
        pb[k * vox + v] = static_cast<S>(p);
        psum[k] += p;
        if (k == y) inter[k] += p;
      }
      gsum[y] += 1.0;
    }
  }
  ce /= static_cast<double>(total);
  double dice_mean = 0;
  for (Index k = 0; k < k_classes; ++k) {
    dice_mean += (2 * inter[k] + kDiceSmooth) / (psum[k] + gsum[k] + kDiceSmooth);
  }
  dice_mean /= static_cast<double>(k_classes);
  const double dice_loss = 1.0 - dice_mean;

  LossTerms<S> terms;
  terms.cross_entropy = ce;
  terms.dice_loss = dice_loss;
  terms.total = Var<S>(Tensor<S>(Shape{}, static_cast<S>(ce + dice_loss)));
  if (auto* tape = recording<S>({&logits})) {
    terms.total.set_requires_grad(true);
    tape->record([ln = logits.node(), on = terms.total.node(), probs, labels, inter, psum, gsum, batch, k_classes,
                  vox, total] {
      if (!on->has_grad()) return;
      const double seed = on->grad[0];
      Tensor<S>& dz = ln->grad_buffer();
      std::vector<double> g(k_classes);
      for (Index b = 0; b < batch; ++b) {
        const S* pb = probs->data() + b * k_classes * vox;
        S* db = dz.data() + b * k_classes * vox;
        for (Index v = 0; v < vox; ++v) {
          const Index y = labels[b * vox + v];
          double dot = 0;
          for (Index k = 0; k < k_classes; ++k) {
            const double denom = psum[k] + gsum[k] + kDiceSmooth;
            const double num = 2 * inter[k] + kDiceSmooth;
            const double yk = k == y ? 1.0 : 0.0;
            g[k] = -(2 * yk * denom - num) / (denom * denom) / static_cast<double>(k_classes);
            dot += g[k] * pb[k * vox + v];
          }
          for (Index k = 0; k < k_classes; ++k) {
            const double p = pb[k * vox + v];
            const double yk = k == y ? 1.0 : 0.0;
            const double d_ce = (p - yk) / static_cast<double>(total);
            const double d_dice = p * (g[k] - dot);
            db[k * vox + v] += static_cast<S>(seed * (d_ce + d_dice));
          }
        }
      }
    });
  }
  return terms;
}

DiceResult dice_score(const LabelMap& pred, const LabelMap& truth, Index classes) {
  if (pred.shape() != truth.shape()) {
    throw DimensionError("dice_score: prediction " + shape_str(pred.shape()) + " vs truth " + shape_str(truth.shape()));
  }
  std::vector<Index> p(classes, 0), g(classes, 0), both(classes, 0);
  for (Index i = 0; i < pred.size(); ++i) {
    const Index a = pred[i], b = truth[i];
    if (a < classes) ++p[a];
    if (b < classes) ++g[b];
    if (a == b && a < classes) ++both[a];
  }
  DiceResult r;
  for (Index k = 1; k < classes; ++k) {
    const double d = (p[k] + g[k] == 0) ? 1.0 : 2.0 * static_cast<double>(both[k]) / static_cast<double>(p[k] + g[k]);
    r.per_class.push_back(d);
    r.mean += d;
  }
  if (!r.per_class.empty()) r.mean /= static_cast<double>(r.per_class.size());
  return r;
}

template <typename S>
LabelMap argmax_labels(const Tensor<S>& logits) {
  if (logits.rank() != 5) throw DimensionError("argmax_labels: expected [B, K, D, H, W], got " + shape_str(logits.shape()));
  const Index batch = logits.dim(0), k_classes = logits.dim(1), vox = logits.dim(2) * logits.dim(3) * logits.dim(4);
  LabelMap out(Shape{batch, logits.dim(2), logits.dim(3), logits.dim(4)});
  for (Index b = 0; b < batch; ++b) {
    const S* zb = logits.data() + b * k_classes * vox;
    for (Index v = 0; v < vox; ++v) {
      Index best = 0;
      for (Index k = 1; k < k_classes; ++k) {
        if (zb[k * vox + v] > zb[best * vox + v]) best = k;
      }
      out[b * vox + v] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

std::vector<Index> window_starts(Index extent, Index window, double overlap) {
  if (extent <= window) return {0};
  const Index stride = std::max<Index>(1, static_cast<Index>(std::floor(static_cast<double>(window) * (1.0 - overlap))));
  std::vector<Index> starts;
  for (Index s = 0; s + window < extent; s += stride) starts.push_back(s);
  if (starts.empty() || starts.back() != extent - window) starts.push_back(extent - window);
  return starts;
}

template <typename S>
Tensor<S> gaussian_importance(const std::array<Index, 3>& window) {
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const double centre = (static_cast<double>(window[a]) - 1.0) / 2.0;
    const double sigma = static_cast<double>(window[a]) / 8.0;
    for (Index i = 0; i < window[a]; ++i) {
      const double d = static_cast<double>(i) - centre;
      axis[a].push_back(std::exp(-d * d / (2 * sigma * sigma)));
    }
  }
  Tensor<S> w({window[0], window[1], window[2]});
  for (Index z = 0; z < window[0]; ++z) {
    for (Index y = 0; y < window[1]; ++y) {
      for (Index x = 0; x < window[2]; ++x) {
        w.at({z, y, x}) = static_cast<S>(axis[0][z] * axis[1][y] * axis[2][x]);
      }
    }
  }
  return w;
}

namespace {

template <typename S>
Tensor<S> softmax_classes(const Tensor<S>& logits) {
  NoGradScope<S> off;
  return softmax(constant(logits), 1).value();
}

/// Copies box [start, start + extent) of a [C, D, H, W] block into a [C, d, h, w] tensor.
template <typename S>
void copy_box(const S* src, const std::array<Index, 3>& src_dims, Index channels, const std::array<Index, 3>& start,
              const std::array<Index, 3>& extent, S* dst) {
  for (Index c = 0; c < channels; ++c) {
    for (Index z = 0; z < extent[0]; ++z) {
      for (Index y = 0; y < extent[1]; ++y) {
        const S* row = src + ((c * src_dims[0] + start[0] + z) * src_dims[1] + start[1] + y) * src_dims[2] + start[2];
        std::copy_n(row, extent[2], dst + ((c * extent[0] + z) * extent[1] + y) * extent[2]);
      }
    }
  }
}

}  // namespace

template <typename S>
SegmentationOutput<S> sliding_window_infer(const Tensor<S>& volume, const WindowModel<S>& model,
                                           const SlidingWindowOptions& opt) {
  if (volume.rank() != 5 || volume.dim(0) != 1 || volume.dim(1) != 1) {
    throw DimensionError("sliding_window_infer: expected [1, 1, D, H, W], got " + shape_str(volume.shape()));
  }
  if (volume.size() == 0) throw InputError("sliding_window_infer: empty volume");
  const std::array<Index, 3> dims{volume.dim(2), volume.dim(3), volume.dim(4)};
  const auto& win = opt.window;
  std::array<Index, 3> padded{}, before{};
  for (int a = 0; a < 3; ++a) {
    padded[a] = std::max(dims[a], win[a]);
    before[a] = (padded[a] - dims[a]) / 2;
  }
  Tensor<S> input({1, 1, padded[0], padded[1], padded[2]}, volume.array().minCoeff());
  for (Index z = 0; z < dims[0]; ++z) {
    for (Index y = 0; y < dims[1]; ++y) {
      std::copy_n(volume.data() + (z * dims[1] + y) * dims[2], dims[2],
                  input.data() + ((z + before[0]) * padded[1] + y + before[1]) * padded[2] + before[2]);
    }
  }

  const auto zs = window_starts(padded[0], win[0], opt.overlap);
  const auto ys = window_starts(padded[1], win[1], opt.overlap);
  const auto xs = window_starts(padded[2], win[2], opt.overlap);

  Tensor<S> blended;
  Index k_classes = 0;
  if (zs.size() == 1 && ys.size() == 1 && xs.size() == 1 && padded == win) {
    blended = model(input);
    k_classes = blended.dim(1);
  } else {
    const Tensor<S> importance = gaussian_importance<S>(win);
    Tensor<S> acc, weight({padded[0], padded[1], padded[2]});
    Tensor<S> crop({1, 1, win[0], win[1], win[2]});
    const Index win_vox = win[0] * win[1] * win[2];
    for (Index z0 : zs) {
      for (Index y0 : ys) {
        for (Index x0 : xs) {
          copy_box(input.data(), padded, 1, {z0, y0, x0}, win, crop.data());
          const Tensor<S> out = model(crop);
          if (acc.size() == 0) {
            k_classes = out.dim(1);
            acc = Tensor<S>({k_classes, padded[0], padded[1], padded[2]});
          }
          for (Index k = 0; k < k_classes; ++k) {
            for (Index z = 0; z < win[0]; ++z) {
              for (Index y = 0; y < win[1]; ++y) {
                for (Index x = 0; x < win[2]; ++x) {
                  const Index wi = (z * win[1] + y) * win[2] + x;
                  const Index gi = ((z0 + z) * padded[1] + y0 + y) * padded[2] + x0 + x;
                  acc[k * padded[0] * padded[1] * padded[2] + gi] += out[k * win_vox + wi] * importance[wi];
                  if (k == 0) weight[gi] += importance[wi];
                }
              }
            }
          }
        }
      }
    }
    const Index vox = padded[0] * padded[1] * padded[2];
    blended = Tensor<S>({1, k_classes, padded[0], padded[1], padded[2]});
    for (Index k = 0; k < k_classes; ++k) {
      for (Index i = 0; i < vox; ++i) blended[k * vox + i] = acc[k * vox + i] / weight[i];
    }
  }

  SegmentationOutput<S> result;
  result.logits = Tensor<S>({1, k_classes, dims[0], dims[1], dims[2]});
  copy_box(blended.data(), padded, k_classes, before, dims, result.logits.data());
  result.probabilities = softmax_classes(result.logits);
  result.labels = argmax_labels(result.logits);
  return result;
}

template <typename S>
SegmentationModel<S>::SegmentationModel(const ViTConfig& vit, Index classes, std::uint64_t seed)
    : rng_(seed), encoder_(vit, rng_), decoder_(DecoderConfig::for_encoder(vit, classes), rng_) {
  freeze_partition(parameters());
}

template <typename S>
Var<S> SegmentationModel<S>::operator()(const Var<S>& x, const EncoderPaths& paths) const {
  return decoder_(encoder_(x, paths), x.dim(0), x.dim(2));
}

template <typename S>
ParameterList<S> SegmentationModel<S>::parameters() {
  ParameterList<S> out;
  encoder_.collect(out);
  decoder_.collect(out);
  return out;
}

#define TPMAMBA_INSTANTIATE_SEG(S)                                                                              \
  template class Decoder<S>;                                                                                    \
  template LossTerms<S> dice_ce_loss(const Var<S>&, const LabelMap&);                                           \
  template LabelMap argmax_labels(const Tensor<S>&);                                                            \
  template Tensor<S> gaussian_importance(const std::array<Index, 3>&);                                          \
  template SegmentationOutput<S> sliding_window_infer(const Tensor<S>&, const WindowModel<S>&,                  \
                                                      const SlidingWindowOptions&);                             \
  template class SegmentationModel<S>;

TPMAMBA_INSTANTIATE_SEG(float)
TPMAMBA_INSTANTIATE_SEG(double)

#undef TPMAMBA_INSTANTIATE_SEG

}  // namespace tpmamba
