#pragma once

#include "tpmamba/encoder.hpp"

#include <array>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace tpmamba {

struct DecoderConfig {
  Index channels = 96;  // tap width C
  Index classes = 2;    // K, background is class 0
  Index n_taps = 4;
  Index stages = 4;     // each stage upsamples H, W by 2; 2^stages == patch
  std::vector<Index> widths;  // empty selects {C, C/2, C/4, C/8}

  void validate() const;
  std::vector<Index> stage_widths() const;
  /// Decoder matching an encoder: 2^stages must equal the patch size.
  static DecoderConfig for_encoder(const ViTConfig& vit, Index classes);
};

template <typename S>
class Decoder {
 public:
  struct Stage {
    Parameter<S> conv_w, conv_b, norm_g, norm_b;
  };

  Decoder(const DecoderConfig& cfg, std::mt19937_64& rng, const std::string& prefix = "decoder");

  /// taps: n_taps x [B*D, C, h, w] -> logits [B, K, D, h * 2^stages, w * 2^stages].
  Var<S> operator()(const std::vector<Var<S>>& taps, Index batch, Index depth) const;

  const DecoderConfig& config() const { return cfg_; }
  void collect(ParameterList<S>& out);

 private:
  DecoderConfig cfg_;
  Parameter<S> fuse_w_, fuse_b_;
  std::vector<Stage> stages_;
  Parameter<S> head_w_, head_b_;
};

inline constexpr double kDiceSmooth = 1e-5;

template <typename S>
struct LossTerms {
  Var<S> total;  // cross-entropy + soft Dice loss
  double cross_entropy = 0;
  double dice_loss = 0;
};

/// logits [B, K, D, H, W], labels [B, D, H, W] with values in [0, K).
/// Cross-entropy averages over voxels; soft Dice aggregates over the whole
/// batch, averages over all K classes (background included).
template <typename S>
LossTerms<S> dice_ce_loss(const Var<S>& logits, const LabelMap& labels);

struct DiceResult {
  std::vector<double> per_class;  // index k-1 holds class k, k = 1..K-1
  double mean = 0;                // over foreground classes
};

/// Hard-label overlap Dice per foreground class. Both masks empty scores 1.
DiceResult dice_score(const LabelMap& pred, const LabelMap& truth, Index classes);

/// argmax over the class axis of logits [B, K, D, H, W] -> [B, D, H, W].
template <typename S>
LabelMap argmax_labels(const Tensor<S>& logits);

template <typename S>
struct SegmentationOutput {
  Tensor<S> logits;         // [1, K, D, H, W]
  Tensor<S> probabilities;  // softmax over K
  LabelMap labels;          // [1, D, H, W]
};

struct SlidingWindowOptions {
  std::array<Index, 3> window{96, 96, 96};
  double overlap = 0.5;
};

/// Window start offsets along one axis: stride window*(1-overlap), last window snapped to the end.
std::vector<Index> window_starts(Index extent, Index window, double overlap);

/// Gaussian importance map with sigma = window/8 per axis, peak 1 at the centre.
template <typename S>
Tensor<S> gaussian_importance(const std::array<Index, 3>& window);

template <typename S>
using WindowModel = std::function<Tensor<S>(const Tensor<S>&)>;

/// Runs `model` ([1,1,wd,wh,ww] -> [1,K,wd,wh,ww] logits) over overlapping windows
/// of volume [1,1,D,H,W], blending logits with the importance map. Volumes
/// smaller than the window are padded with their minimum intensity.
template <typename S>
SegmentationOutput<S> sliding_window_infer(const Tensor<S>& volume, const WindowModel<S>& model,
                                           const SlidingWindowOptions& opt = {});

/// Encoder + decoder.
template <typename S>
class SegmentationModel {
 public:
  SegmentationModel(const ViTConfig& vit, Index classes, std::uint64_t seed);

  /// x [B, 1, D, H, W] -> logits [B, K, D, H, W].
  Var<S> operator()(const Var<S>& x, const EncoderPaths& paths = {}) const;

  ParameterList<S> parameters();
  Encoder<S>& encoder() { return encoder_; }
  Decoder<S>& decoder() { return decoder_; }
  const ViTConfig& vit() const { return encoder_.config(); }
  Index classes() const { return decoder_.config().classes; }

 private:
  std::mt19937_64 rng_;
  Encoder<S> encoder_;
  Decoder<S> decoder_;
};

}  // namespace tpmamba
