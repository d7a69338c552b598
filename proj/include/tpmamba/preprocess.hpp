#pragma once

#include "tpmamba/volume_io.hpp"

#include <random>

namespace tpmamba {

inline constexpr double kHuLow = -200.0;
inline constexpr double kHuHigh = 250.0;

/// Clip to the soft-tissue window and map it onto [0, 1] with fixed bounds.
inline float normalize_hu(float hu) {
  const double c = std::clamp(static_cast<double>(hu), kHuLow, kHuHigh);
  return static_cast<float>((c - kHuLow) / (kHuHigh - kHuLow));
}

/// Extent after resampling to `target` mm: round(extent * spacing / target), at least 1.
std::array<Index, 3> resampled_dims(const std::array<Index, 3>& dims, const std::array<double, 3>& spacing,
                                    double target = 1.0);

/// Trilinear resize of [D, H, W] (align_corners=false, edges clamped).
Tensor<float> resample_trilinear(const Tensor<float>& v, const std::array<Index, 3>& out);
/// Nearest-neighbour resize of a label grid with the same coordinate mapping.
LabelMap resample_nearest(const LabelMap& v, const std::array<Index, 3>& out);

/// Clips and normalizes HU intensities (skipped when already normalized), then
/// resamples to `target` mm isotropic spacing. Labels follow with nearest neighbour.
VolumeRecord preprocess(const VolumeRecord& rec, double target = 1.0);

struct AugmentOptions {
  bool crop = true;
  bool flip = true;
  bool contrast = true;
  bool spacing_jitter = true;
  std::array<Index, 3> crop_size{96, 96, 96};
  double flip_p = 0.5;
  double gamma_min = 0.7;
  double gamma_max = 1.3;
  double jitter = 0.1;  // target spacing drawn from 1 +- jitter

  bool any() const { return crop || flip || contrast || spacing_jitter; }
};

/// Crops to `crop_size` (zero padding where the volume is shorter, centred),
/// optionally at a random offset.
VolumeRecord crop_or_pad(const VolumeRecord& rec, const std::array<Index, 3>& size, const std::array<Index, 3>& start);

VolumeRecord flip_axis(const VolumeRecord& rec, int axis);

/// x -> clamp(mean + gamma * (x - mean), 0, 1).
void adjust_contrast(Tensor<float>& v, double gamma);

/// Random crop, per-axis flips and contrast on a preprocessed record. The
/// spacing jitter is applied by `training_sample`, which re-runs `preprocess`.
VolumeRecord augment(const VolumeRecord& rec, const AugmentOptions& opt, std::mt19937_64& rng);

/// Augmented crop of one record. `preprocessed` is `preprocess(raw)`; with
/// spacing jitter on, `raw` is resampled again at a random target spacing.
VolumeRecord training_sample(const VolumeRecord& raw, const VolumeRecord& preprocessed, const AugmentOptions& opt,
                             std::mt19937_64& rng);

}  // namespace tpmamba
