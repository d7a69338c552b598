#include "tpmamba/synth.hpp"

#include <cmath>
#include <cstdio>
#include <random>

namespace tpmamba {

namespace {

constexpr double kMinFraction = 0.01;
constexpr int kMaxAttempts = 64;

struct Ellipsoid {
  std::array<double, 3> centre, radius;

  bool contains(double z, double y, double x) const {
    const double a = (z - centre[0]) / radius[0], b = (y - centre[1]) / radius[1], c = (x - centre[2]) / radius[2];
    return a * a + b * b + c * c <= 1.0;
  }
};

}  // namespace

VolumeRecord synth_volume(const std::array<Index, 3>& dims, Index classes, std::uint64_t seed, std::string id) {
  if (classes < 2 || classes > 255) throw ConfigError("gen-synth: classes must be in [2, 255]");
  for (Index d : dims) {
    if (d < 32) throw ConfigError("gen-synth: every extent must be at least 32");
  }
  std::mt19937_64 rng(seed);
  const Index n = dims[0] * dims[1] * dims[2];
  LabelMap labels(Shape{dims[0], dims[1], dims[2]});
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxAttempts) throw InputError("gen-synth: could not place organs covering 1% each");
    std::vector<Ellipsoid> organs;
    // Radii shrink with the class count so the organs fit side by side.
    const double scale = 1.0 / std::sqrt(static_cast<double>(classes - 1));
    for (Index k = 1; k < classes; ++k) {
      Ellipsoid e;
      for (int a = 0; a < 3; ++a) {
        const double ext = static_cast<double>(dims[a]);
        e.radius[a] = ext * scale * std::uniform_real_distribution<double>(0.18, 0.32)(rng);
        e.centre[a] = std::uniform_real_distribution<double>(e.radius[a], ext - e.radius[a])(rng);
      }
      organs.push_back(e);
    }
    std::vector<Index> counts(classes, 0);
    for (Index z = 0; z < dims[0]; ++z) {
      for (Index y = 0; y < dims[1]; ++y) {
        for (Index x = 0; x < dims[2]; ++x) {
          std::uint8_t l = 0;
          for (Index k = 1; k < classes; ++k) {
            if (organs[k - 1].contains(z + 0.5, y + 0.5, x + 0.5)) l = static_cast<std::uint8_t>(k);
          }
          labels[(z * dims[1] + y) * dims[2] + x] = l;
          ++counts[l];
        }
      }
    }
    bool ok = true;
    for (Index k = 1; k < classes; ++k) ok = ok && counts[k] >= kMinFraction * static_cast<double>(n);
    if (ok) break;
  }
  // Background near -120 HU, organ k at an evenly spaced band up to ~260 HU.
  std::vector<double> band(classes);
  for (Index k = 0; k < classes; ++k) band[k] = -120.0 + 380.0 * static_cast<double>(k) / static_cast<double>(classes - 1);
  std::normal_distribution<double> noise(0.0, 15.0);
  VolumeRecord rec;
  rec.id = std::move(id);
  rec.voxels = Tensor<float>({dims[0], dims[1], dims[2]});
  for (Index i = 0; i < n; ++i) rec.voxels[i] = static_cast<float>(std::clamp(band[labels[i]] + noise(rng), -200.0, 300.0));
  rec.labels = std::move(labels);
  return rec;
}

std::vector<VolumeRecord> gen_synth(Index n, const std::array<Index, 3>& dims, Index classes, std::uint64_t seed,
                                    const std::filesystem::path& out_dir) {
  if (n <= 0) throw ConfigError("gen-synth: n must be positive");
  std::vector<VolumeRecord> out;
  for (Index i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "case_%03lld", static_cast<long long>(i));
    out.push_back(synth_volume(dims, classes, seed + static_cast<std::uint64_t>(i), id));
    if (!out_dir.empty()) save_record(out_dir, out.back());
  }
  return out;
}

}  // namespace tpmamba
