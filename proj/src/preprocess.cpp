#include "tpmamba/preprocess.hpp"

#include <cmath>

namespace tpmamba {

std::array<Index, 3> resampled_dims(const std::array<Index, 3>& dims, const std::array<double, 3>& spacing,
                                    double target) {
  if (!(target > 0)) throw InputError("resample target spacing must be positive");
  std::array<Index, 3> out{};
  for (int a = 0; a < 3; ++a) {
    if (!(spacing[a] > 0)) throw InputError("spacing must be positive");
    out[a] = std::max<Index>(1, std::llround(static_cast<double>(dims[a]) * spacing[a] / target));
  }
  return out;
}

namespace {

struct Tap {
  Index lo, hi;
  double frac;
};

/// Linear taps for each output index along one axis.
std::vector<Tap> linear_taps(Index in, Index out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index i = 0; i < out; ++i) {
    const double src = std::max(0.0, (static_cast<double>(i) + 0.5) * ratio - 0.5);
    const Index lo = std::min<Index>(static_cast<Index>(src), in - 1);
    const Index hi = std::min<Index>(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

std::vector<Index> nearest_taps(Index in, Index out) {
  std::vector<Index> idx(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index i = 0; i < out; ++i) {
    idx[i] = std::min<Index>(in - 1, static_cast<Index>(std::floor((static_cast<double>(i) + 0.5) * ratio)));
  }
  return idx;
}

}  // namespace

Tensor<float> resample_trilinear(const Tensor<float>& v, const std::array<Index, 3>& out) {
  if (v.rank() != 3) throw DimensionError("resample_trilinear: expected [D, H, W], got " + shape_str(v.shape()));
  const Index d = v.dim(0), h = v.dim(1), w = v.dim(2);
  if (out[0] == d && out[1] == h && out[2] == w) return v;
  const auto tz = linear_taps(d, out[0]), ty = linear_taps(h, out[1]), tx = linear_taps(w, out[2]);
  auto at = [&](Index z, Index y, Index x) { return static_cast<double>(v[(z * h + y) * w + x]); };
  Tensor<float> r({out[0], out[1], out[2]});
  for (Index z = 0; z < out[0]; ++z) {
    for (Index y = 0; y < out[1]; ++y) {
      for (Index x = 0; x < out[2]; ++x) {
        const Tap &a = tz[z], &b = ty[y], &c = tx[x];
        auto plane = [&](Index zz) {
          const double top = at(zz, b.lo, c.lo) * (1 - c.frac) + at(zz, b.lo, c.hi) * c.frac;
          const double bot = at(zz, b.hi, c.lo) * (1 - c.frac) + at(zz, b.hi, c.hi) * c.frac;
          return top * (1 - b.frac) + bot * b.frac;
        };
        r[(z * out[1] + y) * out[2] + x] = static_cast<float>(plane(a.lo) * (1 - a.frac) + plane(a.hi) * a.frac);
      }
    }
  }
  return r;
}

LabelMap resample_nearest(const LabelMap& v, const std::array<Index, 3>& out) {
  if (v.rank() != 3) throw DimensionError("resample_nearest: expected [D, H, W], got " + shape_str(v.shape()));
  const Index h = v.dim(1), w = v.dim(2);
  const auto iz = nearest_taps(v.dim(0), out[0]), iy = nearest_taps(h, out[1]), ix = nearest_taps(w, out[2]);
  LabelMap r(Shape{out[0], out[1], out[2]});
  for (Index z = 0; z < out[0]; ++z) {
    for (Index y = 0; y < out[1]; ++y) {
      for (Index x = 0; x < out[2]; ++x) r[(z * out[1] + y) * out[2] + x] = v[(iz[z] * h + iy[y]) * w + ix[x]];
    }
  }
  return r;
}

VolumeRecord preprocess(const VolumeRecord& rec, double target) {
  rec.validate();
  VolumeRecord out;
  out.id = rec.id;
  Tensor<float> v = rec.voxels;
  if (rec.intensity == Intensity::hounsfield) {
    for (Index i = 0; i < v.size(); ++i) v[i] = normalize_hu(v[i]);
  }
  const auto dims = resampled_dims(rec.dims(), rec.spacing, target);
  out.voxels = resample_trilinear(v, dims);
  if (rec.labels) out.labels = resample_nearest(*rec.labels, dims);
  out.spacing = {target, target, target};
  out.intensity = Intensity::normalized;
  return out;
}

VolumeRecord crop_or_pad(const VolumeRecord& rec, const std::array<Index, 3>& size, const std::array<Index, 3>& start) {
  const auto dims = rec.dims();
  std::array<Index, 3> src0{}, dst0{}, len{};
  for (int a = 0; a < 3; ++a) {
    if (dims[a] >= size[a]) {
      if (start[a] < 0 || start[a] + size[a] > dims[a]) throw DimensionError("crop start out of range");
      src0[a] = start[a];
      dst0[a] = 0;
      len[a] = size[a];
    } else {
      src0[a] = 0;
      dst0[a] = (size[a] - dims[a]) / 2;
      len[a] = dims[a];
    }
  }
  VolumeRecord out;
  out.id = rec.id;
  out.spacing = rec.spacing;
  out.intensity = rec.intensity;
  out.voxels = Tensor<float>({size[0], size[1], size[2]});
  if (rec.labels) out.labels = LabelMap(Shape{size[0], size[1], size[2]});
  for (Index z = 0; z < len[0]; ++z) {
    for (Index y = 0; y < len[1]; ++y) {
      const Index s = ((src0[0] + z) * dims[1] + src0[1] + y) * dims[2] + src0[2];
      const Index d = ((dst0[0] + z) * size[1] + dst0[1] + y) * size[2] + dst0[2];
      std::copy_n(rec.voxels.data() + s, len[2], out.voxels.data() + d);
      if (rec.labels) std::copy_n(rec.labels->data() + s, len[2], out.labels->data() + d);
    }
  }
  return out;
}

VolumeRecord flip_axis(const VolumeRecord& rec, int axis) {
  const auto dims = rec.dims();
  VolumeRecord out = rec;
  for (Index z = 0; z < dims[0]; ++z) {
    for (Index y = 0; y < dims[1]; ++y) {
      for (Index x = 0; x < dims[2]; ++x) {
        std::array<Index, 3> src{z, y, x};
        src[axis] = dims[axis] - 1 - src[axis];
        const Index di = (z * dims[1] + y) * dims[2] + x;
        const Index si = (src[0] * dims[1] + src[1]) * dims[2] + src[2];
        out.voxels[di] = rec.voxels[si];
        if (rec.labels) (*out.labels)[di] = (*rec.labels)[si];
      }
    }
  }
  return out;
}

void adjust_contrast(Tensor<float>& v, double gamma) {
  if (gamma == 1.0) return;
  const double mean = v.array().template cast<double>().mean();
  for (Index i = 0; i < v.size(); ++i) {
    v[i] = static_cast<float>(std::clamp(mean + gamma * (static_cast<double>(v[i]) - mean), 0.0, 1.0));
  }
}

VolumeRecord augment(const VolumeRecord& rec, const AugmentOptions& opt, std::mt19937_64& rng) {
  const auto dims = rec.dims();
  std::array<Index, 3> start{};
  for (int a = 0; a < 3; ++a) {
    const Index slack = std::max<Index>(0, dims[a] - opt.crop_size[a]);
    start[a] = opt.crop ? std::uniform_int_distribution<Index>(0, slack)(rng) : slack / 2;
  }
  VolumeRecord out = crop_or_pad(rec, opt.crop_size, start);
  if (opt.flip) {
    std::bernoulli_distribution coin(opt.flip_p);
    for (int a = 0; a < 3; ++a) {
      if (coin(rng)) out = flip_axis(out, a);
    }
  }
  if (opt.contrast) adjust_contrast(out.voxels, std::uniform_real_distribution<double>(opt.gamma_min, opt.gamma_max)(rng));
  return out;
}

VolumeRecord training_sample(const VolumeRecord& raw, const VolumeRecord& preprocessed, const AugmentOptions& opt,
                             std::mt19937_64& rng) {
  if (!opt.spacing_jitter) return augment(preprocessed, opt, rng);
  const double target = std::uniform_real_distribution<double>(1.0 - opt.jitter, 1.0 + opt.jitter)(rng);
  return augment(preprocess(raw, target), opt, rng);
}

}  // namespace tpmamba
