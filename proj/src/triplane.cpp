#include "tpmamba/triplane.hpp"

#include "tpmamba/init.hpp"

namespace tpmamba {

std::string_view to_string(ScanMode m) {
  switch (m) {
    case ScanMode::tri_plane: return "tri_plane";
    case ScanMode::hw_only: return "hw_only";
    case ScanMode::dw_only: return "dw_only";
    case ScanMode::dh_only: return "dh_only";
    case ScanMode::volume_flatten: return "volume_flatten";
  }
  return "?";
}

std::string_view to_string(ConvMode m) { return m == ConvMode::multiscale ? "multiscale" : "single"; }

std::string_view to_string(Plane p) {
  switch (p) {
    case Plane::hw: return "hw";
    case Plane::dh: return "dh";
    case Plane::dw: return "dw";
    case Plane::volume: return "volume";
  }
  return "?";
}

ScanMode parse_scan_mode(std::string_view s) {
  for (ScanMode m : {ScanMode::tri_plane, ScanMode::hw_only, ScanMode::dw_only, ScanMode::dh_only,
                     ScanMode::volume_flatten}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown scan mode '" + std::string(s) + "'");
}

ConvMode parse_conv_mode(std::string_view s) {
  if (s == "multiscale") return ConvMode::multiscale;
  if (s == "single") return ConvMode::single;
  throw ConfigError("unknown conv mode '" + std::string(s) + "'");
}

Plane parse_plane(std::string_view s) {
  for (Plane p : {Plane::hw, Plane::dh, Plane::dw, Plane::volume}) {
    if (s == to_string(p)) return p;
  }
  throw ConfigError("unknown plane '" + std::string(s) + "'");
}

std::vector<Plane> planes_of(ScanMode mode) {
  switch (mode) {
    case ScanMode::tri_plane: return {Plane::hw, Plane::dw, Plane::dh};
    case ScanMode::hw_only: return {Plane::hw};
    case ScanMode::dw_only: return {Plane::dw};
    case ScanMode::dh_only: return {Plane::dh};
    case ScanMode::volume_flatten: return {Plane::volume};
  }
  return {};
}

void TPMambaConfig::validate() const {
  if (channels <= 0 || rank <= 0) throw ConfigError("TPMambaConfig: channels and rank must be positive");
  if (depth_kernel <= 0 || depth_kernel % 2 == 0) {
    throw ConfigError("TPMambaConfig: depth_kernel must be odd, got " + std::to_string(depth_kernel));
  }
  if (conv_mode == ConvMode::multiscale) {
    if (dilations.empty()) throw ConfigError("TPMambaConfig: multiscale mode needs at least one dilation");
    for (Index d : dilations) {
      if (d <= 0) throw ConfigError("TPMambaConfig: dilations must be positive");
    }
    if (rank % static_cast<Index>(dilations.size()) != 0) {
      throw ConfigError("TPMambaConfig: rank " + std::to_string(rank) + " not divisible by " +
                        std::to_string(dilations.size()) + " dilation branches");
    }
  }
  mamba().validate();
}

MambaBlockConfig TPMambaConfig::mamba() const {
  MambaBlockConfig m;
  m.d_model = rank;
  m.d_state = d_state;
  m.expand = expand;
  m.d_conv = d_conv;
  return m;
}

namespace {

/// Axis order taking [B, r, D, h, w] to [batch..., sequence..., r].
std::vector<int> plane_axes(Plane plane) {
  switch (plane) {
    case Plane::hw: return {0, 2, 3, 4, 1};
    case Plane::dh: return {0, 4, 2, 3, 1};
    case Plane::dw: return {0, 3, 2, 4, 1};
    case Plane::volume: return {0, 2, 3, 4, 1};
  }
  return {};
}

Shape sequence_shape(Plane plane, const Shape& p) {
  // p is the permuted 5-d shape.
  if (plane == Plane::volume) return {p[0], p[1] * p[2] * p[3], p[4]};
  return {p[0] * p[1], p[2] * p[3], p[4]};
}

}  // namespace

template <typename S>
Var<S> plane_flatten(const Var<S>& g, Plane plane) {
  if (g.shape().size() != 5) throw DimensionError("plane_flatten: expected [B, r, D, h, w], got " + shape_str(g.shape()));
  const Var<S> p = permute(g, plane_axes(plane));
  return reshape(p, sequence_shape(plane, p.shape()));
}

template <typename S>
Var<S> plane_unflatten(const Var<S>& seq, Plane plane, const Shape& dims) {
  if (dims.size() != 5) throw DimensionError("plane_unflatten: dims must be [B, r, D, h, w]");
  const std::vector<int> axes = plane_axes(plane);
  Shape permuted(5);
  for (int i = 0; i < 5; ++i) permuted[i] = dims[axes[i]];
  if (seq.shape() != sequence_shape(plane, permuted)) {
    throw DimensionError("plane_unflatten: sequence " + shape_str(seq.shape()) + " does not match volume " +
                         shape_str(dims) + " in " + std::string(to_string(plane)) + " layout");
  }
  std::vector<int> inverse(5);
  for (int i = 0; i < 5; ++i) inverse[axes[i]] = i;
  return permute(reshape(seq, permuted), inverse);
}

template <typename S>
TPMambaAdapter<S>::TPMambaAdapter(const TPMambaConfig& cfg, std::mt19937_64& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  const Index c = cfg.channels, r = cfg.rank, k = cfg.depth_kernel;
  reduce_w_ = {prefix + ".reduce.weight", fan_in_uniform<S>({r, c, k, 1, 1}, c * k, rng), true};
  reduce_b_ = {prefix + ".reduce.bias", fan_in_uniform<S>({r}, c * k, rng), true};
  if (cfg.conv_mode == ConvMode::multiscale) {
    const Index width = r / static_cast<Index>(cfg.dilations.size());
    for (std::size_t i = 0; i < cfg.dilations.size(); ++i) {
      const std::string name = prefix + ".branch." + std::to_string(i);
      branches_.push_back({{name + ".weight", fan_in_uniform<S>({width, r, k, 1, 1}, r * k, rng), true},
                           {name + ".bias", fan_in_uniform<S>({width}, r * k, rng), true},
                           cfg.dilations[i]});
    }
  } else {
    const std::string name = prefix + ".branch.0";
    branches_.push_back({{name + ".weight", fan_in_uniform<S>({r, r, k, 1, 1}, r * k, rng), true},
                         {name + ".bias", fan_in_uniform<S>({r}, r * k, rng), true},
                         1});
  }
  for (Plane p : planes_of(cfg.scan_mode)) {
    scanners_.emplace_back(p, MambaBlock<S>(cfg.mamba(), rng, prefix + ".phi_" + std::string(to_string(p))));
  }
  raise_w_ = {prefix + ".raise.weight", Tensor<S>({c, r, k, 1, 1}), true};
  raise_b_ = {prefix + ".raise.bias", Tensor<S>({c}), true};
}

template <typename S>
Conv3dOptions TPMambaAdapter<S>::depth_same(Index dilation) const {
  return Conv3dOptions::same({cfg_.depth_kernel, 1, 1}, {dilation, 1, 1});
}

template <typename S>
Var<S> TPMambaAdapter<S>::reduce_dim(const Var<S>& f) const {
  if (f.shape().size() != 5 || f.dim(1) != cfg_.channels) {
    throw DimensionError("reduce_dim: expected [B, " + std::to_string(cfg_.channels) + ", D, h, w], got " +
                         shape_str(f.shape()));
  }
  return conv3d(f, reduce_w_.var, reduce_b_.var, depth_same(1));
}

template <typename S>
Var<S> TPMambaAdapter<S>::multiscale_depth_conv(const Var<S>& g) const {
  if (branches_.size() == 1) return conv3d(g, branches_[0].weight.var, branches_[0].bias.var, depth_same(branches_[0].dilation));
  std::vector<Var<S>> outs;
  outs.reserve(branches_.size());
  for (const Branch& b : branches_) outs.push_back(conv3d(g, b.weight.var, b.bias.var, depth_same(b.dilation)));
  return concat(outs, 1);
}

template <typename S>
const MambaBlock<S>& TPMambaAdapter<S>::scanner(Plane p) const {
  for (const auto& [plane, block] : scanners_) {
    if (plane == p) return block;
  }
  throw ConfigError("adapter in mode " + std::string(to_string(cfg_.scan_mode)) + " has no " +
                    std::string(to_string(p)) + " scanner");
}

template <typename S>
MambaBlock<S>& TPMambaAdapter<S>::scanner(Plane p) {
  return const_cast<MambaBlock<S>&>(std::as_const(*this).scanner(p));
}

template <typename S>
Var<S> TPMambaAdapter<S>::scan_plane(const Var<S>& g, Plane plane) const {
  return plane_unflatten(scanner(plane)(plane_flatten(g, plane)), plane, g.shape());
}

template <typename S>
Var<S> TPMambaAdapter<S>::scan(const Var<S>& g) const {
  Var<S> total;
  for (const auto& [plane, block] : scanners_) {
    Var<S> part = plane_unflatten(block(plane_flatten(g, plane)), plane, g.shape());
    total = total.defined() ? add(total, part) : part;
  }
  return total;
}

template <typename S>
Var<S> TPMambaAdapter<S>::raise_dim(const Var<S>& s) const {
  return conv3d(s, raise_w_.var, raise_b_.var, depth_same(1));
}

template <typename S>
Var<S> TPMambaAdapter<S>::operator()(const Var<S>& f, Index batch, Index depth) const {
  const Shape& fs = f.shape();
  if (fs.size() != 4 || fs[1] != cfg_.channels) {
    throw DimensionError("TP-Mamba adapter: expected [B*D, " + std::to_string(cfg_.channels) + ", h, w], got " +
                         shape_str(fs));
  }
  if (depth <= 0 || batch <= 0 || batch * depth != fs[0]) {
    throw DimensionError("TP-Mamba adapter: batch " + std::to_string(batch) + " x depth " + std::to_string(depth) +
                         " does not match leading extent of " + shape_str(fs));
  }
  const Index c = fs[1], h = fs[2], w = fs[3];
  const Var<S> vol = permute(reshape(f, {batch, depth, c, h, w}), {0, 2, 1, 3, 4});
  const Var<S> g = multiscale_depth_conv(reduce_dim(vol));
  const Var<S> raised = raise_dim(scan(g));
  const Var<S> back = reshape(permute(raised, {0, 2, 1, 3, 4}), fs);
  return add(f, back);
}

template <typename S>
void TPMambaAdapter<S>::collect(ParameterList<S>& out) {
  out.push_back(&reduce_w_);
  out.push_back(&reduce_b_);
  for (Branch& b : branches_) {
    out.push_back(&b.weight);
    out.push_back(&b.bias);
  }
  for (auto& [plane, block] : scanners_) block.collect(out);
  out.push_back(&raise_w_);
  out.push_back(&raise_b_);
}

template <typename S>
Index TPMambaAdapter<S>::count(const TPMambaConfig& cfg) {
  const Index k = cfg.depth_kernel, c = cfg.channels, r = cfg.rank;
  const Index n_scanners = static_cast<Index>(planes_of(cfg.scan_mode).size());
  // Multiscale branches: n * (k * r * (r / n) + r / n) == k * r * r + r, same as the single conv.
  return k * c * r + r + (k * r * r + r) + n_scanners * SSMParams<S>::count(cfg.mamba()) + k * r * c + c;
}

#define TPMAMBA_INSTANTIATE_TRIPLANE(S)                              \
  template Var<S> plane_flatten(const Var<S>&, Plane);               \
  template Var<S> plane_unflatten(const Var<S>&, Plane, const Shape&); \
  template class TPMambaAdapter<S>;

TPMAMBA_INSTANTIATE_TRIPLANE(float)
TPMAMBA_INSTANTIATE_TRIPLANE(double)

#undef TPMAMBA_INSTANTIATE_TRIPLANE

}  // namespace tpmamba
