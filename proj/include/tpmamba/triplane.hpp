#pragma once

#include "tpmamba/ssm.hpp"

#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace tpmamba {

enum class ScanMode { tri_plane, hw_only, dw_only, dh_only, volume_flatten };
enum class ConvMode { multiscale, single };

/// Sequence layouts of a [B, r, D, h, w] feature volume. Channels are always last.
///   hw:     [B*D, h*w, r]   (h outer, w inner)
///   dh:     [B*w, D*h, r]   (D outer, h inner)
///   dw:     [B*h, D*w, r]   (D outer, w inner)
///   volume: [B, D*h*w, r]   (D, then h, then w)
enum class Plane { hw, dh, dw, volume };

std::string_view to_string(ScanMode m);
std::string_view to_string(ConvMode m);
std::string_view to_string(Plane p);
ScanMode parse_scan_mode(std::string_view s);
ConvMode parse_conv_mode(std::string_view s);
Plane parse_plane(std::string_view s);

/// Planes scanned by a mode, in summation order.
std::vector<Plane> planes_of(ScanMode mode);

struct TPMambaConfig {
  Index channels = 96;  // backbone width C
  Index rank = 24;      // adapter width r
  std::vector<Index> dilations{1, 2, 4, 8};
  Index depth_kernel = 3;
  ScanMode scan_mode = ScanMode::tri_plane;
  ConvMode conv_mode = ConvMode::multiscale;
  Index d_state = 16;
  Index expand = 2;
  Index d_conv = 4;

  void validate() const;
  MambaBlockConfig mamba() const;
};

template <typename S> Var<S> plane_flatten(const Var<S>& g, Plane plane);
/// `dims` = {B, r, D, h, w} of the volume that was flattened.
template <typename S> Var<S> plane_unflatten(const Var<S>& seq, Plane plane, const Shape& dims);

template <typename S>
class TPMambaAdapter {
 public:
  struct Branch {
    Parameter<S> weight;
    Parameter<S> bias;
    Index dilation;
  };

  TPMambaAdapter() = default;
  TPMambaAdapter(const TPMambaConfig& cfg, std::mt19937_64& rng, const std::string& prefix);

  /// [B, C, D, h, w] -> [B, r, D, h, w]; depth kernel only, same padding.
  Var<S> reduce_dim(const Var<S>& f) const;
  /// Parallel dilated depth convolutions concatenated on channels (or one plain conv).
  Var<S> multiscale_depth_conv(const Var<S>& g) const;
  /// One plane scanner's contribution, returned in volume layout.
  Var<S> scan_plane(const Var<S>& g, Plane plane) const;
  /// Sum of the configured scanners' contributions (hw + dw + dh for tri-plane).
  Var<S> scan(const Var<S>& g) const;
  /// [B, r, D, h, w] -> [B, C, D, h, w].
  Var<S> raise_dim(const Var<S>& s) const;

  /// Full adapter on slice-batched features f [B*D, C, h, w]; returns f + adapter(f).
  Var<S> operator()(const Var<S>& f, Index batch, Index depth) const;

  const TPMambaConfig& config() const { return cfg_; }
  void collect(ParameterList<S>& out);
  const MambaBlock<S>& scanner(Plane p) const;
  MambaBlock<S>& scanner(Plane p);
  std::vector<Branch>& branches() { return branches_; }
  Parameter<S>& reduce_weight() { return reduce_w_; }
  Parameter<S>& raise_weight() { return raise_w_; }
  Parameter<S>& raise_bias() { return raise_b_; }

  /// Closed-form parameter count for a configuration.
  static Index count(const TPMambaConfig& cfg);

 private:
  Conv3dOptions depth_same(Index dilation) const;

  TPMambaConfig cfg_;
  Parameter<S> reduce_w_, reduce_b_;
  std::vector<Branch> branches_;
  std::vector<std::pair<Plane, MambaBlock<S>>> scanners_;
  Parameter<S> raise_w_, raise_b_;
};

}  // namespace tpmamba
