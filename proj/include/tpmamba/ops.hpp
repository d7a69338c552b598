#pragma once

#include "tpmamba/autograd.hpp"

#include <array>
#include <vector>

namespace tpmamba {

// Every function here is a tape primitive: it computes its output eagerly and,
// when a tape is active and an input requires gradients, records a backward
// rule. Instantiated for float and double.

// ---- element-wise ---------------------------------------------------------
template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& a, S factor);
template <typename S> Var<S> neg(const Var<S>& a);
template <typename S> Var<S> exp(const Var<S>& a);

/// x[..., t] + y[t]: `y` matches the trailing axes of `x` and repeats over the rest.
template <typename S> Var<S> add_broadcast(const Var<S>& x, const Var<S>& y);

// ---- activations ----------------------------------------------------------
enum class Activation { gelu, silu, softplus, sigmoid, softmax };

/// `axis` is only used by softmax. GELU uses the tanh approximation.
template <typename S> Var<S> activation(const Var<S>& x, Activation kind, int axis = -1);
template <typename S> Var<S> gelu(const Var<S>& x) { return activation(x, Activation::gelu); }
template <typename S> Var<S> silu(const Var<S>& x) { return activation(x, Activation::silu); }
template <typename S> Var<S> softplus(const Var<S>& x) { return activation(x, Activation::softplus); }
template <typename S> Var<S> sigmoid(const Var<S>& x) { return activation(x, Activation::sigmoid); }
template <typename S> Var<S> softmax(const Var<S>& x, int axis) {
  return activation(x, Activation::softmax, axis);
}

// ---- layout ---------------------------------------------------------------
template <typename S> Var<S> reshape(const Var<S>& x, Shape shape);
/// out.shape[i] = x.shape[axes[i]].
template <typename S> Var<S> permute(const Var<S>& x, const std::vector<int>& axes);
template <typename S> Var<S> concat(const std::vector<Var<S>>& parts, int axis);
template <typename S> Var<S> slice(const Var<S>& x, int axis, Index start, Index length);

/// Plain (non-recording) permutation used by the differentiable op and by
/// callers that only need data movement.
template <typename S> Tensor<S> permute_tensor(const Tensor<S>& x, const std::vector<int>& axes);

// ---- contractions ---------------------------------------------------------
/// a[..., M, K] x b[..., K, N]; leading extents must be equal.
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);

/// x[..., in] W[out, in]^T + bias[out]; `bias` may be undefined.
template <typename S> Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias = {});

struct Conv3dOptions {
  std::array<Index, 3> dilation{1, 1, 1};
  std::array<Index, 3> padding{0, 0, 0};

  /// Padding that keeps every extent unchanged; rejects even kernels.
  static Conv3dOptions same(const std::array<Index, 3>& kernel, const std::array<Index, 3>& dilation);
};

/// Stride-1 cross-correlation. x[B,Cin,D,H,W], w[Cout,Cin,kd,kh,kw], bias[Cout] optional.
template <typename S>
Var<S> conv3d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, const Conv3dOptions& opt);

/// Per-channel causal filter: x[B,E,L], w[E,1,k], bias[E] optional; left zero padding k-1.
template <typename S> Var<S> conv1d_depthwise(const Var<S>& x, const Var<S>& w, const Var<S>& bias = {});

// ---- normalisation --------------------------------------------------------
enum class NormKind { layer, instance };

inline constexpr double kNormEps = 1e-5;

/// layer: standardise the last axis, gamma/beta of that extent.
/// instance: standardise axes 2.. per (batch, channel), gamma/beta of extent C.
template <typename S>
Var<S> normalize(const Var<S>& x, NormKind kind, const Var<S>& gamma, const Var<S>& beta,
                 double eps = kNormEps);
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps = kNormEps) {
  return normalize(x, NormKind::layer, gamma, beta, eps);
}
template <typename S>
Var<S> instance_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps = kNormEps) {
  return normalize(x, NormKind::instance, gamma, beta, eps);
}

// ---- resampling -----------------------------------------------------------
/// Bilinear upsampling of the two trailing axes of x[B,C,D,H,W] (align_corners=false).
template <typename S> Var<S> upsample_hw(const Var<S>& x, Index factor);

/// Non-differentiable bilinear resize of a [H,W,C] grid, align_corners=false.
template <typename S> Tensor<S> resize_bilinear_hwc(const Tensor<S>& x, Index out_h, Index out_w);

// ---- reductions -----------------------------------------------------------
template <typename S> Var<S> sum(const Var<S>& x);
template <typename S> Var<S> mean(const Var<S>& x);
/// Sum of x * weights; `weights` is a constant of the same shape.
template <typename S> Var<S> weighted_sum(const Var<S>& x, const Tensor<S>& weights);

}  // namespace tpmamba
