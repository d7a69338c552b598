#pragma once

#include "tpmamba/ops.hpp"

#include <random>
#include <string>
#include <utility>

namespace tpmamba {

/// Shape of one selective state-space block operating on width `d_model`.
struct MambaBlockConfig {
  Index d_model = 0;
  Index d_state = 16;
  Index expand = 2;
  Index d_conv = 4;
  Index dt_rank = 0;  // 0 selects ceil(d_model / 16)

  Index inner() const { return expand * d_model; }
  Index resolved_dt_rank() const { return dt_rank > 0 ? dt_rank : (d_model + 15) / 16; }
  void validate() const;
};

/// Trainable state of one Mamba block. A = -exp(a_log) keeps the state
/// matrix strictly negative; the step size is softplus(dt_proj(..)) > 0.
template <typename S>
struct SSMParams {
  Parameter<S> in_proj;         // [2E, d_model]
  Parameter<S> conv_weight;     // [E, 1, d_conv]
  Parameter<S> conv_bias;       // [E]
  Parameter<S> x_proj;          // [dt_rank + 2N, E]
  Parameter<S> dt_proj_weight;  // [E, dt_rank]
  Parameter<S> dt_proj_bias;    // [E]
  Parameter<S> a_log;           // [E, N]
  Parameter<S> d_skip;          // [E]
  Parameter<S> out_proj;        // [d_model, E], zero at init

  static SSMParams init(const MambaBlockConfig& cfg, std::mt19937_64& rng, const std::string& prefix);
  void collect(ParameterList<S>& out);
  static Index count(const MambaBlockConfig& cfg);
};

/// Zero-order hold for A, Euler for B: returns (exp(delta*A), delta*B) as [E, N] each.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> discretize(const Tensor<S>& a, const Tensor<S>& b_t, const Tensor<S>& delta_t);

/// Reference recurrence. Shapes: u, delta [Bs, L, E]; a [E, N]; b, c [Bs, L, N]; d [E].
/// h_t = exp(delta_t a) h_{t-1} + delta_t b_t u_t, y_t = <c_t, h_t> + d u_t, h_0 = 0.
/// Keeps every state for the backward pass.
template <typename S>
Var<S> selective_scan_sequential(const Var<S>& u, const Var<S>& delta, const Var<S>& a, const Var<S>& b,
                                 const Var<S>& c, const Var<S>& d);

inline constexpr Index kScanChunk = 64;

/// Production scan: the same recurrence processed in chunks with the state
/// carried across chunk boundaries. Only chunk-boundary states are kept; the
/// backward pass recomputes states inside each chunk.
template <typename S>
Var<S> selective_scan(const Var<S>& u, const Var<S>& delta, const Var<S>& a, const Var<S>& b, const Var<S>& c,
                      const Var<S>& d, Index chunk = kScanChunk);

/// seq [Bs, L, d_model] -> same shape; output = seq + block(seq).
template <typename S>
Var<S> mamba_block_forward(const Var<S>& seq, const SSMParams<S>& params, const MambaBlockConfig& cfg);

template <typename S>
class MambaBlock {
 public:
  MambaBlock() = default;
  MambaBlock(const MambaBlockConfig& cfg, std::mt19937_64& rng, const std::string& prefix)
      : cfg_(cfg), params_(SSMParams<S>::init(cfg, rng, prefix)) {}

  Var<S> operator()(const Var<S>& seq) const { return mamba_block_forward(seq, params_, cfg_); }

  const MambaBlockConfig& config() const { return cfg_; }
  SSMParams<S>& params() { return params_; }
  const SSMParams<S>& params() const { return params_; }
  void collect(ParameterList<S>& out) { params_.collect(out); }

 private:
  MambaBlockConfig cfg_;
  SSMParams<S> params_;
};

}  // namespace tpmamba
