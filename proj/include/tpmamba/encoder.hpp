#pragma once

#include "tpmamba/triplane.hpp"

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace tpmamba {

/// Toy-scale ViT-B style encoder. Full SAM ViT-B is C=768, 12 blocks, 12 heads.
struct ViTConfig {
  Index channels = 96;
  Index patch = 16;
  Index n_blocks = 4;
  Index n_heads = 4;
  Index mlp_ratio = 4;
  Index lora_rank = 4;
  double lora_alpha = 4.0;
  Index img_size = 96;  // grid of the stored positional embedding is img_size / patch
  Index n_outputs = 4;
  bool use_adapters = true;
  TPMambaConfig adapter;

  void validate() const;
  Index grid() const { return img_size / patch; }
};

/// Which optional paths run in a forward pass. With both off the encoder is
/// the plain frozen backbone.
struct EncoderPaths {
  bool lora = true;
  bool adapters = true;
};

template <typename S>
struct Dense {
  Parameter<S> weight;  // [out, in]
  Parameter<S> bias;    // [out]

  Var<S> operator()(const Var<S>& x) const { return linear(x, weight.var, bias.var); }
  void collect(ParameterList<S>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

/// Frozen linear map plus a trainable low-rank update:
/// y = W x + b + (alpha / rank) * B (A x), with B zero at init.
template <typename S>
struct LoRALinear {
  Dense<S> base;
  Parameter<S> lora_a;  // [rank, in]
  Parameter<S> lora_b;  // [out, rank]
  S scale = S(1);

  Var<S> operator()(const Var<S>& x, bool lora_on) const;
  void collect(ParameterList<S>& out);
};

template <typename S>
class ViTBlock {
 public:
  ViTBlock(const ViTConfig& cfg, std::mt19937_64& rng, const std::string& prefix);

  /// Multi-head self-attention over the tokens of each slice: x [BD, hw, C].
  Var<S> attention(const Var<S>& x, bool lora_on) const;
  /// f [BD, C, h, w] -> [BD, C, h, w]; pre-norm attention and MLP, then the adapter.
  Var<S> operator()(const Var<S>& f, Index batch, Index depth, const EncoderPaths& paths) const;

  void collect(ParameterList<S>& out);
  TPMambaAdapter<S>* adapter() { return adapter_ ? &*adapter_ : nullptr; }
  LoRALinear<S>& query() { return q_; }
  LoRALinear<S>& value() { return v_; }

 private:
  Index channels_, heads_;
  Parameter<S> norm1_g_, norm1_b_, norm2_g_, norm2_b_;
  LoRALinear<S> q_, v_;
  Dense<S> k_, proj_, mlp1_, mlp2_;
  std::optional<TPMambaAdapter<S>> adapter_;
};

/// Patch embedding applied slice by slice: [B, 1, D, H, W] -> [B*D, C, H/p, W/p].
template <typename S>
class PatchEmbed {
 public:
  PatchEmbed(const ViTConfig& cfg, std::mt19937_64& rng, const std::string& prefix);
  Var<S> operator()(const Var<S>& x) const;
  void collect(ParameterList<S>& out);

 private:
  Index channels_, patch_;
  Parameter<S> weight_, bias_;  // [C, p*p], [C]
  Parameter<S> pos_;            // [grid, grid, C]
};

template <typename S>
class Encoder {
 public:
  Encoder(const ViTConfig& cfg, std::mt19937_64& rng, const std::string& prefix = "encoder");

  /// Returns the outputs of the last `n_outputs` blocks, each [B*D, C, h, w].
  std::vector<Var<S>> operator()(const Var<S>& x, const EncoderPaths& paths = {}) const;

  const ViTConfig& config() const { return cfg_; }
  void collect(ParameterList<S>& out);
  std::vector<ViTBlock<S>>& blocks() { return blocks_; }

 private:
  ViTConfig cfg_;
  PatchEmbed<S> embed_;
  std::vector<ViTBlock<S>> blocks_;
};

/// True for the parameters fine-tuning may change: LoRA factors, adapter and
/// decoder weights. Everything else belongs to the frozen backbone.
bool is_trainable_name(const std::string& name);

template <typename S>
struct FreezePartition {
  ParameterList<S> trainable;
  ParameterList<S> frozen;
};

/// Splits `params` by name and sets each parameter's trainable flag to match.
template <typename S>
FreezePartition<S> freeze_partition(const ParameterList<S>& params);

template <typename S>
Index parameter_count(const ParameterList<S>& params) {
  Index n = 0;
  for (const Parameter<S>* p : params) n += p->value().size();
  return n;
}

/// Closed-form parameter counts of one encoder, split into (trainable, frozen).
std::pair<Index, Index> encoder_parameter_counts(const ViTConfig& cfg);

}  // namespace tpmamba
