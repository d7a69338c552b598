#include "tpmamba/encoder.hpp"

#include "tpmamba/init.hpp"

#include <cmath>

namespace tpmamba {

void ViTConfig::validate() const {
  if (channels <= 0 || patch <= 0 || n_blocks <= 0 || n_heads <= 0 || mlp_ratio <= 0) {
    throw ConfigError("ViTConfig: extents must be positive");
  }
  if (channels % n_heads != 0) {
    throw ConfigError("ViTConfig: width " + std::to_string(channels) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  if (img_size <= 0 || img_size % patch != 0) {
    throw ConfigError("ViTConfig: img_size " + std::to_string(img_size) + " not divisible by patch " +
                      std::to_string(patch));
  }
  if (n_outputs <= 0 || n_blocks < n_outputs) {
    throw ConfigError("ViTConfig: need at least " + std::to_string(n_outputs) + " blocks for the output taps, got " +
                      std::to_string(n_blocks));
  }
  if (lora_rank <= 0) throw ConfigError("ViTConfig: lora_rank must be positive");
  if (use_adapters) {
    TPMambaConfig a = adapter;
    a.channels = channels;
    a.validate();
  }
}

namespace {

template <typename S>
Dense<S> make_dense(Index out, Index in, std::mt19937_64& rng, const std::string& name) {
  return {{name + ".weight", fan_in_uniform<S>({out, in}, in, rng), false},
          {name + ".bias", fan_in_uniform<S>({out}, in, rng), false}};
}

template <typename S>
LoRALinear<S> make_lora(Index out, Index in, const ViTConfig& cfg, std::mt19937_64& rng, const std::string& name) {
  LoRALinear<S> l;
  l.base = make_dense<S>(out, in, rng, name);
  l.lora_a = {name + ".lora_a", fan_in_uniform<S>({cfg.lora_rank, in}, in, rng), true};
  l.lora_b = {name + ".lora_b", Tensor<S>({out, cfg.lora_rank}), true};
  l.scale = static_cast<S>(cfg.lora_alpha / static_cast<double>(cfg.lora_rank));
  return l;
}

}  // namespace

template <typename S>
Var<S> LoRALinear<S>::operator()(const Var<S>& x, bool lora_on) const {
  Var<S> y = base(x);
  if (!lora_on) return y;
  return add(y, tpmamba::scale(linear(linear(x, lora_a.var), lora_b.var), scale));
}

template <typename S>
void LoRALinear<S>::collect(ParameterList<S>& out) {
  base.collect(out);
  out.push_back(&lora_a);
  out.push_back(&lora_b);
}

template <typename S>
ViTBlock<S>::ViTBlock(const ViTConfig& cfg, std::mt19937_64& rng, const std::string& prefix)
    : channels_(cfg.channels), heads_(cfg.n_heads) {
  const Index c = cfg.channels, hidden = cfg.mlp_ratio * cfg.channels;
  norm1_g_ = {prefix + ".norm1.weight", Tensor<S>({c}, S(1)), false};
  norm1_b_ = {prefix + ".norm1.bias", Tensor<S>({c}), false};
  q_ = make_lora<S>(c, c, cfg, rng, prefix + ".attn.q");
  k_ = make_dense<S>(c, c, rng, prefix + ".attn.k");
  v_ = make_lora<S>(c, c, cfg, rng, prefix + ".attn.v");
  proj_ = make_dense<S>(c, c, rng, prefix + ".attn.proj");
  norm2_g_ = {prefix + ".norm2.weight", Tensor<S>({c}, S(1)), false};
  norm2_b_ = {prefix + ".norm2.bias", Tensor<S>({c}), false};
  mlp1_ = make_dense<S>(hidden, c, rng, prefix + ".mlp.fc1");
  mlp2_ = make_dense<S>(c, hidden, rng, prefix + ".mlp.fc2");
  if (cfg.use_adapters) {
    TPMambaConfig a = cfg.adapter;
    a.channels = c;
    adapter_.emplace(a, rng, prefix + ".tpmamba");
  }
}

template <typename S>
Var<S> ViTBlock<S>::attention(const Var<S>& x, bool lora_on) const {
  const Index bd = x.dim(0), tokens = x.dim(1), head_dim = channels_ / heads_;
  auto split_heads = [&](const Var<S>& t) {
    return reshape(permute(reshape(t, {bd, tokens, heads_, head_dim}), {0, 2, 1, 3}), {bd * heads_, tokens, head_dim});
  };
  const Var<S> q = split_heads(q_(x, lora_on));
  const Var<S> k = split_heads(k_(x));
  const Var<S> v = split_heads(v_(x, lora_on));
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(head_dim));
  const Var<S> attn = softmax(scale(matmul(q, permute(k, {0, 2, 1})), inv_sqrt), -1);
  const Var<S> o = matmul(attn, v);
  return proj_(reshape(permute(reshape(o, {bd, heads_, tokens, head_dim}), {0, 2, 1, 3}), {bd, tokens, channels_}));
}

template <typename S>
Var<S> ViTBlock<S>::operator()(const Var<S>& f, Index batch, Index depth, const EncoderPaths& paths) const {
  const Shape& fs = f.shape();
  if (fs.size() != 4 || fs[1] != channels_) {
    throw DimensionError("ViT block: expected [BD, " + std::to_string(channels_) + ", h, w], got " + shape_str(fs));
  }
  const Index bd = fs[0], h = fs[2], w = fs[3];
  Var<S> x = reshape(permute(f, {0, 2, 3, 1}), {bd, h * w, channels_});
  x = add(x, attention(layer_norm(x, norm1_g_.var, norm1_b_.var), paths.lora));
  x = add(x, mlp2_(gelu(mlp1_(layer_norm(x, norm2_g_.var, norm2_b_.var)))));
  Var<S> out = permute(reshape(x, {bd, h, w, channels_}), {0, 3, 1, 2});
  if (adapter_ && paths.adapters) out = (*adapter_)(out, batch, depth);
  return out;
}

template <typename S>
void ViTBlock<S>::collect(ParameterList<S>& out) {
  out.push_back(&norm1_g_);
  out.push_back(&norm1_b_);
  q_.collect(out);
  k_.collect(out);
  v_.collect(out);
  proj_.collect(out);
  out.push_back(&norm2_g_);
  out.push_back(&norm2_b_);
  mlp1_.collect(out);
  mlp2_.collect(out);
  if (adapter_) adapter_->collect(out);
}

template <typename S>
PatchEmbed<S>::PatchEmbed(const ViTConfig& cfg, std::mt19937_64& rng, const std::string& prefix)
    : channels_(cfg.channels), patch_(cfg.patch) {
  const Index pp = cfg.patch * cfg.patch;
  weight_ = {prefix + ".patch_embed.weight", fan_in_uniform<S>({cfg.channels, pp}, pp, rng), false};
  bias_ = {prefix + ".patch_embed.bias", fan_in_uniform<S>({cfg.channels}, pp, rng), false};
  pos_ = {prefix + ".pos_embed", normal_tensor<S>({cfg.grid(), cfg.grid(), cfg.channels}, 0.0, 0.02, rng), false};
}

template <typename S>
Var<S> PatchEmbed<S>::operator()(const Var<S>& x) const {
  const Shape& xs = x.shape();
  if (xs.size() != 5 || xs[1] != 1) throw DimensionError("patch embed: expected [B, 1, D, H, W], got " + shape_str(xs));
  if (xs[3] % patch_ != 0 || xs[4] % patch_ != 0) {
    throw DimensionError("patch embed: H, W of " + shape_str(xs) + " not divisible by patch " + std::to_string(patch_));
  }
  const Index bd = xs[0] * xs[2], h = xs[3] / patch_, w = xs[4] / patch_;
  Var<S> p = permute(reshape(x, {bd, h, patch_, w, patch_}), {0, 1, 3, 2, 4});
  Var<S> tokens = linear(reshape(p, {bd * h * w, patch_ * patch_}), weight_.var, bias_.var);
  tokens = reshape(tokens, {bd, h, w, channels_});
  const Var<S> pos = (pos_.value().dim(0) == h && pos_.value().dim(1) == w)
                         ? pos_.var
                         : constant(resize_bilinear_hwc(pos_.value(), h, w));
  return permute(add_broadcast(tokens, pos), {0, 3, 1, 2});
}

template <typename S>
void PatchEmbed<S>::collect(ParameterList<S>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
  out.push_back(&pos_);
}

template <typename S>
Encoder<S>::Encoder(const ViTConfig& cfg, std::mt19937_64& rng, const std::string& prefix)
    : cfg_(cfg), embed_((cfg.validate(), cfg), rng, prefix) {
  cfg_.adapter.channels = cfg_.channels;
  blocks_.reserve(cfg.n_blocks);
  for (Index i = 0; i < cfg.n_blocks; ++i) blocks_.emplace_back(cfg_, rng, prefix + ".blocks." + std::to_string(i));
}

template <typename S>
std::vector<Var<S>> Encoder<S>::operator()(const Var<S>& x, const EncoderPaths& paths) const {
  const Index batch = x.dim(0), depth = x.dim(2);
  Var<S> f = embed_(x);
  std::vector<Var<S>> taps;
  const Index first_tap = cfg_.n_blocks - cfg_.n_outputs;
  for (Index i = 0; i < cfg_.n_blocks; ++i) {
    f = blocks_[i](f, batch, depth, paths);
    if (i >= first_tap) taps.push_back(f);
  }
  return taps;
}

template <typename S>
void Encoder<S>::collect(ParameterList<S>& out) {
  embed_.collect(out);
  for (ViTBlock<S>& b : blocks_) b.collect(out);
}

bool is_trainable_name(const std::string& name) {
  return name.find(".lora_") != std::string::npos || name.find(".tpmamba.") != std::string::npos ||
         name.rfind("decoder.", 0) == 0;
}

template <typename S>
FreezePartition<S> freeze_partition(const ParameterList<S>& params) {
  FreezePartition<S> part;
  for (Parameter<S>* p : params) {
    const bool train = is_trainable_name(p->name);
    p->set_trainable(train);
    (train ? part.trainable : part.frozen).push_back(p);
  }
  return part;
}

std::pair<Index, Index> encoder_parameter_counts(const ViTConfig& cfg) {
  const Index c = cfg.channels, hidden = cfg.mlp_ratio * c, pp = cfg.patch * cfg.patch, g = cfg.grid();
  const Index frozen_block = 4 * c + 4 * (c * c + c) + (c * hidden + hidden) + (hidden * c + c);
  Index trainable_block = 2 * (cfg.lora_rank * c + c * cfg.lora_rank);
  if (cfg.use_adapters) {
    TPMambaConfig a = cfg.adapter;
    a.channels = c;
    trainable_block += TPMambaAdapter<float>::count(a);
  }
  const Index frozen = c * pp + c + g * g * c + cfg.n_blocks * frozen_block;
  return {cfg.n_blocks * trainable_block, frozen};
}

#define TPMAMBA_INSTANTIATE_ENCODER(S)  \
  template struct LoRALinear<S>;        \
  template class ViTBlock<S>;           \
  template class PatchEmbed<S>;         \
  template class Encoder<S>;            \
  template FreezePartition<S> freeze_partition(const ParameterList<S>&);

TPMAMBA_INSTANTIATE_ENCODER(float)
TPMAMBA_INSTANTIATE_ENCODER(double)

#undef TPMAMBA_INSTANTIATE_ENCODER

}  // namespace tpmamba
