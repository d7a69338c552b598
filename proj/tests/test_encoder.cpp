#include "tpmamba/checks.hpp"
#include "tpmamba/encoder.hpp"
#include "tpmamba/init.hpp"
#include "tpmamba/optim.hpp"
#include "tpmamba/seg_head.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

using namespace tpmamba;

namespace {

ViTConfig toy(Index c = 16, Index r = 8) {
  ViTConfig cfg;
  cfg.channels = c;
  cfg.n_heads = 4;
  cfg.img_size = 32;
  cfg.adapter.rank = r;
  cfg.adapter.d_state = 4;
  return cfg;
}

// Reorders the leading axis: out[i] = t[order[i]].
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& t, const std::vector<Index>& order) {
  Tensor<S> out(t.shape());
  const Index row = t.size() / t.dim(0);
  for (Index i = 0; i < t.dim(0); ++i) {
    out.array().segment(i * row, row) = t.array().segment(order[i] * row, row);
  }
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  ViTConfig cfg = toy();
  CHECK_NOTHROW(cfg.validate());
  cfg.n_heads = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = toy();
  cfg.n_blocks = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = toy();
  cfg.adapter.rank = 6;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.use_adapters = false;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("patch embedding treats slices as batch") {
  std::mt19937_64 rng(1);
  ViTConfig cfg = toy();
  PatchEmbed<float> embed(cfg, rng, "encoder");
  CHECK(embed(Var<float>(Tensor<float>({1, 1, 4, 32, 32}))).shape() == Shape{4, 16, 2, 2});
  CHECK(embed(Var<float>(Tensor<float>({2, 1, 3, 48, 32}))).shape() == Shape{6, 16, 3, 2});
  CHECK_THROWS_AS(embed(Var<float>(Tensor<float>({1, 1, 4, 30, 32}))), DimensionError);
  CHECK_THROWS_AS(embed(Var<float>(Tensor<float>({1, 2, 4, 32, 32}))), DimensionError);

  SUBCASE("full-size input") {
    ViTConfig big = toy();
    big.img_size = 96;
    PatchEmbed<float> e(big, rng, "encoder");
    CHECK(e(Var<float>(Tensor<float>({1, 1, 96, 96, 96}))).shape() == Shape{96, 16, 6, 6});
  }

  SUBCASE("depth independence") {
    // Volume b repeats slice 1 of volume a at every depth.
    const Tensor<float> a = uniform_tensor<float>({1, 1, 3, 32, 32}, -1, 1, rng);
    Tensor<float> b({1, 1, 5, 32, 32});
    for (Index d = 0; d < 5; ++d) b.array().segment(d * 1024, 1024) = a.array().segment(1024, 1024);
    const Tensor<float> ea = embed(Var<float>(a)).value(), eb = embed(Var<float>(b)).value();
    const Index n = 16 * 4;
    for (Index d = 0; d < 5; ++d) {
      CHECK(bit_equal(Tensor<float>({n}, eb.array().segment(d * n, n)), Tensor<float>({n}, ea.array().segment(n, n))));
    }
  }
}

TEST_CASE("attention") {
  std::mt19937_64 rng(2);
  ViTConfig cfg = toy();
  ViTBlock<double> blk(cfg, rng, "b");

  SUBCASE("single token reduces to the value path") {
    const Var<double> x(uniform_tensor<double>({3, 1, 16}, -1, 1, rng));
    randomize_trainables<double>({&blk.value().lora_a, &blk.value().lora_b, &blk.query().lora_a, &blk.query().lora_b},
                                 rng);
    ParameterList<double> ps;
    blk.collect(ps);
    const Parameter<double>* proj_w = nullptr;
    const Parameter<double>* proj_b = nullptr;
    for (const Parameter<double>* p : ps) {
      if (p->name == "b.attn.proj.weight") proj_w = p;
      if (p->name == "b.attn.proj.bias") proj_b = p;
    }
    REQUIRE(proj_w);
    REQUIRE(proj_b);
    const Tensor<double> expect = linear(blk.value()(x, true), proj_w->var, proj_b->var).value();
    CHECK(max_rel_diff(blk.attention(x, true).value(), expect) < 1e-12);
  }

  SUBCASE("LoRA at init is exact") {
    const Var<double> x(uniform_tensor<double>({2, 9, 16}, -1, 1, rng));
    CHECK(bit_equal(blk.attention(x, true).value(), blk.attention(x, false).value()));
    randomize_trainables<double>({&blk.value().lora_b}, rng);
    CHECK_FALSE(bit_equal(blk.attention(x, true).value(), blk.attention(x, false).value()));
  }

  SUBCASE("token permutation equivariance") {
    const Tensor<double> x = uniform_tensor<double>({1, 9, 16}, -1, 1, rng);
    std::vector<Index> order(9);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const Tensor<double> y = blk.attention(Var<double>(x), true).value();
    const Tensor<double> xp = gather_rows(reshape(Var<double>(x), {9, 16}).value(), order);
    const Tensor<double> yp = blk.attention(reshape(Var<double>(xp), {1, 9, 16}), true).value();
    CHECK(max_rel_diff(reshape(Var<double>(yp), {9, 16}).value(), gather_rows(reshape(Var<double>(y), {9, 16}).value(), order)) <
          1e-12);
  }
}

TEST_CASE("block and encoder shapes") {
  std::mt19937_64 rng(3);
  ViTConfig cfg = toy();
  ViTBlock<float> blk(cfg, rng, "b");
  const Var<float> f(uniform_tensor<float>({6, 16, 6, 6}, -1, 1, rng));
  CHECK(blk(f, 1, 6, {}).shape() == Shape{6, 16, 6, 6});
  CHECK_THROWS_AS(blk(Var<float>(Tensor<float>({6, 8, 6, 6})), 1, 6, {}), DimensionError);

  Encoder<float> enc(cfg, rng);
  const auto taps = enc(Var<float>(uniform_tensor<float>({1, 1, 4, 32, 32}, 0, 1, rng)));
  REQUIRE(taps.size() == 4);
  for (const auto& t : taps) CHECK(t.shape() == Shape{4, 16, 2, 2});
}

TEST_CASE("taps come from the last blocks") {
  std::mt19937_64 rng(4);
  for (Index n : {4, 12}) {
    ViTConfig cfg = toy(8, 4);
    cfg.n_blocks = n;
    cfg.use_adapters = false;
    Encoder<double> enc(cfg, rng);
    const Var<double> x(uniform_tensor<double>({1, 1, 2, 32, 32}, 0, 1, rng));
    const auto taps = enc(x);
    REQUIRE(taps.size() == 4);
    // Re-run the chain by hand.
    ParameterList<double> ps;
    enc.collect(ps);
    PatchEmbed<double> embed(cfg, rng, "x");
    ParameterList<double> eps;
    embed.collect(eps);
    for (Index i = 0; i < 3; ++i) eps[i]->value() = ps[i]->value();
    Var<double> f = embed(x);
    std::vector<Tensor<double>> outs;
    for (auto& b : enc.blocks()) {
      f = b(f, 1, 2, {});
      outs.push_back(f.value());
    }
    for (Index t = 0; t < 4; ++t) CHECK(bit_equal(taps[t].value(), outs[n - 4 + t]));
  }
}

TEST_CASE("freeze partition") {
  ViTConfig cfg;
  cfg.adapter.rank = 24;
  SegmentationModel<float> model(cfg, 2, 5);
  ParameterList<float> ps = model.parameters();
  const FreezePartition<float> part = freeze_partition(ps);
  CHECK(part.trainable.size() + part.frozen.size() == ps.size());
  std::set<const Parameter<float>*> seen;
  std::set<std::string> names;
  for (const auto* p : part.trainable) {
    CHECK(seen.insert(p).second);
    CHECK(p->trainable);
    CHECK(is_trainable_name(p->name));
  }
  for (const auto* p : part.frozen) {
    CHECK(seen.insert(p).second);
    CHECK_FALSE(p->trainable);
    const bool backbone = p->name.find("patch_embed") != std::string::npos || p->name.find("pos_embed") != std::string::npos ||
                          p->name.find(".attn.") != std::string::npos || p->name.find(".mlp.") != std::string::npos ||
                          p->name.find(".norm") != std::string::npos;
    CHECK_MESSAGE(backbone, p->name);
  }
  for (const auto* p : ps) CHECK(names.insert(p->name).second);

  const auto [trainable, frozen] = encoder_parameter_counts(cfg);
  ParameterList<float> enc_params;
  model.encoder().collect(enc_params);
  Index t = 0, f = 0;
  for (const auto* p : enc_params) (p->trainable ? t : f) += p->value().size();
  CHECK(t == trainable);
  CHECK(f == frozen);
  CHECK(static_cast<double>(trainable) / static_cast<double>(trainable + frozen) < 0.35);
}

TEST_CASE("an optimizer step leaves frozen tensors untouched") {
  ViTConfig cfg = toy();
  SegmentationModel<float> model(cfg, 2, 6);
  ParameterList<float> ps = model.parameters();
  std::vector<Tensor<float>> before;
  for (const auto* p : ps) before.push_back(p->value());
  std::mt19937_64 rng(6);
  const Tensor<float> x = uniform_tensor<float>({1, 1, 3, 32, 32}, 0, 1, rng);
  LabelMap y({1, 3, 32, 32});
  for (Index i = 0; i < y.size(); ++i) y[i] = (i % 7) < 3;
  AdamW<float> opt(ps);
  Tape<float> tape;
  Var<float> loss;
  {
    TapeScope<float> scope(tape);
    loss = dice_ce_loss(model(Var<float>(x)), y).total;
  }
  tape.backward(loss);
  for (const auto* p : ps) {
    if (!p->trainable) CHECK_FALSE(p->var.has_grad());
  }
  opt.step(1e-3);
  Index changed = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i]->trainable) {
      changed += !bit_equal(ps[i]->value(), before[i]);
    } else {
      CHECK_MESSAGE(bit_equal(ps[i]->value(), before[i]), ps[i]->name);
    }
  }
  CHECK(changed > 0);
}

TEST_CASE("init transparency") {
  const SuiteReport r = init_transparency_suite(toy(), 7, 3);
  for (const CheckLine& l : r.lines) CHECK_MESSAGE(l.pass, l.name);
}

TEST_CASE("slice permutation") {
  std::mt19937_64 rng(8);
  ViTConfig cfg = toy();
  Encoder<double> enc(cfg, rng);
  ParameterList<double> ps;
  enc.collect(ps);
  freeze_partition(ps);
  randomize_trainables(ps, rng);

  const Index D = 4;
  const Tensor<double> x = uniform_tensor<double>({1, 1, D, 32, 32}, 0, 1, rng);
  const std::vector<Index> order{2, 0, 3, 1};
  const Tensor<double> xp =
      reshape(Var<double>(gather_rows(reshape(Var<double>(x), {D, 32, 32}).value(), order)), {1, 1, D, 32, 32}).value();

  const EncoderPaths no_adapters{true, false};
  const auto a = enc(Var<double>(x), no_adapters), b = enc(Var<double>(xp), no_adapters);
  for (std::size_t t = 0; t < a.size(); ++t) CHECK(max_rel_diff(b[t].value(), gather_rows(a[t].value(), order)) < 1e-12);

  const auto c = enc(Var<double>(x)), d = enc(Var<double>(xp));
  CHECK(max_rel_diff(d.back().value(), gather_rows(c.back().value(), order)) > 1e-6);
}

TEST_CASE("gradients reach only trainable parameters") {
  std::mt19937_64 rng(9);
  ViTConfig cfg = toy(8, 4);
  cfg.adapter.d_state = 2;
  ViTBlock<double> blk(cfg, rng, "b");
  ParameterList<double> ps;
  blk.collect(ps);
  freeze_partition(ps);
  randomize_trainables(ps, rng);
  const Var<double> f(uniform_tensor<double>({3, 8, 2, 2}, -1, 1, rng));
  const Tensor<double> w = uniform_tensor<double>({3, 8, 2, 2}, -1, 1, rng);
  const auto res = grad_check([&] { return weighted_sum(blk(f, 1, 3, {}), w); }, ps);
  CHECK(res.max_rel_error < 1e-3);
  CHECK(res.parameters_checked > 0);
  for (const auto* p : ps) {
    if (!p->trainable) CHECK_FALSE(p->var.has_grad());
  }
}
