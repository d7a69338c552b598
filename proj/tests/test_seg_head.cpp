#include "tpmamba/checks.hpp"
#include "tpmamba/init.hpp"
#include "tpmamba/seg_head.hpp"

#include <doctest.h>

#include <cmath>

using namespace tpmamba;

namespace {

LabelMap random_labels(const Shape& s, Index classes, std::mt19937_64& rng) {
  LabelMap y(s);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(classes) - 1);
  for (Index i = 0; i < y.size(); ++i) y[i] = static_cast<std::uint8_t>(pick(rng));
  return y;
}

// Logits of +-m that agree with y: [B, K, D, H, W].
Tensor<double> matching_logits(const LabelMap& y, Index classes, double m) {
  const Index b = y.dim(0), n = y.size() / b;
  Tensor<double> out({b, classes, y.dim(1), y.dim(2), y.dim(3)});
  for (Index bi = 0; bi < b; ++bi) {
    for (Index k = 0; k < classes; ++k) {
      for (Index v = 0; v < n; ++v) out[(bi * classes + k) * n + v] = y[bi * n + v] == k ? m : -m;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("decoder config") {
  DecoderConfig cfg;
  CHECK(cfg.stage_widths() == std::vector<Index>{96, 48, 24, 12});
  CHECK_NOTHROW(cfg.validate());
  cfg.classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  ViTConfig vit;
  vit.patch = 8;
  vit.img_size = 32;
  CHECK(DecoderConfig::for_encoder(vit, 3).stages == 3);
}

TEST_CASE("decoder shapes") {
  std::mt19937_64 rng(1);
  SUBCASE("toy") {
    DecoderConfig cfg;
    cfg.classes = 3;
    Decoder<float> dec(cfg, rng);
    std::vector<Var<float>> taps(4, Var<float>(uniform_tensor<float>({4, 96, 2, 2}, -1, 1, rng)));
    CHECK(dec(taps, 1, 4).shape() == Shape{1, 3, 4, 32, 32});
    taps[2] = Var<float>(Tensor<float>({4, 96, 2, 3}));
    CHECK_THROWS_AS(dec(taps, 1, 4), DimensionError);
    CHECK_THROWS_AS(dec({taps[0]}, 1, 4), DimensionError);
  }
  SUBCASE("full resolution") {
    DecoderConfig cfg;
    cfg.channels = 8;
    Decoder<float> dec(cfg, rng);
    std::vector<Var<float>> taps(4, Var<float>(uniform_tensor<float>({96, 8, 6, 6}, -1, 1, rng)));
    CHECK(dec(taps, 1, 96).shape() == Shape{1, 2, 96, 96, 96});
  }
  SUBCASE("batch of two") {
    DecoderConfig cfg;
    cfg.channels = 8;
    cfg.stages = 2;
    Decoder<float> dec(cfg, rng);
    std::vector<Var<float>> taps(4, Var<float>(uniform_tensor<float>({6, 8, 3, 2}, -1, 1, rng)));
    CHECK(dec(taps, 2, 3).shape() == Shape{2, 2, 3, 12, 8});
  }
}

TEST_CASE("model output matches input resolution") {
  ViTConfig vit;
  vit.channels = 16;
  vit.img_size = 32;
  vit.adapter.rank = 8;
  vit.adapter.d_state = 4;
  SegmentationModel<float> model(vit, 2, 3);
  std::mt19937_64 rng(3);
  for (const Shape& s : {Shape{1, 1, 2, 32, 32}, Shape{1, 1, 5, 48, 16}}) {
    const Shape out = model(Var<float>(uniform_tensor<float>(s, 0, 1, rng))).shape();
    CHECK(out == Shape{1, 2, s[2], s[3], s[4]});
  }
}

TEST_CASE("dice_ce_loss values") {
  std::mt19937_64 rng(2);
  const LabelMap y = random_labels({1, 4, 4, 4}, 2, rng);

  SUBCASE("saturated correct logits") {
    const LossTerms<double> l = dice_ce_loss(Var<double>(matching_logits(y, 2, 20)), y);
    CHECK(l.total.value()[0] < 1e-4);
    CHECK(l.total.value()[0] >= 0);
  }
  SUBCASE("uniform logits") {
    Index fg = 0;
    for (Index i = 0; i < y.size(); ++i) fg += y[i];
    const double n = static_cast<double>(y.size()), eps = kDiceSmooth;
    const LossTerms<double> l = dice_ce_loss(Var<double>(Tensor<double>({1, 2, 4, 4, 4})), y);
    CHECK(std::abs(l.cross_entropy - std::log(2.0)) < 1e-12);
    // p = 1/2 everywhere: class k contributes (|y_k| + eps) / (n/2 + |y_k| + eps).
    double dice = 0;
    for (double yk : {n - fg, static_cast<double>(fg)}) dice += (yk + eps) / (n / 2 + yk + eps);
    CHECK(std::abs(l.dice_loss - (1 - dice / 2)) < 1e-12);
    CHECK(std::abs(l.total.value()[0] - (l.cross_entropy + l.dice_loss)) < 1e-12);
  }
  SUBCASE("bounds on random logits") {
    for (int t = 0; t < 20; ++t) {
      const LabelMap y3 = random_labels({2, 3, 2, 2}, 3, rng);
      const LossTerms<double> l = dice_ce_loss(Var<double>(uniform_tensor<double>({2, 3, 3, 2, 2}, -5, 5, rng)), y3);
      CHECK(l.cross_entropy >= 0);
      CHECK(l.dice_loss >= 0);
      CHECK(l.dice_loss <= 1);
    }
  }
  SUBCASE("errors") {
    LabelMap bad = y;
    bad[5] = 2;
    CHECK_THROWS_AS(dice_ce_loss(Var<double>(Tensor<double>({1, 2, 4, 4, 4})), bad), InputError);
    CHECK_THROWS_AS(dice_ce_loss(Var<double>(Tensor<double>({1, 2, 4, 4, 3})), y), DimensionError);
  }
}

TEST_CASE("dice_ce_loss gradient") {
  std::mt19937_64 rng(4);
  const LabelMap y = random_labels({1, 4, 4, 4}, 2, rng);
  Parameter<double> p("logits", uniform_tensor<double>({1, 2, 4, 4, 4}, -2, 2, rng), true);
  GradCheckOptions opt;
  opt.samples_per_parameter = 128;
  const auto res = grad_check([&] { return dice_ce_loss(p.var, y).total; }, {&p}, opt);
  CHECK(res.max_rel_error < 1e-3);
  CHECK(res.coordinates_checked == 128);
}

TEST_CASE("dice_score") {
  LabelMap a({1, 1, 2, 2}, {1, 1, 0, 0}), b({1, 1, 2, 2}, {0, 1, 1, 0}), c({1, 1, 2, 2}, {0, 0, 1, 1});
  CHECK(dice_score(a, a, 2).mean == 1.0);
  CHECK(dice_score(a, b, 2).per_class[0] == 0.5);
  CHECK(dice_score(a, c, 2).mean == 0.0);
  CHECK(dice_score(a, b, 2).mean == dice_score(b, a, 2).mean);

  // Class 2 absent from both: scores 1; present only in the prediction: 0.
  const DiceResult r = dice_score(a, a, 3);
  REQUIRE(r.per_class.size() == 2);
  CHECK(r.per_class[1] == 1.0);
  LabelMap d({1, 1, 2, 2}, {1, 2, 0, 0});
  const DiceResult r2 = dice_score(d, a, 3);
  CHECK(r2.per_class[1] == 0.0);
  CHECK(std::abs(r2.per_class[0] - 2.0 / 3.0) < 1e-15);
  CHECK(std::abs(r2.mean - 1.0 / 3.0) < 1e-15);

  std::mt19937_64 rng(5);
  for (int t = 0; t < 10; ++t) {
    const LabelMap p = random_labels({1, 3, 3, 3}, 4, rng), q = random_labels({1, 3, 3, 3}, 4, rng);
    const DiceResult pq = dice_score(p, q, 4), qp = dice_score(q, p, 4);
    for (std::size_t k = 0; k < pq.per_class.size(); ++k) CHECK(pq.per_class[k] == qp.per_class[k]);
  }
}

TEST_CASE("argmax_labels") {
  const Tensor<float> logits({1, 3, 1, 1, 2}, {0, 5, 2, 1, 1, 0});
  const LabelMap l = argmax_labels(logits);
  CHECK(l.shape() == Shape{1, 1, 1, 2});
  CHECK(l[0] == 1);
  CHECK(l[1] == 0);
}

TEST_CASE("window placement") {
  CHECK(window_starts(144, 96, 0.5) == std::vector<Index>{0, 48});
  CHECK(window_starts(96, 96, 0.5) == std::vector<Index>{0});
  CHECK(window_starts(100, 96, 0.5) == std::vector<Index>{0, 4});
  CHECK(window_starts(200, 96, 0.5) == std::vector<Index>{0, 48, 96, 104});
  CHECK(window_starts(200, 96, 0.0) == std::vector<Index>{0, 96, 104});

  const Tensor<double> g = gaussian_importance<double>({8, 8, 8});
  CHECK(g.shape() == Shape{8, 8, 8});
  for (Index i = 0; i < g.size(); ++i) CHECK(g[i] > 0);
  CHECK(g.array().maxCoeff() <= 1.0);
}

TEST_CASE("sliding window inference") {
  std::mt19937_64 rng(6);
  SlidingWindowOptions opt;
  opt.window = {4, 8, 8};

  SUBCASE("constant model") {
    const WindowModel<double> model = [](const Tensor<double>& w) {
      Tensor<double> out({1, 3, w.dim(2), w.dim(3), w.dim(4)});
      const Index n = w.size();
      for (Index i = 0; i < n; ++i) {
        out[i] = 0.25;
        out[n + i] = -1.5;
        out[2 * n + i] = 2.0;
      }
      return out;
    };
    const auto out = sliding_window_infer<double>(uniform_tensor<double>({1, 1, 7, 13, 20}, 0, 1, rng), model, opt);
    CHECK(out.logits.shape() == Shape{1, 3, 7, 13, 20});
    const Index n = 7 * 13 * 20;
    for (Index i = 0; i < n; ++i) {
      CHECK(std::abs(out.logits[i] - 0.25) < 1e-12);
      CHECK(std::abs(out.logits[n + i] + 1.5) < 1e-12);
      CHECK(std::abs(out.logits[2 * n + i] - 2.0) < 1e-12);
      CHECK(out.labels[i] == 2);
    }
  }

  SUBCASE("position-dependent model sums to one") {
    const WindowModel<float> model = [](const Tensor<float>& w) {
      Tensor<float> out({1, 2, w.dim(2), w.dim(3), w.dim(4)});
      const Index n = w.size();
      for (Index i = 0; i < n; ++i) {
        out[i] = 4 * w[i] - 2;
        out[n + i] = std::sin(static_cast<float>(i));
      }
      return out;
    };
    const auto out = sliding_window_infer<float>(uniform_tensor<float>({1, 1, 9, 11, 17}, 0, 1, rng), model, opt);
    const Index n = 9 * 11 * 17;
    for (Index i = 0; i < n; ++i) CHECK(std::abs(out.probabilities[i] + out.probabilities[n + i] - 1.0f) < 1e-5f);
  }

  SUBCASE("single window equals direct forward") {
    ViTConfig vit;
    vit.channels = 16;
    vit.img_size = 32;
    vit.adapter.rank = 8;
    vit.adapter.d_state = 4;
    SegmentationModel<float> seg(vit, 2, 7);
    const WindowModel<float> model = [&](const Tensor<float>& w) { return seg(Var<float>(w)).value(); };
    SlidingWindowOptions one;
    one.window = {3, 32, 32};
    const Tensor<float> x = uniform_tensor<float>({1, 1, 3, 32, 32}, 0, 1, rng);
    const auto out = sliding_window_infer<float>(x, model, one);
    CHECK(bit_equal(out.logits, model(x)));
  }

  SUBCASE("small volumes are padded and cropped back") {
    const auto out = sliding_window_infer<double>(
        uniform_tensor<double>({1, 1, 2, 5, 6}, 0, 1, rng),
        [](const Tensor<double>& w) {
          CHECK(w.shape() == Shape{1, 1, 4, 8, 8});
          return Tensor<double>({1, 2, 4, 8, 8});
        },
        opt);
    CHECK(out.labels.shape() == Shape{1, 2, 5, 6});
  }

  SUBCASE("errors") {
    const WindowModel<double> id = [](const Tensor<double>& w) { return w; };
    CHECK_THROWS_AS(sliding_window_infer<double>(Tensor<double>({1, 1, 0, 4, 4}), id, opt), InputError);
    CHECK_THROWS_AS(sliding_window_infer<double>(Tensor<double>({1, 4, 4, 4}), id, opt), DimensionError);
  }
}

TEST_CASE("decoder gradient") {
  std::mt19937_64 rng(8);
  DecoderConfig cfg;
  cfg.channels = 4;
  cfg.stages = 2;
  cfg.widths = {4, 2};
  Decoder<double> dec(cfg, rng);
  ParameterList<double> ps;
  dec.collect(ps);
  const std::vector<Var<double>> taps{Var<double>(uniform_tensor<double>({2, 4, 1, 1}, -1, 1, rng)),
                                      Var<double>(uniform_tensor<double>({2, 4, 1, 1}, -1, 1, rng)),
                                      Var<double>(uniform_tensor<double>({2, 4, 1, 1}, -1, 1, rng)),
                                      Var<double>(uniform_tensor<double>({2, 4, 1, 1}, -1, 1, rng))};
  const LabelMap y = random_labels({1, 2, 4, 4}, 2, rng);
  const auto res = grad_check([&] { return dice_ce_loss(dec(taps, 1, 2), y).total; }, ps);
  CHECK(res.max_rel_error < 1e-3);
  CHECK(res.parameters_checked == static_cast<Index>(ps.size()));
}
