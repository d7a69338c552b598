#include "tpmamba/checks.hpp"
#include "tpmamba/init.hpp"
#include "tpmamba/ssm.hpp"

#include <doctest.h>

#include <chrono>
#include <cmath>

using namespace tpmamba;

namespace {

struct Problem {
  Var<double> u, delta, a, b, c, d;
};

Problem random_problem(Index bs, Index l, Index e, Index n, std::mt19937_64& rng) {
  Tensor<double> a = uniform_tensor<double>({e, n}, -1, 1, rng);
  a.array() = -a.array().exp();
  return {Var<double>(uniform_tensor<double>({bs, l, e}, -1, 1, rng)),
          Var<double>(uniform_tensor<double>({bs, l, e}, 1e-3, 1, rng)),
          Var<double>(a),
          Var<double>(uniform_tensor<double>({bs, l, n}, -1, 1, rng)),
          Var<double>(uniform_tensor<double>({bs, l, n}, -1, 1, rng)),
          Var<double>(uniform_tensor<double>({e}, -1, 1, rng))};
}

Tensor<double> run_fast(const Problem& p, Index chunk = kScanChunk) {
  return selective_scan(p.u, p.delta, p.a, p.b, p.c, p.d, chunk).value();
}

Tensor<double> run_ref(const Problem& p) {
  return selective_scan_sequential(p.u, p.delta, p.a, p.b, p.c, p.d).value();
}

}  // namespace

TEST_CASE("discretize") {
  SUBCASE("small step: A_bar -> 1, B_bar -> 0") {
    const auto [ab, bb] = discretize(Tensor<double>({1, 1}, {-3.0}), Tensor<double>({1}, {2.0}), Tensor<double>({1}, {1e-12}));
    CHECK(ab[0] == doctest::Approx(1.0));
    CHECK(std::abs(bb[0]) < 1e-11);
  }
  SUBCASE("closed forms") {
    const auto [ab, bb] = discretize(Tensor<double>({1, 1}, {-1.0}), Tensor<double>({1}, {1.0}), Tensor<double>({1}, {std::log(2.0)}));
    CHECK(ab[0] == doctest::Approx(0.5).epsilon(1e-15));
    const auto [ab2, bb2] = discretize(Tensor<double>({1, 1}, {-std::exp(0.0)}), Tensor<double>({1}, {1.0}), Tensor<double>({1}, {1.0}));
    CHECK(ab2[0] == doctest::Approx(std::exp(-1.0)));
    CHECK(bb2[0] == 1.0);
  }
  SUBCASE("non-finite step") {
    CHECK_THROWS_AS(discretize(Tensor<double>({1, 1}, {-1.0}), Tensor<double>({1}, {1.0}), Tensor<double>({1}, {NAN})),
                    NumericError);
  }
}

TEST_CASE("recurrence oracle") {
  std::mt19937_64 rng(11);
  SUBCASE("L=1 has no recurrence") {
    const Problem p = random_problem(1, 1, 3, 2, rng);
    const Tensor<double> y = run_ref(p);
    for (Index e = 0; e < 3; ++e) {
      double expect = p.d.value()[e] * p.u.value()[e];
      for (Index n = 0; n < 2; ++n) expect += p.c.value()[n] * p.delta.value()[e] * p.b.value()[n] * p.u.value()[e];
      CHECK(y[e] == doctest::Approx(expect).epsilon(1e-14));
    }
    CHECK(bit_equal(run_fast(p), y));
  }
  SUBCASE("huge step makes the scan memoryless") {
    Problem p = random_problem(1, 6, 2, 3, rng);
    p.delta.value().fill(1e4);
    const Tensor<double> y = run_ref(p);
    for (Index t = 0; t < 6; ++t) {
      for (Index e = 0; e < 2; ++e) {
        double expect = p.d.value()[e] * p.u.value().at({0, t, e});
        for (Index n = 0; n < 3; ++n) expect += p.c.value().at({0, t, n}) * 1e4 * p.b.value().at({0, t, n}) * p.u.value().at({0, t, e});
        CHECK(y.at({0, t, e}) == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
  SUBCASE("causality") {
    Problem p = random_problem(2, 9, 3, 4, rng);
    const Tensor<double> before = run_ref(p), before_fast = run_fast(p, 4);
    for (Index b = 0; b < 2; ++b) {
      for (Index e = 0; e < 3; ++e) p.u.value().at({b, 8, e}) *= -1;
    }
    const Tensor<double> after = run_ref(p), after_fast = run_fast(p, 4);
    for (Index i = 0; i < before.size(); ++i) {
      if ((i / 3) % 9 == 8) continue;
      CHECK(before[i] == after[i]);
      CHECK(before_fast[i] == after_fast[i]);
    }
  }
  SUBCASE("empty sequence") {
    const Problem p = random_problem(2, 0, 3, 2, rng);
    CHECK(run_ref(p).shape() == Shape{2, 0, 3});
    CHECK(run_fast(p).shape() == Shape{2, 0, 3});
  }
}

TEST_CASE("chunked scan matches the oracle") {
  std::mt19937_64 rng(12);
  for (Index l : {1, 2, 7, 63, 64, 65, 513}) {
    for (Index chunk : {1, 5, 64}) {
      const Problem p = random_problem(2, l, 8, 4, rng);
      CHECK(max_rel_diff(run_fast(p, chunk), run_ref(p)) < 1e-10);
    }
  }
  const SuiteReport r = scan_suite(5, 100);
  for (const CheckLine& line : r.lines) CHECK_MESSAGE(line.pass, line.name);
}

TEST_CASE("scan state stays bounded over long sequences at f32") {
  std::mt19937_64 rng(13);
  const Index l = 10000, e = 4, n = 16;
  MambaBlockConfig cfg;
  cfg.d_model = 2;
  cfg.d_state = n;
  const SSMParams<float> params = SSMParams<float>::init(cfg, rng, "phi");
  Tensor<float> a(params.a_log.value().shape());
  a.array() = -params.a_log.value().array().exp();
  const Var<float> y = selective_scan(Var<float>(uniform_tensor<float>({1, l, e}, -1, 1, rng)),
                                      Var<float>(uniform_tensor<float>({1, l, e}, 1e-3, 0.1f, rng)), Var<float>(a),
                                      Var<float>(uniform_tensor<float>({1, l, n}, -1, 1, rng)),
                                      Var<float>(uniform_tensor<float>({1, l, n}, -1, 1, rng)),
                                      Var<float>(Tensor<float>({e}, 1.0f)));
  CHECK(y.value().array().isFinite().all());
  CHECK(y.value().array().abs().maxCoeff() < 1e3f);
}

TEST_CASE("scan runtime is linear in length") {
  std::mt19937_64 rng(14);
  auto time_of = [&](Index l) {
    const Problem p = random_problem(1, l, 16, 16, rng);
    double best = 1e9;
    for (int rep = 0; rep < 3; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      run_fast(p);
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return best;
  };
  CHECK(time_of(4096) / time_of(512) <= 10.0);
}

TEST_CASE("mamba block") {
  std::mt19937_64 rng(15);
  MambaBlockConfig cfg;
  cfg.d_model = 16;
  CHECK(cfg.inner() == 32);
  CHECK(cfg.resolved_dt_rank() == 1);
  cfg.d_model = 24;
  CHECK(cfg.resolved_dt_rank() == 2);
  cfg.d_model = 16;
  MambaBlock<float> block(cfg, rng, "phi_hw");
  const Var<float> seq(uniform_tensor<float>({6, 128, 16}, -1, 1, rng));
  SUBCASE("identity at init") {
    const Var<float> y = block(seq);
    CHECK(y.shape() == Shape{6, 128, 16});
    CHECK(bit_equal(y.value(), seq.value()));
  }
  SUBCASE("parameter invariants") {
    const auto& p = block.params();
    CHECK(p.a_log.value().at({3, 0}) == 0.0f);
    CHECK(p.a_log.value().at({3, 15}) == doctest::Approx(std::log(16.0)));
    CHECK((p.d_skip.value().array() == 1.0f).all());
    CHECK(p.out_proj.value().array().abs().maxCoeff() == 0.0f);
    for (Index i = 0; i < p.dt_proj_bias.value().size(); ++i) {
      const double b = p.dt_proj_bias.value()[i];
      const double dt = std::log1p(std::exp(b));
      CHECK(dt >= 1e-3 - 1e-6);
      CHECK(dt <= 0.1 + 1e-6);
    }
    ParameterList<float> ps;
    block.collect(ps);
    CHECK(parameter_count(ps) == SSMParams<float>::count(cfg));
  }
  SUBCASE("gradient at (1, 8, 4), N=2") {
    MambaBlockConfig small;
    small.d_model = 4;
    small.d_state = 2;
    MambaBlock<double> b(small, rng, "phi");
    ParameterList<double> ps;
    b.collect(ps);
    randomize_trainables(ps, rng);
    const Var<double> x(uniform_tensor<double>({1, 8, 4}, -1, 1, rng));
    CHECK(grad_check([&] { return sum(mul(b(x), b(x))); }, ps).max_rel_error < 1e-3);
  }
  CHECK_THROWS_AS(MambaBlockConfig{}.validate(), ConfigError);
}
