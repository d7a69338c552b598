#include "tpmamba/grad_check.hpp"
#include "tpmamba/init.hpp"
#include "tpmamba/ops.hpp"

#include <doctest.h>

#include <cmath>

using namespace tpmamba;

namespace {

template <typename S>
Var<S> leaf(Shape s, std::initializer_list<S> v) {
  return Var<S>(Tensor<S>(std::move(s), v));
}

Var<double> rand_var(const Shape& s, std::mt19937_64& rng) { return Var<double>(uniform_tensor<double>(s, -1, 1, rng)); }

void check_close(const Tensor<double>& a, std::initializer_list<double> expect, double tol) {
  REQUIRE(a.size() == static_cast<Index>(expect.size()));
  Index i = 0;
  for (double e : expect) {
    CHECK(std::abs(a[i] - e) <= tol * std::max(1.0, std::abs(e)));
    ++i;
  }
}

}  // namespace

TEST_CASE("tensor layout is row-major with checked extents") {
  Tensor<float> t({2, 3, 4});
  CHECK(t.size() == 24);
  const Shape st = strides_of(t.shape());
  CHECK(st == Shape{12, 4, 1});
  t.at({1, 2, 3}) = 7.f;
  CHECK(t[23] == 7.f);
  CHECK(t.dim(-1) == 4);
  CHECK_THROWS_AS(t.reshaped({5, 5}), DimensionError);
}

TEST_CASE("matmul") {
  const auto i2 = leaf<double>({2, 2}, {1, 0, 0, 1});
  const auto m = leaf<double>({2, 2}, {1, 2, 3, 4});
  CHECK(bit_equal(matmul(i2, m).value(), m.value()));
  check_close(matmul(m, leaf<double>({2, 2}, {5, 6, 7, 8})).value(), {19, 22, 43, 50}, 1e-15);
  CHECK_THROWS_AS(matmul(m, leaf<double>({3, 1}, {1, 2, 3})), DimensionError);
  try {
    matmul(m, leaf<double>({3, 1}, {1, 2, 3}));
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("(2, 2)") != std::string::npos);
    CHECK(std::string(e.what()).find("(3, 1)") != std::string::npos);
  }

  std::mt19937_64 rng(3);
  Parameter<double> a("a", uniform_tensor<double>({3, 4}, -1, 1, rng), true);
  Parameter<double> b("b", uniform_tensor<double>({4, 2}, -1, 1, rng), true);
  const auto res = grad_check([&] { return sum(matmul(a.var, b.var)); }, {&a, &b});
  CHECK(res.max_rel_error < 1e-6);
  CHECK(res.parameters_checked == 2);
}

TEST_CASE("conv3d") {
  SUBCASE("1x1x1 identity channel map") {
    std::mt19937_64 rng(1);
    const auto x = rand_var({2, 3, 4, 2, 5}, rng);
    Tensor<double> w({3, 3, 1, 1, 1});
    for (Index c = 0; c < 3; ++c) w.at({c, c, 0, 0, 0}) = 1;
    CHECK(bit_equal(conv3d(x, constant(w), Var<double>{}, {}).value(), x.value()));
  }
  SUBCASE("depth profile of an all-ones kernel") {
    const Var<double> x(Tensor<double>({1, 1, 5, 1, 1}, 1.0));
    const Var<double> w(Tensor<double>({1, 1, 3, 1, 1}, 1.0));
    Conv3dOptions opt;
    opt.padding = {1, 0, 0};
    check_close(conv3d(x, w, Var<double>{}, opt).value(), {2, 3, 3, 3, 2}, 0);
  }
  SUBCASE("dilation 8 sees 17 slices") {
    Tensor<double> x({1, 1, 40, 1, 1});
    const Var<double> w(Tensor<double>({1, 1, 3, 1, 1}, 1.0));
    const auto opt = Conv3dOptions::same({3, 1, 1}, {8, 1, 1});
    CHECK(opt.padding[0] == 8);
    // Output at depth 20 depends on inputs 12..28; probe each input slice.
    Index lo = 100, hi = -1;
    for (Index z = 0; z < 40; ++z) {
      Tensor<double> probe = x;
      probe[z] = 1;
      if (conv3d(constant(probe), w, Var<double>{}, opt).value()[20] != 0) {
        lo = std::min(lo, z);
        hi = std::max(hi, z);
      }
    }
    CHECK(hi - lo + 1 == 17);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(Conv3dOptions::same({2, 1, 1}, {1, 1, 1}), ConfigError);
    const Var<double> x(Tensor<double>({1, 2, 3, 3, 3}));
    const Var<double> w(Tensor<double>({1, 3, 1, 1, 1}));
    CHECK_THROWS_AS(conv3d(x, w, Var<double>{}, {}), DimensionError);
  }
  SUBCASE("linearity") {
    std::mt19937_64 rng(2);
    const auto x = rand_var({1, 2, 4, 3, 3}, rng), y = rand_var({1, 2, 4, 3, 3}, rng), w = rand_var({3, 2, 3, 3, 3}, rng);
    const auto opt = Conv3dOptions::same({3, 3, 3}, {1, 1, 1});
    const auto f = [&](const Var<double>& v) { return conv3d(v, w, Var<double>{}, opt).value(); };
    const Tensor<double> lhs = f(add(x, y)), rhs_a = f(x), rhs_b = f(y);
    Tensor<double> rhs = rhs_a;
    rhs.array() += rhs_b.array();
    CHECK((lhs.array() - rhs.array()).abs().maxCoeff() <= 1e-5 * rhs.array().abs().maxCoeff());
    Tensor<double> scaled = f(scale(x, 2.5));
    CHECK((scaled.array() - 2.5 * rhs_a.array()).abs().maxCoeff() <= 1e-5 * scaled.array().abs().maxCoeff());
  }
}

TEST_CASE("matmul linearity") {
  std::mt19937_64 rng(5);
  const auto a = rand_var({3, 4}, rng), b = rand_var({4, 2}, rng), c = rand_var({4, 2}, rng);
  Tensor<double> sep = matmul(a, b).value();
  sep.array() += matmul(a, c).value().array();
  const Tensor<double> joint = matmul(a, add(b, c)).value();
  CHECK((sep.array() - joint.array()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("conv1d_depthwise is causal") {
  check_close(conv1d_depthwise(leaf<double>({1, 1, 3}, {1, 2, 3}), leaf<double>({1, 1, 2}, {1, 1})).value(), {1, 3, 5}, 0);
  std::mt19937_64 rng(4);
  const auto x = rand_var({2, 3, 6}, rng);
  CHECK(bit_equal(conv1d_depthwise(x, Var<double>(Tensor<double>({3, 1, 1}, 1.0))).value(), x.value()));
  const auto w = rand_var({3, 1, 4}, rng);
  Tensor<double> bumped = x.value();
  for (Index b = 0; b < 2; ++b) {
    for (Index e = 0; e < 3; ++e) bumped.at({b, e, 5}) += 10;
  }
  const Tensor<double> y0 = conv1d_depthwise(x, w).value(), y1 = conv1d_depthwise(constant(bumped), w).value();
  for (Index b = 0; b < 2; ++b) {
    for (Index e = 0; e < 3; ++e) {
      for (Index t = 0; t < 5; ++t) CHECK(y0.at({b, e, t}) == y1.at({b, e, t}));
    }
  }
  CHECK_THROWS_AS(conv1d_depthwise(x, rand_var({2, 1, 4}, rng)), DimensionError);
}

TEST_CASE("normalisation") {
  const Var<double> one(Tensor<double>({2}, 1.0)), zero(Tensor<double>({2}));
  check_close(layer_norm(leaf<double>({1, 2}, {1, 3}), one, zero).value(), {-1, 1}, 1e-4);
  const Tensor<double> flat = layer_norm(Var<double>(Tensor<double>({3, 2}, 4.0)), one, zero).value();
  CHECK(flat.array().abs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(layer_norm(leaf<double>({1, 2}, {1, 3}), one, zero, 0.0), ConfigError);

  std::mt19937_64 rng(6);
  Tensor<double> x = uniform_tensor<double>({1, 2, 3, 2, 2}, -1, 1, rng);
  for (Index i = 12; i < 24; ++i) x[i] = 100 * x[i] + 7;  // channel 1 on a different scale
  const Tensor<double> y = instance_norm(constant(x), one, zero).value();
  for (Index c = 0; c < 2; ++c) {
    const auto seg = y.array().segment(c * 12, 12);
    CHECK(std::abs(seg.mean()) < 1e-12);
    CHECK((seg - seg.mean()).square().mean() == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("activations") {
  const auto z = leaf<double>({1}, {0});
  CHECK(gelu(z).value()[0] == 0);
  CHECK(silu(z).value()[0] == 0);
  CHECK(sigmoid(z).value()[0] == 0.5);
  CHECK(gelu(leaf<double>({1}, {1})).value()[0] == doctest::Approx(0.8412).epsilon(1e-3));
  check_close(softmax(leaf<double>({2}, {0, 0}), -1).value(), {0.5, 0.5}, 0);
  const Tensor<double> sm = softmax(leaf<double>({2, 3}, {1, 2, 3, -1, 0, 4}), 1).value();
  CHECK(sm.array().segment(0, 3).sum() == doctest::Approx(1.0));
  CHECK(softplus(leaf<double>({1}, {50})).value()[0] == doctest::Approx(50));
}

TEST_CASE("reshape and permute") {
  std::mt19937_64 rng(7);
  const auto x = rand_var({2, 3}, rng);
  CHECK(bit_equal(permute(permute(x, {1, 0}), {1, 0}).value(), x.value()));
  CHECK(bit_equal(reshape(reshape(x, {3, 2}), {2, 3}).value(), x.value()));
  CHECK_THROWS_AS(reshape(x, {4, 2}), DimensionError);

  Tensor<double> ar({2, 3, 4});
  for (Index i = 0; i < 24; ++i) ar[i] = static_cast<double>(i);
  const Tensor<double> p = permute_tensor(ar, {2, 0, 1});
  REQUIRE(p.shape() == Shape{4, 2, 3});
  // out[k, i, j] = in[i, j, k] = 12 i + 4 j + k
  for (Index k = 0; k < 4; ++k) {
    for (Index i = 0; i < 2; ++i) {
      for (Index j = 0; j < 3; ++j) CHECK(p[(k * 2 + i) * 3 + j] == static_cast<double>(12 * i + 4 * j + k));
    }
  }
}

TEST_CASE("upsample_hw") {
  const Tensor<double> c = upsample_hw(Var<double>(Tensor<double>({1, 2, 3, 2, 2}, 5.0)), 2).value();
  CHECK(c.shape() == Shape{1, 2, 3, 4, 4});
  CHECK((c.array() == 5.0).all());
  // Half-pixel centres with edge clamping: source coords -0.25 (clamped), 0.25, 0.75, 1.25 (clamped to 1).
  check_close(upsample_hw(leaf<double>({1, 1, 1, 2, 1}, {0, 2}), 2).value(), {0, 0, 0.5, 0.5, 1.5, 1.5, 2, 2}, 1e-15);
  CHECK(upsample_hw(Var<double>(Tensor<double>({1, 3, 2, 6, 6})), 16).shape() == Shape{1, 3, 2, 96, 96});
  CHECK_THROWS_AS(upsample_hw(Var<double>(Tensor<double>({1, 1, 1, 2, 2})), 0), ConfigError);
}

TEST_CASE("recording does not change forward values") {
  std::mt19937_64 rng(8);
  Parameter<float> w("w", uniform_tensor<float>({4, 3, 3, 1, 1}, -1, 1, rng), true);
  const Var<float> x(uniform_tensor<float>({1, 3, 5, 2, 2}, -1, 1, rng));
  const auto f = [&] { return gelu(conv3d(x, w.var, Var<float>{}, Conv3dOptions::same({3, 1, 1}, {2, 1, 1}))); };
  Tensor<float> plain = f().value(), again = f().value();
  Tape<float> tape;
  Tensor<float> recorded;
  {
    TapeScope<float> scope(tape);
    recorded = f().value();
  }
  CHECK(tape.size() > 0);
  CHECK(bit_equal(plain, recorded));
  CHECK(bit_equal(plain, again));
}

TEST_CASE("frozen parameters never receive a gradient") {
  std::mt19937_64 rng(9);
  Parameter<double> a("a", uniform_tensor<double>({3, 4}, -1, 1, rng), false);
  Parameter<double> b("b", uniform_tensor<double>({4, 2}, -1, 1, rng), true);
  Tape<double> tape;
  Var<double> loss;
  {
    TapeScope<double> scope(tape);
    loss = sum(matmul(a.var, b.var));
  }
  tape.backward(loss);
  CHECK_FALSE(a.var.has_grad());
  CHECK(b.var.has_grad());
  const auto res = grad_check([&] { return sum(matmul(a.var, b.var)); }, {&a, &b});
  CHECK(res.parameters_checked == 1);
}

TEST_CASE("grad_check reports non-finite values by parameter") {
  // exp overflows only once the central-difference step is added.
  Parameter<double> a("weights.bad", Tensor<double>({1}, 709.78271), true);
  CHECK_THROWS_WITH_AS(grad_check([&] { return sum(exp(a.var)); }, {&a}), doctest::Contains("weights.bad"), NumericError);
}
