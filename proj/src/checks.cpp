#include "tpmamba/checks.hpp"

#include "tpmamba/checkpoint.hpp"
#include "tpmamba/init.hpp"
#include "tpmamba/seg_head.hpp"
#include "tpmamba/volume_io.hpp"

#include <chrono>
#include <deque>
#include <filesystem>
#include <iomanip>
#include <ostream>

namespace tpmamba {

bool SuiteReport::pass() const {
  return std::all_of(lines.begin(), lines.end(), [](const CheckLine& l) { return l.pass; });
}

void SuiteReport::add(std::string line_name, double value, double tolerance) {
  lines.push_back({std::move(line_name), value, tolerance, std::isfinite(value) && value < tolerance});
}

void SuiteReport::add_exact(std::string line_name, bool ok) {
  lines.push_back({std::move(line_name), ok ? 0.0 : 1.0, 0.0, ok});
}

void print_report(std::ostream& os, const SuiteReport& r) {
  for (const CheckLine& l : r.lines) {
    os << (l.pass ? "PASS " : "FAIL ") << r.name << ": " << l.name;
    if (l.tolerance > 0) os << "  err=" << std::setprecision(3) << std::scientific << l.value << " tol=" << l.tolerance;
    os << std::defaultfloat << '\n';
  }
  os << (r.pass() ? "PASS " : "FAIL ") << r.name << " (" << r.lines.size() << " checks, " << std::fixed
     << std::setprecision(1) << r.seconds << " s)" << std::defaultfloat << '\n';
}

template <typename S>
void randomize_trainables(const ParameterList<S>& params, std::mt19937_64& rng, double scale) {
  for (Parameter<S>* p : params) {
    if (p->trainable) p->value() = uniform_tensor<S>(p->value().shape(), -scale, scale, rng);
  }
}

template <typename S>
double max_rel_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  if (a.size() == 0) return 0.0;
  const double num = (a.array() - b.array()).abs().maxCoeff();
  const double den = b.array().abs().maxCoeff();
  if (num == 0) return 0.0;
  return den == 0 ? std::numeric_limits<double>::infinity() : num / den;
}

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

using P = Parameter<double>;

P param(const std::string& name, const Shape& shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  return P(name, uniform_tensor<double>(shape, lo, hi, rng), true);
}

/// Checks d(sum(w * fn()))/d(params) for a fixed random weighting w.
template <typename F>
void check_grad(SuiteReport& rep, const std::string& name, const ParameterList<double>& params, F&& fn,
                std::mt19937_64& rng) {
  Tensor<double> out;
  {
    NoGradScope<double> off;
    out = fn().value();
  }
  const Tensor<double> w = uniform_tensor<double>(out.shape(), -1, 1, rng);
  try {
    const GradCheckResult res = grad_check([&] { return weighted_sum(fn(), w); }, params);
    rep.add(name + " [" + std::to_string(res.coordinates_checked) + " coords]", res.max_rel_error, 1e-3);
  } catch (const std::exception& e) {
    rep.add(name + " (" + e.what() + ")", std::numeric_limits<double>::infinity(), 1e-3);
  }
}

struct ScanInputs {
  Tensor<double> u, delta, a, b, c, d;
};

ScanInputs random_scan(Index bs, Index l, Index e, Index n, std::mt19937_64& rng) {
  ScanInputs s;
  s.u = uniform_tensor<double>({bs, l, e}, -1, 1, rng);
  s.delta = uniform_tensor<double>({bs, l, e}, 1e-3, 1.0, rng);
  s.a = uniform_tensor<double>({e, n}, -1, 2, rng);
  s.a.array() = -s.a.array().exp();
  s.b = uniform_tensor<double>({bs, l, n}, -1, 1, rng);
  s.c = uniform_tensor<double>({bs, l, n}, -1, 1, rng);
  s.d = uniform_tensor<double>({e}, -1, 1, rng);
  return s;
}

template <typename S>
std::array<Var<S>, 6> scan_vars(const ScanInputs& s, bool grad) {
  return {Var<S>(s.u.cast<S>(), grad), Var<S>(s.delta.cast<S>(), grad), Var<S>(s.a.cast<S>(), grad),
          Var<S>(s.b.cast<S>(), grad), Var<S>(s.c.cast<S>(), grad), Var<S>(s.d.cast<S>(), grad)};
}

template <typename S>
double scan_forward_error(const ScanInputs& s) {
  auto v = scan_vars<S>(s, false);
  const Tensor<S> fast = selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]).value();
  const Tensor<S> ref = selective_scan_sequential(v[0], v[1], v[2], v[3], v[4], v[5]).value();
  return max_rel_diff(fast, ref);
}

/// Largest relative gap between the input gradients of the two scan routes.
double scan_backward_error(const ScanInputs& s, std::mt19937_64& rng) {
  std::array<std::array<Tensor<double>, 6>, 2> grads;
  Tensor<double> seed;
  for (int route = 0; route < 2; ++route) {
    auto v = scan_vars<double>(s, true);
    Tape<double> tape;
    Var<double> y;
    {
      TapeScope<double> scope(tape);
      y = route == 0 ? selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])
                     : selective_scan_sequential(v[0], v[1], v[2], v[3], v[4], v[5]);
    }
    if (route == 0) seed = uniform_tensor<double>(y.shape(), -1, 1, rng);
    tape.backward(y, seed);
    for (int i = 0; i < 6; ++i) grads[route][i] = v[i].has_grad() ? v[i].grad() : Tensor<double>(v[i].shape());
  }
  double worst = 0;
  for (int i = 0; i < 6; ++i) worst = std::max(worst, max_rel_diff(grads[0][i], grads[1][i]));
  return worst;
}

}  // namespace

SuiteReport scan_suite(std::uint64_t seed, Index configs, Index inner, Index state) {
  const auto t0 = Clock::now();
  SuiteReport rep;
  rep.name = "scan";
  std::mt19937_64 rng(seed);
  const Index lengths[] = {1, 2, 7, 64, 513};
  double f32 = 0, f64 = 0, back = 0;
  for (Index i = 0; i < configs; ++i) {
    const Index l = lengths[i % 5];
    const Index bs = std::uniform_int_distribution<Index>(1, 3)(rng);
    const Index e = inner > 0 ? inner : std::uniform_int_distribution<Index>(1, 16)(rng);
    const Index n = state > 0 ? state : std::uniform_int_distribution<Index>(1, 16)(rng);
    const ScanInputs s = random_scan(bs, l, e, n, rng);
    f32 = std::max(f32, scan_forward_error<float>(s));
    f64 = std::max(f64, scan_forward_error<double>(s));
    if (i % 10 == 0) back = std::max(back, scan_backward_error(s, rng));
  }
  const std::string tag = inner > 0 ? " E=" + std::to_string(inner) : "";
  rep.add("chunked scan vs recurrence, f32, " + std::to_string(configs) + " configs" + tag, f32, 1e-5);
  rep.add("chunked scan vs recurrence, f64, " + std::to_string(configs) + " configs" + tag, f64, 1e-10);
  rep.add("chunked scan vs recurrence, f64 input gradients" + tag, back, 1e-10);
  rep.seconds = since(t0);
  return rep;
}

SuiteReport grad_suite(std::uint64_t seed) {
  const auto t0 = Clock::now();
  SuiteReport rep;
  rep.name = "grad";
  std::mt19937_64 rng(seed);

  {  // contractions
    P a = param("a", {3, 4}, rng), b = param("b", {4, 2}, rng);
    check_grad(rep, "matmul 3x4 * 4x2", {&a, &b}, [&] { return matmul(a.var, b.var); }, rng);
    P a2 = param("a", {2, 3, 5}, rng), b2 = param("b", {2, 5, 4}, rng);
    check_grad(rep, "matmul batched 2x3x5 * 2x5x4", {&a2, &b2}, [&] { return matmul(a2.var, b2.var); }, rng);
    P x = param("x", {5, 4}, rng), w = param("w", {3, 4}, rng), bias = param("bias", {3}, rng);
    check_grad(rep, "linear 5x4 -> 3", {&x, &w, &bias}, [&] { return linear(x.var, w.var, bias.var); }, rng);
    P x2 = param("x", {2, 3, 6}, rng), w2 = param("w", {4, 6}, rng);
    check_grad(rep, "linear 2x3x6 -> 4, no bias", {&x2, &w2}, [&] { return linear(x2.var, w2.var); }, rng);
  }
  {  // convolutions
    P x = param("x", {1, 2, 5, 3, 3}, rng), w = param("w", {3, 2, 3, 3, 3}, rng), b = param("b", {3}, rng);
    const auto cube = Conv3dOptions::same({3, 3, 3}, {1, 1, 1});
    check_grad(rep, "conv3d 3x3x3 same", {&x, &w, &b}, [&] { return conv3d(x.var, w.var, b.var, cube); }, rng);
    P x2 = param("x", {2, 3, 7, 2, 2}, rng), w2 = param("w", {2, 3, 3, 1, 1}, rng);
    const auto dil = Conv3dOptions::same({3, 1, 1}, {2, 1, 1});
    check_grad(rep, "conv3d 3x1x1 dilation 2", {&x2, &w2}, [&] { return conv3d(x2.var, w2.var, Var<double>{}, dil); }, rng);
    P x3 = param("x", {2, 3, 6}, rng), w3 = param("w", {3, 1, 4}, rng), b3 = param("b", {3}, rng);
    check_grad(rep, "conv1d depthwise k=4", {&x3, &w3, &b3}, [&] { return conv1d_depthwise(x3.var, w3.var, b3.var); }, rng);
    P x4 = param("x", {1, 5, 9}, rng), w4 = param("w", {5, 1, 2}, rng);
    check_grad(rep, "conv1d depthwise k=2", {&x4, &w4}, [&] { return conv1d_depthwise(x4.var, w4.var); }, rng);
  }
  {  // normalisation
    P x = param("x", {3, 5}, rng), g = param("g", {5}, rng), b = param("b", {5}, rng);
    check_grad(rep, "layer_norm 3x5", {&x, &g, &b}, [&] { return layer_norm(x.var, g.var, b.var); }, rng);
    P x2 = param("x", {2, 3, 4}, rng), g2 = param("g", {4}, rng), b2 = param("b", {4}, rng);
    check_grad(rep, "layer_norm 2x3x4", {&x2, &g2, &b2}, [&] { return layer_norm(x2.var, g2.var, b2.var); }, rng);
    P x3 = param("x", {1, 2, 3, 2, 2}, rng), g3 = param("g", {2}, rng), b3 = param("b", {2}, rng);
    check_grad(rep, "instance_norm 1x2x3x2x2", {&x3, &g3, &b3}, [&] { return instance_norm(x3.var, g3.var, b3.var); }, rng);
    P x4 = param("x", {2, 3, 2, 3, 1}, rng), g4 = param("g", {3}, rng), b4 = param("b", {3}, rng);
    check_grad(rep, "instance_norm 2x3x2x3x1", {&x4, &g4, &b4}, [&] { return instance_norm(x4.var, g4.var, b4.var); }, rng);
  }
  {  // activations
    const std::pair<Activation, const char*> kinds[] = {{Activation::gelu, "gelu"},
                                                        {Activation::silu, "silu"},
                                                        {Activation::softplus, "softplus"},
                                                        {Activation::sigmoid, "sigmoid"},
                                                        {Activation::softmax, "softmax"}};
    for (const auto& [kind, label] : kinds) {
      P x = param("x", {4, 5}, rng, -3, 3), x2 = param("x", {2, 3, 4}, rng, -3, 3);
      check_grad(rep, std::string(label) + " 4x5", {&x}, [&] { return activation(x.var, kind, -1); }, rng);
      check_grad(rep, std::string(label) + " 2x3x4", {&x2}, [&] { return activation(x2.var, kind, 1); }, rng);
    }
  }
  {  // layout and element-wise
    P x = param("x", {1, 2, 2, 3, 2}, rng), x2 = param("x", {2, 1, 1, 2, 3}, rng);
    check_grad(rep, "upsample_hw x2", {&x}, [&] { return upsample_hw(x.var, 2); }, rng);
    check_grad(rep, "upsample_hw x3", {&x2}, [&] { return upsample_hw(x2.var, 3); }, rng);
    P a = param("a", {2, 3, 4}, rng), b = param("b", {2, 3, 4}, rng), c = param("c", {4}, rng);
    check_grad(rep, "add/sub/mul/exp/scale/neg", {&a, &b}, [&] {
      return add(mul(a.var, exp(b.var)), neg(scale(sub(a.var, b.var), 0.5)));
    }, rng);
    check_grad(rep, "add_broadcast", {&a, &c}, [&] { return add_broadcast(a.var, c.var); }, rng);
    check_grad(rep, "reshape/permute/concat/slice", {&a, &b}, [&] {
      const Var<double> p = permute(reshape(a.var, {4, 3, 2}), {2, 0, 1});
      return slice(concat(std::vector<Var<double>>{p, permute(reshape(b.var, {4, 3, 2}), {2, 0, 1})}, 1), 1, 1, 5);
    }, rng);
    P m = param("m", {3, 2, 2}, rng);
    check_grad(rep, "sum/mean", {&m}, [&] { return add(sum(m.var), scale(mean(mul(m.var, m.var)), 3.0)); }, rng);
  }
  {  // selective scan, both routes, inside one chunk and across chunk boundaries
    for (const auto& [bs, l, e, n] : {std::array<Index, 4>{2, 7, 3, 4}, std::array<Index, 4>{1, 70, 2, 2}}) {
      const ScanInputs s = random_scan(bs, l, e, n, rng);
      P u("u", s.u, true), dl("delta", s.delta, true), a("a", s.a, true), b("b", s.b, true), c("c", s.c, true),
          d("d", s.d, true);
      const std::string shape = " (" + std::to_string(bs) + "," + std::to_string(l) + "," + std::to_string(e) + "), N=" +
                                std::to_string(n);
      const ParameterList<double> ps{&u, &dl, &a, &b, &c, &d};
      check_grad(rep, "selective_scan" + shape, ps,
                 [&] { return selective_scan(u.var, dl.var, a.var, b.var, c.var, d.var); }, rng);
      check_grad(rep, "selective_scan_sequential" + shape, ps,
                 [&] { return selective_scan_sequential(u.var, dl.var, a.var, b.var, c.var, d.var); }, rng);
    }
  }
  {  // Mamba block
    for (const auto& [bs, l, r, n] : {std::array<Index, 4>{1, 8, 4, 2}, std::array<Index, 4>{2, 5, 8, 3}}) {
      MambaBlockConfig cfg;
      cfg.d_model = r;
      cfg.d_state = n;
      MambaBlock<double> block(cfg, rng, "phi");
      ParameterList<double> ps;
      block.collect(ps);
      randomize_trainables(ps, rng);
      P seq = param("seq", {bs, l, r}, rng);
      ps.push_back(&seq);
      check_grad(rep, "mamba block (" + std::to_string(bs) + "," + std::to_string(l) + "," + std::to_string(r) +
                          "), N=" + std::to_string(n),
                 ps, [&] { return block(seq.var); }, rng);
    }
  }
  {  // adapter stages and the full adapter in every mode
    TPMambaConfig cfg;
    cfg.channels = 8;
    cfg.rank = 4;
    cfg.d_state = 2;
    for (ScanMode mode : {ScanMode::tri_plane, ScanMode::hw_only, ScanMode::dw_only, ScanMode::dh_only,
                          ScanMode::volume_flatten}) {
      cfg.scan_mode = mode;
      const SuiteReport sub = adapter_grad_suite(cfg, rng());
      rep.lines.insert(rep.lines.end(), sub.lines.begin(), sub.lines.end());
    }
    cfg.scan_mode = ScanMode::tri_plane;
    cfg.conv_mode = ConvMode::single;
    cfg.depth_kernel = 5;
    const SuiteReport sub = adapter_grad_suite(cfg, rng());
    rep.lines.insert(rep.lines.end(), sub.lines.begin(), sub.lines.end());

    cfg = TPMambaConfig{};
    cfg.channels = 8;
    cfg.rank = 4;
    cfg.d_state = 2;
    TPMambaAdapter<double> adapter(cfg, rng, "tpmamba");
    ParameterList<double> ps;
    adapter.collect(ps);
    randomize_trainables(ps, rng);
    P f = param("F", {1, 8, 3, 2, 2}, rng);
    ParameterList<double> with_input = ps;
    with_input.push_back(&f);
    check_grad(rep, "reduce_dim (1,8,3,2,2)", with_input, [&] { return adapter.reduce_dim(f.var); }, rng);
    P g = param("G", {1, 4, 9, 2, 1}, rng);
    ps.push_back(&g);
    check_grad(rep, "multiscale_depth_conv (1,4,9,2,1)", ps, [&] { return adapter.multiscale_depth_conv(g.var); }, rng);
  }
  {  // one ViT block with LoRA and adapter; frozen weights must stay gradient-free
    ViTConfig vit;
    vit.channels = 16;
    vit.n_heads = 2;
    vit.lora_rank = 2;
    vit.adapter.rank = 8;
    vit.adapter.d_state = 2;
    vit.adapter.channels = 16;
    ViTBlock<double> block(vit, rng, "encoder.blocks.0");
    ParameterList<double> ps;
    block.collect(ps);
    randomize_trainables(ps, rng);
    P f("F", uniform_tensor<double>({3, 16, 2, 2}, -1, 1, rng), false);
    check_grad(rep, "ViT block trainables (BD=3, C=16, 2x2)", ps, [&] { return block(f.var, 1, 3, EncoderPaths{}); }, rng);
    P f2 = param("F", {4, 16, 1, 3}, rng);
    ps.push_back(&f2);
    check_grad(rep, "ViT block with input (BD=4, C=16, 1x3)", ps, [&] { return block(f2.var, 2, 2, EncoderPaths{}); }, rng);
  }
  {  // decoder
    DecoderConfig dc;
    dc.channels = 8;
    dc.classes = 3;
    dc.stages = 2;
    Decoder<double> dec(dc, rng, "decoder");
    ParameterList<double> ps;
    dec.collect(ps);
    randomize_trainables(ps, rng, 0.5);
    std::deque<P> taps;
    for (int i = 0; i < 4; ++i) taps.push_back(param("tap" + std::to_string(i), {4, 8, 2, 2}, rng));
    for (P& t : taps) ps.push_back(&t);
    check_grad(rep, "decoder taps (4,8,2,2) B=1 D=4", ps, [&] {
      std::vector<Var<double>> tv;
      for (P& t : taps) tv.push_back(t.var);
      return dec(tv, 1, 4);
    }, rng);
  }
  {  // loss
    for (const auto& [b, k, d] : {std::array<Index, 3>{1, 2, 4}, std::array<Index, 3>{2, 3, 3}}) {
      P logits = param("logits", {b, k, d, d, d}, rng, -2, 2);
      LabelMap y(Shape{b, d, d, d});
      for (Index i = 0; i < y.size(); ++i) y[i] = static_cast<std::uint8_t>(std::uniform_int_distribution<Index>(0, k - 1)(rng));
      try {
        const GradCheckResult res = grad_check([&] { return dice_ce_loss(logits.var, y).total; }, {&logits});
        rep.add("dice_ce_loss B=" + std::to_string(b) + " K=" + std::to_string(k) + " " + std::to_string(d) + "^3",
                res.max_rel_error, 1e-3);
      } catch (const std::exception& e) {
        rep.add(std::string("dice_ce_loss (") + e.what() + ")", std::numeric_limits<double>::infinity(), 1e-3);
      }
    }
  }
  rep.seconds = since(t0);
  return rep;
}

SuiteReport adapter_grad_suite(const TPMambaConfig& cfg, std::uint64_t seed) {
  const auto t0 = Clock::now();
  SuiteReport rep;
  rep.name = "adapter-grad";
  std::mt19937_64 rng(seed);
  TPMambaAdapter<double> adapter(cfg, rng, "encoder.blocks.0.tpmamba");
  ParameterList<double> ps;
  adapter.collect(ps);
  randomize_trainables(ps, rng);
  P f = param("F", {3, cfg.channels, 2, 2}, rng);
  ps.push_back(&f);
  check_grad(rep,
             "TP-Mamba adapter " + std::string(to_string(cfg.scan_mode)) + "/" + std::string(to_string(cfg.conv_mode)) +
                 " C=" + std::to_string(cfg.channels) + " r=" + std::to_string(cfg.rank) + " k=" +
                 std::to_string(cfg.depth_kernel),
             ps, [&] { return adapter(f.var, 1, 3); }, rng);
  rep.seconds = since(t0);
  return rep;
}

SuiteReport triplane_suite(const TPMambaConfig& cfg, std::uint64_t seed, Index shapes) {
  const auto t0 = Clock::now();
  SuiteReport rep;
  rep.name = "triplane";
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> ext(1, 5);
  bool bijective = true;
  for (Index i = 0; i < shapes; ++i) {
    const Shape dims{ext(rng) % 2 + 1, cfg.rank, ext(rng), ext(rng), ext(rng)};
    const Var<double> g(uniform_tensor<double>(dims, -1, 1, rng));
    for (Plane p : {Plane::hw, Plane::dh, Plane::dw, Plane::volume}) {
      const Var<double> back = plane_unflatten(plane_flatten(g, p), p, dims);
      bijective = bijective && bit_equal(back.value(), g.value());
    }
  }
  rep.add_exact("flatten/unflatten bit-exact, 4 planes x " + std::to_string(shapes) + " shapes, r=" +
                    std::to_string(cfg.rank),
                bijective);

  TPMambaConfig tri = cfg;
  tri.scan_mode = ScanMode::tri_plane;
  TPMambaAdapter<double> adapter(tri, rng, "tpmamba");
  ParameterList<double> ps;
  adapter.collect(ps);
  randomize_trainables(ps, rng, 0.2);
  const Index batch = 2, depth = 3, h = 2, w = 3;
  const Var<double> f(uniform_tensor<double>({batch * depth, cfg.channels, h, w}, -1, 1, rng));
  const Tensor<double> full = adapter(f, batch, depth).value();
  // Each plane's contribution computed on its own, summed in reverse order.
  const Var<double> vol = permute(reshape(f, {batch, depth, cfg.channels, h, w}), {0, 2, 1, 3, 4});
  const Var<double> g = adapter.multiscale_depth_conv(adapter.reduce_dim(vol));
  const Var<double> parts =
      add(adapter.scan_plane(g, Plane::dh), add(adapter.scan_plane(g, Plane::dw), adapter.scan_plane(g, Plane::hw)));
  const Var<double> manual =
      add(f, reshape(permute(adapter.raise_dim(parts), {0, 2, 1, 3, 4}), f.shape()));
  rep.add("tri-plane output == F + raise(sum of plane scans), r=" + std::to_string(cfg.rank),
          max_rel_diff(full, manual.value()), 1e-6);
  rep.seconds = since(t0);
  return rep;
}

SuiteReport init_transparency_suite(const ViTConfig& cfg, std::uint64_t seed, Index inputs) {
  const auto t0 = Clock::now();
  SuiteReport rep;
  rep.name = "init-transparency";
  std::mt19937_64 rng_a(seed), rng_b(seed + 1), rng(seed + 2);
  ViTConfig with = cfg, without = cfg;
  with.use_adapters = true;
  without.use_adapters = false;
  Encoder<float> adapted(with, rng_a), plain(without, rng_b);
  ParameterList<float> pa, pb;
  adapted.collect(pa);
  plain.collect(pb);
  for (Parameter<float>* b : pb) {
    for (Parameter<float>* a : pa) {
      if (a->name == b->name) b->value() = a->value();
    }
  }
  bool same = true;
  for (Index i = 0; i < inputs; ++i) {
    const Index depth = 2 + i % 3;
    const Var<float> x(uniform_tensor<float>({1, 1, depth, cfg.img_size, cfg.img_size}, 0, 1, rng));
    const auto ta = adapted(x, EncoderPaths{true, true});
    const auto tb = plain(x, EncoderPaths{false, false});
    for (std::size_t t = 0; t < ta.size(); ++t) same = same && bit_equal(ta[t].value(), tb[t].value());
  }
  rep.add_exact("encoder with LoRA + adapters at init == frozen encoder, " + std::to_string(inputs) +
                    " inputs, r=" + std::to_string(cfg.adapter.rank),
                same);
  rep.seconds = since(t0);
  return rep;
}

SuiteReport roundtrip_suite(std::uint64_t seed) {
  const auto t0 = Clock::now();
  SuiteReport rep;
  rep.name = "roundtrip";
  std::mt19937_64 rng(seed);
  {
    bool ok = true;
    for (int i = 0; i < 5; ++i) {
      const Shape s{2 + i % 2, 3, 1 + i, 4};
      const Tensor<float> x = uniform_tensor<float>(s, -1, 1, rng);
      std::vector<int> axes{0, 1, 2, 3};
      std::shuffle(axes.begin(), axes.end(), rng);
      std::vector<int> inv(4);
      for (int k = 0; k < 4; ++k) inv[axes[k]] = k;
      ok = ok && bit_equal(permute_tensor(permute_tensor(x, axes), inv), x);
      const Var<float> v(x);
      ok = ok && bit_equal(reshape(reshape(v, {numel(s)}), s).value(), x);
    }
    rep.add_exact("permute/reshape inverse round trips", ok);
  }
  {
    TPMambaConfig tp;
    tp.channels = 8;
    tp.rank = 4;
    tp.d_state = 2;
    TPMambaAdapter<float> adapter(tp, rng, "decoder.probe");
    ParameterList<float> ps;
    adapter.collect(ps);
    randomize_trainables(ps, rng);
    const std::string bytes = encode_checkpoint(snapshot(ps, "adapter.rank=4\n", 9));
    const Checkpoint back = decode_checkpoint(bytes);
    rep.add_exact("checkpoint encode -> decode -> encode byte-identical", encode_checkpoint(back) == bytes);
    std::string corrupt = bytes;
    corrupt.back() = static_cast<char>(corrupt.back() ^ 0x1);
    bool rejected = false;
    try {
      decode_checkpoint(corrupt);
    } catch (const InputError&) {
      rejected = true;
    }
    rep.add_exact("checkpoint with one flipped payload bit rejected", rejected);
  }
  {
    const auto path = std::filesystem::temp_directory_path() / ("tpmamba_roundtrip_" + std::to_string(seed) + ".rvol");
    const Tensor<float> v = uniform_tensor<float>({3, 4, 5}, -200, 300, rng);
    write_rvol(path, v, {2.0, 1.0, 0.5});
    const RvolVolume r = read_rvol(path);
    std::filesystem::remove(path);
    rep.add_exact("RVOL f32 write -> read bit-exact", bit_equal(r.data, v) && r.spacing[0] == 2.0 && r.spacing[2] == 0.5);
  }
  rep.seconds = since(t0);
  return rep;
}

bool run_check_suite(std::string_view suite, std::ostream& os, std::uint64_t seed) {
  std::vector<SuiteReport> reports;
  const bool all = suite == "all";
  if (!all && suite != "grad" && suite != "scan" && suite != "roundtrip") {
    throw ConfigError("unknown check suite '" + std::string(suite) + "' (grad|scan|roundtrip|all)");
  }
  if (all || suite == "scan") reports.push_back(scan_suite(seed));
  if (all || suite == "grad") reports.push_back(grad_suite(seed));
  if (all || suite == "roundtrip") {
    reports.push_back(roundtrip_suite(seed));
    reports.push_back(triplane_suite(TPMambaConfig{}, seed));
  }
  bool ok = true;
  for (const SuiteReport& r : reports) {
    print_report(os, r);
    ok = ok && r.pass();
  }
  return ok;
}

template void randomize_trainables(const ParameterList<float>&, std::mt19937_64&, double);
template void randomize_trainables(const ParameterList<double>&, std::mt19937_64&, double);
template double max_rel_diff(const Tensor<float>&, const Tensor<float>&);
template double max_rel_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace tpmamba
