#include "tpmamba/ssm.hpp"

#include "tpmamba/init.hpp"

#include <cmath>

namespace tpmamba {

void MambaBlockConfig::validate() const {
  if (d_model <= 0 || d_state <= 0 || expand <= 0 || d_conv <= 0 || dt_rank < 0) {
    throw ConfigError("MambaBlockConfig: all extents must be positive (d_model=" + std::to_string(d_model) +
                      ", d_state=" + std::to_string(d_state) + ", expand=" + std::to_string(expand) +
                      ", d_conv=" + std::to_string(d_conv) + ")");
  }
}

template <typename S>
SSMParams<S> SSMParams<S>::init(const MambaBlockConfig& cfg, std::mt19937_64& rng, const std::string& prefix) {
  cfg.validate();
  const Index r = cfg.d_model, e = cfg.inner(), n = cfg.d_state, k = cfg.d_conv, dtr = cfg.resolved_dt_rank();
  SSMParams p;
  p.in_proj = {prefix + ".in_proj.weight", fan_in_uniform<S>({2 * e, r}, r, rng), true};
  p.conv_weight = {prefix + ".conv.weight", fan_in_uniform<S>({e, 1, k}, k, rng), true};
  p.conv_bias = {prefix + ".conv.bias", fan_in_uniform<S>({e}, k, rng), true};
  p.x_proj = {prefix + ".x_proj.weight", fan_in_uniform<S>({dtr + 2 * n, e}, e, rng), true};
  p.dt_proj_weight = {prefix + ".dt_proj.weight", fan_in_uniform<S>({e, dtr}, dtr, rng), true};

  // softplus(bias) ~ U[1e-3, 0.1]; bias = softplus^{-1}(dt) = dt + log(-expm1(-dt)).
  Tensor<S> dt_bias({e});
  std::uniform_real_distribution<double> dt_dist(1e-3, 0.1);
  for (Index i = 0; i < e; ++i) {
    const double dt = dt_dist(rng);
    dt_bias[i] = static_cast<S>(dt + std::log(-std::expm1(-dt)));
  }
  p.dt_proj_bias = {prefix + ".dt_proj.bias", std::move(dt_bias), true};

  Tensor<S> a_log({e, n});
  for (Index i = 0; i < e; ++i) {
    for (Index j = 0; j < n; ++j) a_log.at({i, j}) = static_cast<S>(std::log(static_cast<double>(j + 1)));
  }
  p.a_log = {prefix + ".A_log", std::move(a_log), true};
  p.d_skip = {prefix + ".D", Tensor<S>({e}, S(1)), true};
  p.out_proj = {prefix + ".out_proj.weight", Tensor<S>({r, e}), true};
  return p;
}

template <typename S>
void SSMParams<S>::collect(ParameterList<S>& out) {
  for (Parameter<S>* p : {&in_proj, &conv_weight, &conv_bias, &x_proj, &dt_proj_weight, &dt_proj_bias, &a_log,
                          &d_skip, &out_proj}) {
    out.push_back(p);
  }
}

template <typename S>
Index SSMParams<S>::count(const MambaBlockConfig& cfg) {
  const Index r = cfg.d_model, e = cfg.inner(), n = cfg.d_state, k = cfg.d_conv, dtr = cfg.resolved_dt_rank();
  return 2 * e * r + e * k + e + (dtr + 2 * n) * e + e * dtr + e + e * n + e + r * e;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> discretize(const Tensor<S>& a, const Tensor<S>& b_t, const Tensor<S>& delta_t) {
  if (a.rank() != 2 || b_t.shape() != Shape{a.dim(1)} || delta_t.shape() != Shape{a.dim(0)}) {
    throw DimensionError("discretize: A " + shape_str(a.shape()) + ", B " + shape_str(b_t.shape()) + ", delta " +
                         shape_str(delta_t.shape()));
  }
  const Index e = a.dim(0), n = a.dim(1);
  Tensor<S> a_bar({e, n}), b_bar({e, n});
  for (Index i = 0; i < e; ++i) {
    const S dt = delta_t[i];
    if (!std::isfinite(dt)) throw NumericError("discretize: non-finite step size at channel " + std::to_string(i));
    for (Index j = 0; j < n; ++j) {
      a_bar[i * n + j] = std::exp(dt * a[i * n + j]);
      b_bar[i * n + j] = dt * b_t[j];
    }
  }
  return {std::move(a_bar), std::move(b_bar)};
}

namespace {

struct ScanDims {
  Index batch, len, e, n;
};

template <typename S>
ScanDims scan_dims(const Var<S>& u, const Var<S>& delta, const Var<S>& a, const Var<S>& b, const Var<S>& c,
                   const Var<S>& d) {
  const Shape& us = u.shape();
  const bool ok = us.size() == 3 && delta.shape() == us && a.shape().size() == 2 && a.dim(0) == us[2] &&
                  b.shape() == Shape{us[0], us[1], a.dim(1)} && c.shape() == b.shape() && d.shape() == Shape{us[2]};
  if (!ok) {
    throw DimensionError("selective_scan: u " + shape_str(us) + ", delta " + shape_str(delta.shape()) + ", A " +
                         shape_str(a.shape()) + ", B " + shape_str(b.shape()) + ", C " + shape_str(c.shape()) +
                         ", D " + shape_str(d.shape()));
  }
  return {us[0], us[1], us[2], a.dim(1)};
}

template <typename S>
void check_finite_steps(const Tensor<S>& delta) {
  for (Index i = 0; i < delta.size(); ++i) {
    if (!std::isfinite(delta[i])) throw NumericError("selective_scan: non-finite step size");
  }
}

template <typename S>
using NodePtr = std::shared_ptr<Node<S>>;

template <typename S>
bool wants(const NodePtr<S>& p) {
  return p && p->requires_grad;
}

/// Gradient buffers for the six scan inputs (null when not required).
template <typename S>
struct ScanGrads {
  S *du, *ddelta, *da, *db, *dc, *dd;
};

template <typename S>
ScanGrads<S> scan_grads(const NodePtr<S>& u, const NodePtr<S>& delta, const NodePtr<S>& a, const NodePtr<S>& b,
                        const NodePtr<S>& c, const NodePtr<S>& d) {
  auto buf = [](const NodePtr<S>& p) -> S* { return wants(p) ? p->grad_buffer().data() : nullptr; };
  return {buf(u), buf(delta), buf(a), buf(b), buf(c), buf(d)};
}

/// Reverse sweep over time steps [t0, t1) of sequence `bs`. `states` holds
/// h_{t0-1} .. h_{t1-1} as rows 0 .. (t1-t0); `gh` is the carried state gradient.
template <typename S>
void scan_backward_range(const ScanDims& dim, Index bs, Index t0, Index t1, const S* states, const S* u,
                         const S* delta, const S* a, const S* b, const S* c, const S* d, const S* gy, S* gh,
                         const ScanGrads<S>& g) {
  const Index e_n = dim.e * dim.n;
  for (Index t = t1 - 1; t >= t0; --t) {
    const Index row = (bs * dim.len + t);
    const S* h = states + (t - t0 + 1) * e_n;
    const S* hprev = states + (t - t0) * e_n;
    const S* bt = b + row * dim.n;
    const S* ct = c + row * dim.n;
    for (Index e = 0; e < dim.e; ++e) {
      const S gye = gy[row * dim.e + e];
      const S ue = u[row * dim.e + e];
      const S de = delta[row * dim.e + e];
      if (g.dd) g.dd[e] += gye * ue;
      S du = gye * d[e];
      S ddelta = 0;
      for (Index n = 0; n < dim.n; ++n) {
        const Index k = e * dim.n + n;
        if (g.dc) g.dc[row * dim.n + n] += gye * h[k];
        const S ghk = gh[k] + gye * ct[n];
        const S abar = std::exp(de * a[k]);
        const S gabar = ghk * hprev[k];
        if (g.da) g.da[k] += gabar * abar * de;
        ddelta += gabar * abar * a[k] + ghk * bt[n] * ue;
        if (g.db) g.db[row * dim.n + n] += ghk * de * ue;
        du += ghk * de * bt[n];
        gh[k] = ghk * abar;
      }
      if (g.du) g.du[row * dim.e + e] += du;
      if (g.ddelta) g.ddelta[row * dim.e + e] += ddelta;
    }
  }
}

}  // namespace

template <typename S>
Var<S> selective_scan_sequential(const Var<S>& u, const Var<S>& delta, const Var<S>& a, const Var<S>& b,
                                 const Var<S>& c, const Var<S>& d) {
  const ScanDims dim = scan_dims(u, delta, a, b, c, d);
  const Index e_n = dim.e * dim.n;
  Tensor<S> y({dim.batch, dim.len, dim.e});
  // states[bs][t] = h_t for t = 0..L (h_0 = 0).
  auto states = std::make_shared<Tensor<S>>(Shape{dim.batch, dim.len + 1, dim.e, dim.n});
  for (Index bs = 0; bs < dim.batch; ++bs) {
    for (Index t = 0; t < dim.len; ++t) {
      const Index row = bs * dim.len + t;
      Tensor<S> b_t({dim.n}), delta_t({dim.e});
      std::copy_n(b.value().data() + row * dim.n, dim.n, b_t.data());
      std::copy_n(delta.value().data() + row * dim.e, dim.e, delta_t.data());
      const auto [a_bar, b_bar] = discretize(a.value(), b_t, delta_t);
      const S* hprev = states->data() + (bs * (dim.len + 1) + t) * e_n;
      S* h = states->data() + (bs * (dim.len + 1) + t + 1) * e_n;
      for (Index e = 0; e < dim.e; ++e) {
        const S ue = u.value()[row * dim.e + e];
        S acc = 0;
        for (Index n = 0; n < dim.n; ++n) {
          const Index k = e * dim.n + n;
          h[k] = a_bar[k] * hprev[k] + b_bar[k] * ue;
          acc += c.value()[row * dim.n + n] * h[k];
        }
        y[row * dim.e + e] = acc + d.value()[e] * ue;
      }
    }
  }
  Var<S> out(std::move(y));
  if (auto* tape = recording<S>({&u, &delta, &a, &b, &c, &d})) {
    out.set_requires_grad(true);
    tape->record([un = u.node(), tn = delta.node(), an = a.node(), bn = b.node(), cn = c.node(), dn = d.node(),
                  on = out.node(), states, dim] {
      if (!on->has_grad()) return;
      const ScanGrads<S> g = scan_grads(un, tn, an, bn, cn, dn);
      std::vector<S> gh(dim.e * dim.n);
      for (Index bs = 0; bs < dim.batch; ++bs) {
        std::fill(gh.begin(), gh.end(), S(0));
        const S* st = states->data() + bs * (dim.len + 1) * dim.e * dim.n;
        scan_backward_range(dim, bs, 0, dim.len, st, un->value.data(), tn->value.data(), an->value.data(),
                            bn->value.data(), cn->value.data(), dn->value.data(), on->grad.data(), gh.data(), g);
      }
    });
  }
  return out;
}

namespace {

/// Forward sweep over [t0, t1) from state `h` (updated in place). When
/// `trace` is given, h_t is written to trace row t - t0 + 1.
template <typename S>
void scan_forward_range(const ScanDims& dim, Index bs, Index t0, Index t1, const S* u, const S* delta, const S* a,
                        const S* b, const S* c, const S* d, S* h, S* y, S* trace, std::vector<S>& a_bar,
                        std::vector<S>& bu) {
  const Index e_n = dim.e * dim.n;
  const Index steps = t1 - t0;
  a_bar.resize(steps * e_n);
  bu.resize(steps * e_n);
  for (Index s = 0; s < steps; ++s) {
    const Index row = bs * dim.len + t0 + s;
    const S* bt = b + row * dim.n;
    for (Index e = 0; e < dim.e; ++e) {
      const S de = delta[row * dim.e + e];
      const S ue = u[row * dim.e + e];
      S* ab = a_bar.data() + s * e_n + e * dim.n;
      S* bb = bu.data() + s * e_n + e * dim.n;
      for (Index n = 0; n < dim.n; ++n) {
        ab[n] = std::exp(de * a[e * dim.n + n]);
        bb[n] = de * bt[n] * ue;
      }
    }
  }
  for (Index s = 0; s < steps; ++s) {
    const Index row = bs * dim.len + t0 + s;
    const S* ct = c + row * dim.n;
    const S* ab = a_bar.data() + s * e_n;
    const S* bb = bu.data() + s * e_n;
    for (Index e = 0; e < dim.e; ++e) {
      S acc = 0;
      for (Index n = 0; n < dim.n; ++n) {
        const Index k = e * dim.n + n;
        h[k] = ab[k] * h[k] + bb[k];
        acc += ct[n] * h[k];
      }
      if (y) y[row * dim.e + e] = acc + d[e] * u[row * dim.e + e];
    }
    if (trace) std::copy_n(h, e_n, trace + (s + 1) * e_n);
  }
}

}  // namespace

template <typename S>
Var<S> selective_scan(const Var<S>& u, const Var<S>& delta, const Var<S>& a, const Var<S>& b, const Var<S>& c,
                      const Var<S>& d, Index chunk) {
  if (chunk <= 0) throw ConfigError("selective_scan: chunk size must be positive");
  const ScanDims dim = scan_dims(u, delta, a, b, c, d);
  check_finite_steps(delta.value());
  const Index e_n = dim.e * dim.n;
  const Index n_chunks = (dim.len + chunk - 1) / chunk;
  Tensor<S> y({dim.batch, dim.len, dim.e});
  // Boundary state entering each chunk.
  auto boundary = std::make_shared<Tensor<S>>(Shape{dim.batch, std::max<Index>(n_chunks, 1), dim.e, dim.n});
  std::vector<S> h(e_n), a_bar, bu;
  for (Index bs = 0; bs < dim.batch; ++bs) {
    std::fill(h.begin(), h.end(), S(0));
    for (Index ch = 0; ch < n_chunks; ++ch) {
      std::copy(h.begin(), h.end(), boundary->data() + (bs * n_chunks + ch) * e_n);
      const Index t0 = ch * chunk, t1 = std::min(dim.len, t0 + chunk);
      scan_forward_range(dim, bs, t0, t1, u.value().data(), delta.value().data(), a.value().data(),
                         b.value().data(), c.value().data(), d.value().data(), h.data(), y.data(),
                         static_cast<S*>(nullptr), a_bar, bu);
    }
  }
  Var<S> out(std::move(y));
  if (auto* tape = recording<S>({&u, &delta, &a, &b, &c, &d})) {
    out.set_requires_grad(true);
    tape->record([un = u.node(), tn = delta.node(), an = a.node(), bn = b.node(), cn = c.node(), dn = d.node(),
                  on = out.node(), boundary, dim, chunk, n_chunks] {
      if (!on->has_grad()) return;
      const ScanGrads<S> g = scan_grads(un, tn, an, bn, cn, dn);
      const Index e_n = dim.e * dim.n;
      std::vector<S> gh(e_n), trace((chunk + 1) * e_n), a_bar, bu;
      for (Index bs = 0; bs < dim.batch; ++bs) {
        std::fill(gh.begin(), gh.end(), S(0));
        for (Index ch = n_chunks - 1; ch >= 0; --ch) {
          const Index t0 = ch * chunk, t1 = std::min(dim.len, t0 + chunk);
          std::copy_n(boundary->data() + (bs * n_chunks + ch) * e_n, e_n, trace.data());
          std::vector<S> h(trace.begin(), trace.begin() + e_n);
          scan_forward_range(dim, bs, t0, t1, un->value.data(), tn->value.data(), an->value.data(),
                             bn->value.data(), cn->value.data(), dn->value.data(), h.data(), static_cast<S*>(nullptr),
                             trace.data(), a_bar, bu);
          scan_backward_range(dim, bs, t0, t1, trace.data(), un->value.data(), tn->value.data(), an->value.data(),
                              bn->value.data(), cn->value.data(), dn->value.data(), on->grad.data(), gh.data(), g);
        }
      }
    });
  }
  return out;
}

template <typename S>
Var<S> mamba_block_forward(const Var<S>& seq, const SSMParams<S>& p, const MambaBlockConfig& cfg) {
  const Shape& ss = seq.shape();
  if (ss.size() != 3 || ss[2] != cfg.d_model) {
    throw DimensionError("mamba block: expected [Bs, L, " + std::to_string(cfg.d_model) + "], got " + shape_str(ss));
  }
  const Index e = cfg.inner(), n = cfg.d_state, dtr = cfg.resolved_dt_rank();
  const Var<S> xz = linear(seq, p.in_proj.var);
  const Var<S> x = slice(xz, -1, 0, e);
  const Var<S> z = slice(xz, -1, e, e);

  Var<S> xc = permute(x, {0, 2, 1});
  xc = conv1d_depthwise(xc, p.conv_weight.var, p.conv_bias.var);
  xc = silu(permute(xc, {0, 2, 1}));

  const Var<S> dbc = linear(xc, p.x_proj.var);
  const Var<S> dt = slice(dbc, -1, 0, dtr);
  const Var<S> b = slice(dbc, -1, dtr, n);
  const Var<S> c = slice(dbc, -1, dtr + n, n);
  const Var<S> delta = softplus(linear(dt, p.dt_proj_weight.var, p.dt_proj_bias.var));
  const Var<S> a = neg(exp(p.a_log.var));

  Var<S> y = selective_scan(xc, delta, a, b, c, p.d_skip.var);
  y = mul(y, silu(z));
  return add(seq, linear(y, p.out_proj.var));
}

#define TPMAMBA_INSTANTIATE_SSM(S)                                                                              \
  template struct SSMParams<S>;                                                                                 \
  template std::pair<Tensor<S>, Tensor<S>> discretize(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);    \
  template Var<S> selective_scan_sequential(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&,         \
                                            const Var<S>&, const Var<S>&);                                      \
  template Var<S> selective_scan(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&,     \
                                 const Var<S>&, Index);                                                         \
  template Var<S> mamba_block_forward(const Var<S>&, const SSMParams<S>&, const MambaBlockConfig&);

TPMAMBA_INSTANTIATE_SSM(float)
TPMAMBA_INSTANTIATE_SSM(double)

#undef TPMAMBA_INSTANTIATE_SSM

}  // namespace tpmamba
