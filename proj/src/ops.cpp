#include "tpmamba/ops.hpp"

#include <cmath>
#include <numeric>

namespace tpmamba {

namespace {

template <typename S>
using NodePtr = std::shared_ptr<Node<S>>;

template <typename S>
bool wants(const NodePtr<S>& n) {
  return n && n->requires_grad;
}

template <typename S>
void require_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

/// Splits a shape around `axis` into (outer, extent, inner) block sizes.
struct AxisSplit {
  Index outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

int resolve_axis(const Shape& shape, int axis) {
  const int r = static_cast<int>(shape.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  return a;
}

constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

template <typename S>
S stable_sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
S stable_softplus(S x) {
  if (x > S(20)) return x;
  if (x < S(-20)) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace

// ---- element-wise ---------------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a, b, "add");
  Var<S> out(Tensor<S>(a.shape(), (a.value().array() + b.value().array()).eval()));
  if (auto* tape = recording<S>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), bn = b.node(), on = out.node()] {
      if (!on->has_grad()) return;
      if (wants(an)) an->grad_buffer().array() += on->grad.array();
      if (wants(bn)) bn->grad_buffer().array() += on->grad.array();
    });
  }
  return out;
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a, b, "sub");
  Var<S> out(Tensor<S>(a.shape(), (a.value().array() - b.value().array()).eval()));
  if (auto* tape = recording<S>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), bn = b.node(), on = out.node()] {
      if (!on->has_grad()) return;
      if (wants(an)) an->grad_buffer().array() += on->grad.array();
      if (wants(bn)) bn->grad_buffer().array() -= on->grad.array();
    });
  }
  return out;
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a, b, "mul");
  Var<S> out(Tensor<S>(a.shape(), (a.value().array() * b.value().array()).eval()));
  if (auto* tape = recording<S>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), bn = b.node(), on = out.node()] {
      if (!on->has_grad()) return;
      if (wants(an)) an->grad_buffer().array() += on->grad.array() * bn->value.array();
      if (wants(bn)) bn->grad_buffer().array() += on->grad.array() * an->value.array();
    });
  }
  return out;
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  Var<S> out(Tensor<S>(a.shape(), (a.value().array() * factor).eval()));
  if (auto* tape = recording<S>({&a})) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), on = out.node(), factor] {
      if (!on->has_grad()) return;
      an->grad_buffer().array() += on->grad.array() * factor;
    });
  }
  return out;
}

template <typename S>
Var<S> neg(const Var<S>& a) {
  return scale(a, S(-1));
}

template <typename S>
Var<S> exp(const Var<S>& a) {
  Var<S> out(Tensor<S>(a.shape(), a.value().array().exp().eval()));
  if (auto* tape = recording<S>({&a})) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), on = out.node()] {
      if (!on->has_grad()) return;
      an->grad_buffer().array() += on->grad.array() * on->value.array();
    });
  }
  return out;
}

template <typename S>
Var<S> add_broadcast(const Var<S>& x, const Var<S>& y) {
  const Shape& xs = x.shape();
  const Shape& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.rbegin(), ys.rend(), xs.rbegin())) {
    throw DimensionError("add_broadcast: " + shape_str(ys) + " is not a suffix of " + shape_str(xs));
  }
  const Index inner = y.value().size();
  const Index outer = inner == 0 ? 0 : x.value().size() / inner;
  Tensor<S> result = x.value();
  Eigen::Map<Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic>> r(result.data(), inner, outer);
  r.colwise() += y.value().array();
  Var<S> out(std::move(result));
  if (auto* tape = recording<S>({&x, &y})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), yn = y.node(), on = out.node(), inner, outer] {
      if (!on->has_grad()) return;
      if (wants(xn)) xn->grad_buffer().array() += on->grad.array();
      if (wants(yn)) {
        Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic>> g(on->grad.data(), inner, outer);
        yn->grad_buffer().array() += g.rowwise().sum();
      }
    });
  }
  return out;
}

// ---- activations ----------------------------------------------------------

template <typename S>
Var<S> activation(const Var<S>& x, Activation kind, int axis) {
  const Tensor<S>& in = x.value();
  Tensor<S> result(in.shape());
  const Index n = in.size();

  AxisSplit split;
  if (kind == Activation::softmax) {
    split = split_axis(in.shape(), resolve_axis(in.shape(), axis));
    for (Index o = 0; o < split.outer; ++o) {
      for (Index i = 0; i < split.inner; ++i) {
        const Index base = o * split.extent * split.inner + i;
        S mx = -std::numeric_limits<S>::infinity();
        for (Index k = 0; k < split.extent; ++k) mx = std::max(mx, in[base + k * split.inner]);
        S total = 0;
        for (Index k = 0; k < split.extent; ++k) {
          const S e = std::exp(in[base + k * split.inner] - mx);
          result[base + k * split.inner] = e;
          total += e;
        }
        for (Index k = 0; k < split.extent; ++k) result[base + k * split.inner] /= total;
      }
    }
  } else {
    for (Index i = 0; i < n; ++i) {
      const S v = in[i];
      switch (kind) {
        case Activation::gelu: {
          const S u = S(kGeluC0) * (v + S(kGeluC1) * v * v * v);
          result[i] = S(0.5) * v * (S(1) + std::tanh(u));
          break;
        }
        case Activation::silu:
          result[i] = v * stable_sigmoid(v);
          break;
        case Activation::softplus:
          result[i] = stable_softplus(v);
          break;
        case Activation::sigmoid:
          result[i] = stable_sigmoid(v);
          break;
        case Activation::softmax:
          break;
      }
    }
  }

  Var<S> out(std::move(result));
  if (auto* tape = recording<S>({&x})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node(), kind, split] {
      if (!on->has_grad()) return;
      const Tensor<S>& g = on->grad;
      const Tensor<S>& y = on->value;
      const Tensor<S>& v = xn->value;
      Tensor<S>& dx = xn->grad_buffer();
      if (kind == Activation::softmax) {
        for (Index o = 0; o < split.outer; ++o) {
          for (Index i = 0; i < split.inner; ++i) {
            const Index base = o * split.extent * split.inner + i;
            S dot = 0;
            for (Index k = 0; k < split.extent; ++k) {
              dot += g[base + k * split.inner] * y[base + k * split.inner];
            }
            for (Index k = 0; k < split.extent; ++k) {
              const Index j = base + k * split.inner;
              dx[j] += y[j] * (g[j] - dot);
            }
          }
        }
        return;
      }
      for (Index i = 0; i < v.size(); ++i) {
        const S a = v[i];
        S d = 0;
        switch (kind) {
          case Activation::gelu: {
            const S u = S(kGeluC0) * (a + S(kGeluC1) * a * a * a);
            const S t = std::tanh(u);
            const S du = S(kGeluC0) * (S(1) + S(3 * kGeluC1) * a * a);
            d = S(0.5) * (S(1) + t) + S(0.5) * a * (S(1) - t * t) * du;
            break;
          }
          case Activation::silu: {
            const S s = stable_sigmoid(a);
            d = s * (S(1) + a * (S(1) - s));
            break;
          }
          case Activation::softplus:
            d = stable_sigmoid(a);
            break;
          case Activation::sigmoid:
            d = y[i] * (S(1) - y[i]);
            break;
          case Activation::softmax:
            break;
        }
        dx[i] += g[i] * d;
      }
    });
  }
  return out;
}

// ---- layout ---------------------------------------------------------------

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  Var<S> out(x.value().reshaped(std::move(shape)));
  if (auto* tape = recording<S>({&x})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node()] {
      if (!on->has_grad()) return;
      xn->grad_buffer().array() += on->grad.array();
    });
  }
  return out;
}

template <typename S>
Tensor<S> permute_tensor(const Tensor<S>& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) {
    throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for shape " +
                         shape_str(x.shape()));
  }
  std::vector<bool> seen(r, false);
  for (int a : axes) {
    if (a < 0 || a >= r || seen[a]) {
      throw DimensionError("permute: axes are not a permutation of 0.." + std::to_string(r - 1));
    }
    seen[a] = true;
  }
  const Shape in_strides = strides_of(x.shape());
  Shape out_shape(r), src_stride(r);
  for (int i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[axes[i]];
    src_stride[i] = in_strides[axes[i]];
  }
  Tensor<S> out(out_shape);
  if (out.size() == 0) return out;
  if (r == 0) {
    out[0] = x[0];
    return out;
  }
  const Index last = out_shape[r - 1];
  const Index last_stride = src_stride[r - 1];
  std::vector<Index> idx(r, 0);
  Index src = 0;
  const S* in = x.data();
  S* dst = out.data();
  const Index rows = out.size() / last;
  for (Index row = 0; row < rows; ++row) {
    for (Index j = 0; j < last; ++j) dst[j] = in[src + j * last_stride];
    dst += last;
    for (int ax = r - 2; ax >= 0; --ax) {
      ++idx[ax];
      src += src_stride[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= src_stride[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

template <typename S>
Var<S> permute(const Var<S>& x, const std::vector<int>& axes) {
  Var<S> out(permute_tensor(x.value(), axes));
  if (auto* tape = recording<S>({&x})) {
    out.set_requires_grad(true);
    std::vector<int> inverse(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = static_cast<int>(i);
    tape->record([xn = x.node(), on = out.node(), inverse] {
      if (!on->has_grad()) return;
      xn->grad_buffer().array() += permute_tensor(on->grad, inverse).array();
    });
  }
  return out;
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const int a = resolve_axis(first, axis);
  Shape out_shape = first;
  out_shape[a] = 0;
  for (const Var<S>& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (static_cast<int>(i) == a) || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first) +
                           " on axis " + std::to_string(a));
    }
    out_shape[a] += s[a];
  }
  Tensor<S> result(out_shape);
  const AxisSplit os = split_axis(out_shape, a);
  std::vector<Index> offsets;
  Index off = 0;
  for (const Var<S>& p : parts) {
    offsets.push_back(off);
    const Index ext = p.shape()[a];
    const Index block = ext * os.inner;
    for (Index o = 0; o < os.outer; ++o) {
      std::copy_n(p.value().data() + o * block, block,
                  result.data() + o * os.extent * os.inner + off * os.inner);
    }
    off += ext;
  }
  Var<S> out(std::move(result));
  std::vector<const Var<S>*> ptrs;
  bool any = false;
  for (const Var<S>& p : parts) any = any || p.requires_grad();
  Tape<S>* tape = active_tape<S>();
  if (tape && any) {
    out.set_requires_grad(true);
    std::vector<NodePtr<S>> nodes;
    for (const Var<S>& p : parts) nodes.push_back(p.node());
    tape->record([nodes, offsets, os, on = out.node(), a] {
      if (!on->has_grad()) return;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (!wants(nodes[k])) continue;
        const Index ext = nodes[k]->value.shape()[a];
        const Index block = ext * os.inner;
        Tensor<S>& g = nodes[k]->grad_buffer();
        for (Index o = 0; o < os.outer; ++o) {
          const S* src = on->grad.data() + o * os.extent * os.inner + offsets[k] * os.inner;
          S* dst = g.data() + o * block;
          for (Index j = 0; j < block; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

template <typename S>
Var<S> slice(const Var<S>& x, int axis, Index start, Index length) {
  const int a = resolve_axis(x.shape(), axis);
  const AxisSplit is = split_axis(x.shape(), a);
  if (start < 0 || length < 0 || start + length > is.extent) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis " + std::to_string(a) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[a] = length;
  Tensor<S> result(out_shape);
  const Index block = length * is.inner;
  for (Index o = 0; o < is.outer; ++o) {
    std::copy_n(x.value().data() + o * is.extent * is.inner + start * is.inner, block,
                result.data() + o * block);
  }
  Var<S> out(std::move(result));
  if (auto* tape = recording<S>({&x})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node(), is, start, block] {
      if (!on->has_grad()) return;
      Tensor<S>& g = xn->grad_buffer();
      for (Index o = 0; o < is.outer; ++o) {
        S* dst = g.data() + o * is.extent * is.inner + start * is.inner;
        const S* src = on->grad.data() + o * block;
        for (Index j = 0; j < block; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// ---- contractions ---------------------------------------------------------

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const bool ok = as.size() >= 2 && as.size() == bs.size() &&
                  std::equal(as.begin(), as.end() - 2, bs.begin()) && as[as.size() - 1] == bs[bs.size() - 2];
  if (!ok) throw DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  const Index m = as[as.size() - 2], k = as.back(), n = bs.back();
  const Index batch = numel(Shape(as.begin(), as.end() - 2));
  Shape out_shape(as.begin(), as.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<S> result(out_shape);
  for (Index i = 0; i < batch; ++i) {
    MatrixMap<S>(result.data() + i * m * n, m, n).noalias() =
        ConstMatrixMap<S>(a.value().data() + i * m * k, m, k) * ConstMatrixMap<S>(b.value().data() + i * k * n, k, n);
  }
  Var<S> out(std::move(result));
  if (auto* tape = recording<S>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), bn = b.node(), on = out.node(), batch, m, k, n] {
      if (!on->has_grad()) return;
      for (Index i = 0; i < batch; ++i) {
        ConstMatrixMap<S> g(on->grad.data() + i * m * n, m, n);
        if (wants(an)) {
          MatrixMap<S>(an->grad_buffer().data() + i * m * k, m, k).noalias() +=
              g * ConstMatrixMap<S>(bn->value.data() + i * k * n, k, n).transpose();
        }
        if (wants(bn)) {
          MatrixMap<S>(bn->grad_buffer().data() + i * k * n, k, n).noalias() +=
              ConstMatrixMap<S>(an->value.data() + i * m * k, m, k).transpose() * g;
        }
      }
    });
  }
  return out;
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.empty() || ws.size() != 2 || xs.back() != ws[1]) {
    throw DimensionError("linear: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{ws[0]}) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for weight " + shape_str(ws));
  }
  const Index in = ws[1], outf = ws[0];
  const Index rows = x.value().size() / std::max<Index>(in, 1);
  Shape out_shape = xs;
  out_shape.back() = outf;
  Tensor<S> result(out_shape);
  MatrixMap<S> y(result.data(), rows, outf);
  y.noalias() = ConstMatrixMap<S>(x.value().data(), rows, in) *
                ConstMatrixMap<S>(weight.value().data(), outf, in).transpose();
  if (has_bias) y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bias.value().data(), outf);
  Var<S> out(std::move(result));
  if (auto* tape = recording<S>({&x, &weight, has_bias ? &bias : nullptr})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node(), rows, in, outf] {
      if (!on->has_grad()) return;
      ConstMatrixMap<S> g(on->grad.data(), rows, outf);
      if (wants(xn)) {
        MatrixMap<S>(xn->grad_buffer().data(), rows, in).noalias() +=
            g * ConstMatrixMap<S>(wn->value.data(), outf, in);
      }
      if (wants(wn)) {
        MatrixMap<S>(wn->grad_buffer().data(), outf, in).noalias() +=
            g.transpose() * ConstMatrixMap<S>(xn->value.data(), rows, in);
      }
      if (wants(bn)) {
        Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(bn->grad_buffer().data(), outf) += g.colwise().sum();
      }
    });
  }
  return out;
}

// ---- convolutions ---------------------------------------------------------

Conv3dOptions Conv3dOptions::same(const std::array<Index, 3>& kernel, const std::array<Index, 3>& dilation) {
  Conv3dOptions opt;
  opt.dilation = dilation;
  for (int i = 0; i < 3; ++i) {
    if (kernel[i] % 2 == 0) {
      throw ConfigError("same padding requires an odd kernel, got extent " + std::to_string(kernel[i]));
    }
    opt.padding[i] = dilation[i] * (kernel[i] - 1) / 2;
  }
  return opt;
}

namespace {

struct ConvGeometry {
  Index batch, cin, d, h, w;
  Index cout, kd, kh, kw;
  Index od, oh, ow;
  std::array<Index, 3> dil, pad;
  bool pointwise;  // 1x1x1 kernel without padding: the input is its own column matrix

  Index taps() const { return cin * kd * kh * kw; }
  Index in_volume() const { return d * h * w; }
  Index out_plane() const { return oh * ow; }
  Index out_volume() const { return od * oh * ow; }

  /// Output depth planes per im2col chunk, bounding the column buffer size.
  Index chunk_depth() const {
    constexpr Index kBudget = Index{1} << 22;
    const Index per_plane = std::max<Index>(1, taps() * out_plane());
    return std::clamp<Index>(kBudget / per_plane, 1, od);
  }
};

template <typename S>
void im2col(const ConvGeometry& g, const S* x, Index od0, Index nd, RowMatrix<S>& col) {
  const Index cols = nd * g.out_plane();
  col.resize(g.taps(), cols);
  for (Index ci = 0; ci < g.cin; ++ci) {
    const S* xc = x + ci * g.in_volume();
    for (Index a = 0; a < g.kd; ++a) {
      for (Index b = 0; b < g.kh; ++b) {
        for (Index c = 0; c < g.kw; ++c) {
          const Index row = ((ci * g.kd + a) * g.kh + b) * g.kw + c;
          S* dst = col.data() + row * cols;
          const Index ow_lo = std::clamp<Index>(g.pad[2] - c * g.dil[2], 0, g.ow);
          const Index ow_hi = std::clamp<Index>(g.w + g.pad[2] - c * g.dil[2], ow_lo, g.ow);
          for (Index z = 0; z < nd; ++z) {
            const Index id = od0 + z + a * g.dil[0] - g.pad[0];
            for (Index y = 0; y < g.oh; ++y) {
              S* out = dst + (z * g.oh + y) * g.ow;
              const Index ih = y + b * g.dil[1] - g.pad[1];
              if (id < 0 || id >= g.d || ih < 0 || ih >= g.h) {
                std::fill_n(out, g.ow, S(0));
                continue;
              }
              const S* src = xc + (id * g.h + ih) * g.w + c * g.dil[2] - g.pad[2];
              std::fill(out, out + ow_lo, S(0));
              std::copy(src + ow_lo, src + ow_hi, out + ow_lo);
              std::fill(out + ow_hi, out + g.ow, S(0));
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const ConvGeometry& g, const RowMatrix<S>& col, Index od0, Index nd, S* dx) {
  const Index cols = nd * g.out_plane();
  for (Index ci = 0; ci < g.cin; ++ci) {
    S* xc = dx + ci * g.in_volume();
    for (Index a = 0; a < g.kd; ++a) {
      for (Index b = 0; b < g.kh; ++b) {
        for (Index c = 0; c < g.kw; ++c) {
          const Index row = ((ci * g.kd + a) * g.kh + b) * g.kw + c;
          const S* src_row = col.data() + row * cols;
          const Index ow_lo = std::clamp<Index>(g.pad[2] - c * g.dil[2], 0, g.ow);
          const Index ow_hi = std::clamp<Index>(g.w + g.pad[2] - c * g.dil[2], ow_lo, g.ow);
          for (Index z = 0; z < nd; ++z) {
            const Index id = od0 + z + a * g.dil[0] - g.pad[0];
            if (id < 0 || id >= g.d) continue;
            for (Index y = 0; y < g.oh; ++y) {
              const Index ih = y + b * g.dil[1] - g.pad[1];
              if (ih < 0 || ih >= g.h) continue;
              const S* src = src_row + (z * g.oh + y) * g.ow;
              S* dst = xc + (id * g.h + ih) * g.w + c * g.dil[2] - g.pad[2];
              for (Index j = ow_lo; j < ow_hi; ++j) dst[j] += src[j];
            }
          }
        }
      }
    }
  }
}

template <typename S>
using StridedMap = Eigen::Map<RowMatrix<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using ConstStridedMap = Eigen::Map<const RowMatrix<S>, 0, Eigen::OuterStride<>>;

}  // namespace

template <typename S>
Var<S> conv3d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, const Conv3dOptions& opt) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 5 || ws.size() != 5) {
    throw DimensionError("conv3d: expected 5-d input and weight, got " + shape_str(xs) + " and " + shape_str(ws));
  }
  if (xs[1] != ws[1]) {
    throw DimensionError("conv3d: input channels " + shape_str(xs) + " do not match weight " + shape_str(ws));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{ws[0]}) {
    throw DimensionError("conv3d: bias " + shape_str(bias.shape()) + " for weight " + shape_str(ws));
  }
  ConvGeometry g{};
  g.batch = xs[0];
  g.cin = xs[1];
  g.d = xs[2];
  g.h = xs[3];
  g.w = xs[4];
  g.cout = ws[0];
  g.kd = ws[2];
  g.kh = ws[3];
  g.kw = ws[4];
  g.dil = opt.dilation;
  g.pad = opt.padding;
  g.od = g.d + 2 * g.pad[0] - g.dil[0] * (g.kd - 1);
  g.oh = g.h + 2 * g.pad[1] - g.dil[1] * (g.kh - 1);
  g.ow = g.w + 2 * g.pad[2] - g.dil[2] * (g.kw - 1);
  if (g.od <= 0 || g.oh <= 0 || g.ow <= 0) {
    throw DimensionError("conv3d: kernel " + shape_str(ws) + " larger than padded input " + shape_str(xs));
  }
  g.pointwise = g.kd == 1 && g.kh == 1 && g.kw == 1 && g.pad == std::array<Index, 3>{0, 0, 0};

  Tensor<S> result(Shape{g.batch, g.cout, g.od, g.oh, g.ow});
  ConstMatrixMap<S> wmat(w.value().data(), g.cout, g.taps());
  RowMatrix<S> col;
  for (Index b = 0; b < g.batch; ++b) {
    const S* xb = x.value().data() + b * g.cin * g.in_volume();
    S* yb = result.data() + b * g.cout * g.out_volume();
    if (g.pointwise) {
      MatrixMap<S>(yb, g.cout, g.out_volume()).noalias() = wmat * ConstMatrixMap<S>(xb, g.cin, g.in_volume());
      continue;
    }
    const Index step = g.chunk_depth();
    for (Index od0 = 0; od0 < g.od; od0 += step) {
      const Index nd = std::min(step, g.od - od0);
      im2col(g, xb, od0, nd, col);
      StridedMap<S>(yb + od0 * g.out_plane(), g.cout, nd * g.out_plane(), Eigen::OuterStride<>(g.out_volume()))
          .noalias() = wmat * col;
    }
  }
  if (has_bias) {
    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> y(
        result.data(), g.batch * g.cout, g.out_volume());
    for (Index r = 0; r < g.batch * g.cout; ++r) y.row(r) += bias.value()[r % g.cout];
  }

  Var<S> out(std::move(result));
  if (auto* tape = recording<S>({&x, &w, has_bias ? &bias : nullptr})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), wn = w.node(), bn = bias.node(), on = out.node(), g] {
      if (!on->has_grad()) return;
      const bool need_x = wants(xn), need_w = wants(wn), need_b = wants(bn);
      if (need_b) {
        Tensor<S>& db = bn->grad_buffer();
        for (Index b = 0; b < g.batch; ++b) {
          for (Index c = 0; c < g.cout; ++c) {
            db[c] += Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(
                         on->grad.data() + (b * g.cout + c) * g.out_volume(), g.out_volume())
                         .sum();
          }
        }
      }
      if (!need_x && !need_w) return;
      ConstMatrixMap<S> wmat(wn->value.data(), g.cout, g.taps());
      S* dw = need_w ? wn->grad_buffer().data() : nullptr;
      S* dx = need_x ? xn->grad_buffer().data() : nullptr;
      RowMatrix<S> col, dcol;
      for (Index b = 0; b < g.batch; ++b) {
        const S* xb = xn->value.data() + b * g.cin * g.in_volume();
        const S* gb = on->grad.data() + b * g.cout * g.out_volume();
        if (g.pointwise) {
          ConstMatrixMap<S> gm(gb, g.cout, g.out_volume());
          if (need_w) {
            MatrixMap<S>(dw, g.cout, g.taps()).noalias() +=
                gm * ConstMatrixMap<S>(xb, g.cin, g.in_volume()).transpose();
          }
          if (need_x) {
            MatrixMap<S>(dx + b * g.cin * g.in_volume(), g.cin, g.in_volume()).noalias() += wmat.transpose() * gm;
          }
          continue;
        }
        const Index step = g.chunk_depth();
        for (Index od0 = 0; od0 < g.od; od0 += step) {
          const Index nd = std::min(step, g.od - od0);
          ConstStridedMap<S> gm(gb + od0 * g.out_plane(), g.cout, nd * g.out_plane(),
                                Eigen::OuterStride<>(g.out_volume()));
          if (need_w) {
            im2col(g, xb, od0, nd, col);
            MatrixMap<S>(dw, g.cout, g.taps()).noalias() += gm * col.transpose();
          }
          if (need_x) {
            dcol.noalias() = wmat.transpose() * gm;
            col2im_add(g, dcol, od0, nd, dx + b * g.cin * g.in_volume());
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
Var<S> conv1d_depthwise(const Var<S>& x, const Var<S>& w, const Var<S>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 3 || ws[1] != 1 || ws[0] != xs[1]) {
    throw DimensionError("conv1d_depthwise: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{ws[0]}) {
    throw DimensionError("conv1d_depthwise: bias " + shape_str(bias.shape()) + " for weight " + shape_str(ws));
  }
  const Index batch = xs[0], ch = xs[1], len = xs[2], k = ws[2];
  Tensor<S> result(xs);
  for (Index b = 0; b < batch; ++b) {
    for (Index e = 0; e < ch; ++e) {
      const S* xr = x.value().data() + (b * ch + e) * len;
      const S* wr = w.value().data() + e * k;
      S* yr = result.data() + (b * ch + e) * len;
      const S b0 = has_bias ? bias.value()[e] : S(0);
      for (Index t = 0; t < len; ++t) {
        S acc = b0;
        for (Index j = 0; j < k; ++j) {
          const Index src = t - (k - 1) + j;
          if (src >= 0) acc += wr[j] * xr[src];
        }
        yr[t] = acc;
      }
    }
  }
  Var<S> out(std::move(result));
  if (auto* tape = recording<S>({&x, &w, has_bias ? &bias : nullptr})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), wn = w.node(), bn = bias.node(), on = out.node(), batch, ch, len, k] {
      if (!on->has_grad()) return;
      S* dx = wants(xn) ? xn->grad_buffer().data() : nullptr;
      S* dw = wants(wn) ? wn->grad_buffer().data() : nullptr;
      S* db = wants(bn) ? bn->grad_buffer().data() : nullptr;
      for (Index b = 0; b < batch; ++b) {
        for (Index e = 0; e < ch; ++e) {
          const S* g = on->grad.data() + (b * ch + e) * len;
          const S* xr = xn->value.data() + (b * ch + e) * len;
          const S* wr = wn->value.data() + e * k;
          for (Index t = 0; t < len; ++t) {
            if (db) db[e] += g[t];
            for (Index j = 0; j < k; ++j) {
              const Index src = t - (k - 1) + j;
              if (src < 0) continue;
              if (dw) dw[e * k + j] += g[t] * xr[src];
              if (dx) dx[(b * ch + e) * len + src] += g[t] * wr[j];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- normalisation --------------------------------------------------------

template <typename S>
Var<S> normalize(const Var<S>& x, NormKind kind, const Var<S>& gamma, const Var<S>& beta, double eps) {
  if (!(eps > 0.0)) throw ConfigError("normalize: eps must be positive");
  const Shape& xs = x.shape();
  Index rows = 0, width = 0, channels = 0;
  if (kind == NormKind::layer) {
    if (xs.empty()) throw DimensionError("layer_norm: scalar input");
    width = xs.back();
    rows = width == 0 ? 0 : x.value().size() / width;
    channels = width;
  } else {
    if (xs.size() < 3) throw DimensionError("instance_norm: expected [B, C, spatial...], got " + shape_str(xs));
    channels = xs[1];
    rows = xs[0] * xs[1];
    width = rows == 0 ? 0 : x.value().size() / rows;
  }
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    throw DimensionError("normalize: affine shapes " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " for input " + shape_str(xs));
  }
  Tensor<S> result(xs);
  Tensor<S> xhat(xs);
  Tensor<S> inv_std(Shape{rows});
  const S* in = x.value().data();
  const S* ga = gamma.value().data();
  const S* be = beta.value().data();
  for (Index r = 0; r < rows; ++r) {
    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> v(in + r * width, width);
    const S mu = v.mean();
    const S var = (v - mu).square().mean();
    const S inv = S(1) / std::sqrt(var + S(eps));
    inv_std[r] = inv;
    for (Index j = 0; j < width; ++j) {
      const S xh = (in[r * width + j] - mu) * inv;
      xhat[r * width + j] = xh;
      const Index c = kind == NormKind::layer ? j : r % channels;
      result[r * width + j] = xh * ga[c] + be[c];
    }
  }
  Var<S> out(std::move(result));
  if (auto* tape = recording<S>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(), xhat = std::move(xhat),
                  inv_std = std::move(inv_std), kind, rows, width, channels] {
      if (!on->has_grad()) return;
      const S* g = on->grad.data();
      const S* ga = gn->value.data();
      S* dx = wants(xn) ? xn->grad_buffer().data() : nullptr;
      S* dg = wants(gn) ? gn->grad_buffer().data() : nullptr;
      S* db = wants(bn) ? bn->grad_buffer().data() : nullptr;
      std::vector<S> dxhat(width);
      for (Index r = 0; r < rows; ++r) {
        S sum_d = 0, sum_dx = 0;
        for (Index j = 0; j < width; ++j) {
          const Index i = r * width + j;
          const Index c = kind == NormKind::layer ? j : r % channels;
          if (dg) dg[c] += g[i] * xhat[i];
          if (db) db[c] += g[i];
          dxhat[j] = g[i] * ga[c];
          sum_d += dxhat[j];
          sum_dx += dxhat[j] * xhat[i];
        }
        if (!dx) continue;
        const S n = static_cast<S>(width);
        for (Index j = 0; j < width; ++j) {
          const Index i = r * width + j;
          dx[i] += inv_std[r] * (dxhat[j] - sum_d / n - xhat[i] * sum_dx / n);
        }
      }
    });
  }
  return out;
}

// ---- resampling -----------------------------------------------------------

namespace {

struct LerpTap {
  Index lo, hi;
  double frac;
};

std::vector<LerpTap> lerp_taps(Index in, Index out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    Index lo = static_cast<Index>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const Index hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename S>
Var<S> upsample_hw(const Var<S>& x, Index factor) {
  if (factor <= 0) throw ConfigError("upsample_hw: factor must be positive");
  const Shape& xs = x.shape();
  if (xs.size() != 5) throw DimensionError("upsample_hw: expected [B,C,D,H,W], got " + shape_str(xs));
  const Index planes = xs[0] * xs[1] * xs[2], h = xs[3], w = xs[4];
  const Index oh = h * factor, ow = w * factor;
  const auto th = lerp_taps(h, oh);
  const auto tw = lerp_taps(w, ow);
  Tensor<S> result(Shape{xs[0], xs[1], xs[2], oh, ow});
  for (Index p = 0; p < planes; ++p) {
    const S* src = x.value().data() + p * h * w;
    S* dst = result.data() + p * oh * ow;
    for (Index i = 0; i < oh; ++i) {
      const S fy = static_cast<S>(th[i].frac);
      const S* r0 = src + th[i].lo * w;
      const S* r1 = src + th[i].hi * w;
      for (Index j = 0; j < ow; ++j) {
        const S fx = static_cast<S>(tw[j].frac);
        const S top = (S(1) - fx) * r0[tw[j].lo] + fx * r0[tw[j].hi];
        const S bot = (S(1) - fx) * r1[tw[j].lo] + fx * r1[tw[j].hi];
        dst[i * ow + j] = (S(1) - fy) * top + fy * bot;
      }
    }
  }
  Var<S> out(std::move(result));
  if (auto* tape = recording<S>({&x})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node(), th, tw, planes, h, w, oh, ow] {
      if (!on->has_grad()) return;
      Tensor<S>& dx = xn->grad_buffer();
      for (Index p = 0; p < planes; ++p) {
        const S* g = on->grad.data() + p * oh * ow;
        S* d = dx.data() + p * h * w;
        for (Index i = 0; i < oh; ++i) {
          const S fy = static_cast<S>(th[i].frac);
          S* r0 = d + th[i].lo * w;
          S* r1 = d + th[i].hi * w;
          for (Index j = 0; j < ow; ++j) {
            const S fx = static_cast<S>(tw[j].frac);
            const S v = g[i * ow + j];
            r0[tw[j].lo] += (S(1) - fy) * (S(1) - fx) * v;
            r0[tw[j].hi] += (S(1) - fy) * fx * v;
            r1[tw[j].lo] += fy * (S(1) - fx) * v;
            r1[tw[j].hi] += fy * fx * v;
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> resize_bilinear_hwc(const Tensor<S>& x, Index out_h, Index out_w) {
  if (x.rank() != 3) throw DimensionError("resize_bilinear_hwc: expected [H,W,C], got " + shape_str(x.shape()));
  const Index h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h == out_h && w == out_w) return x;
  const auto th = lerp_taps(h, out_h);
  const auto tw = lerp_taps(w, out_w);
  Tensor<S> out(Shape{out_h, out_w, c});
  for (Index i = 0; i < out_h; ++i) {
    for (Index j = 0; j < out_w; ++j) {
      const double fy = th[i].frac, fx = tw[j].frac;
      for (Index k = 0; k < c; ++k) {
        const double v = (1 - fy) * ((1 - fx) * x.at({th[i].lo, tw[j].lo, k}) + fx * x.at({th[i].lo, tw[j].hi, k})) +
                         fy * ((1 - fx) * x.at({th[i].hi, tw[j].lo, k}) + fx * x.at({th[i].hi, tw[j].hi, k}));
        out.at({i, j, k}) = static_cast<S>(v);
      }
    }
  }
  return out;
}

// ---- reductions -----------------------------------------------------------

template <typename S>
Var<S> sum(const Var<S>& x) {
  Var<S> out(Tensor<S>(Shape{}, x.value().array().sum()));
  if (auto* tape = recording<S>({&x})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node()] {
      if (!on->has_grad()) return;
      xn->grad_buffer().array() += on->grad[0];
    });
  }
  return out;
}

template <typename S>
Var<S> mean(const Var<S>& x) {
  const Index n = x.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), S(1) / static_cast<S>(n));
}

template <typename S>
Var<S> weighted_sum(const Var<S>& x, const Tensor<S>& weights) {
  if (weights.shape() != x.shape()) {
    throw DimensionError("weighted_sum: weights " + shape_str(weights.shape()) + " vs " + shape_str(x.shape()));
  }
  Var<S> out(Tensor<S>(Shape{}, (x.value().array() * weights.array()).sum()));
  if (auto* tape = recording<S>({&x})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node(), weights] {
      if (!on->has_grad()) return;
      xn->grad_buffer().array() += on->grad[0] * weights.array();
    });
  }
  return out;
}

#define TPMAMBA_INSTANTIATE_OPS(S)                                                              \
  template Var<S> add(const Var<S>&, const Var<S>&);                                            \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                            \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                            \
  template Var<S> scale(const Var<S>&, S);                                                      \
  template Var<S> neg(const Var<S>&);                                                           \
  template Var<S> exp(const Var<S>&);                                                           \
  template Var<S> add_broadcast(const Var<S>&, const Var<S>&);                                  \
  template Var<S> activation(const Var<S>&, Activation, int);                                   \
  template Var<S> reshape(const Var<S>&, Shape);                                                \
  template Tensor<S> permute_tensor(const Tensor<S>&, const std::vector<int>&);                 \
  template Var<S> permute(const Var<S>&, const std::vector<int>&);                              \
  template Var<S> concat(const std::vector<Var<S>>&, int);                                      \
  template Var<S> slice(const Var<S>&, int, Index, Index);                                      \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                         \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                          \
  template Var<S> conv3d(const Var<S>&, const Var<S>&, const Var<S>&, const Conv3dOptions&);    \
  template Var<S> conv1d_depthwise(const Var<S>&, const Var<S>&, const Var<S>&);                \
  template Var<S> normalize(const Var<S>&, NormKind, const Var<S>&, const Var<S>&, double);     \
  template Var<S> upsample_hw(const Var<S>&, Index);                                            \
  template Tensor<S> resize_bilinear_hwc(const Tensor<S>&, Index, Index);                       \
  template Var<S> sum(const Var<S>&);                                                           \
  template Var<S> mean(const Var<S>&);                                                          \
  template Var<S> weighted_sum(const Var<S>&, const Tensor<S>&);

TPMAMBA_INSTANTIATE_OPS(float)
TPMAMBA_INSTANTIATE_OPS(double)

#undef TPMAMBA_INSTANTIATE_OPS

}  // namespace tpmamba
