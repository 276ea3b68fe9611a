#include "ddl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ddl {

namespace {

template <typename S>
using Array = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatrixMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatrixMap = Eigen::Map<const RowMatrix<S>>;
template <typename S>
using NodePtr = std::shared_ptr<detail::TensorNode<S>>;

template <typename S>
void check_finite(const Tensor<S>& t, const char* op) {
  if (finite_checks_enabled() && !t.data().allFinite())
    throw NonFiniteError(std::string(op) + ": non-finite input of shape " + to_string(t.shape()));
}

/// Active tape when at least one operand needs a gradient.
Tape* recording(std::initializer_list<const detail::Node*> inputs) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return nullptr;
  for (const auto* n : inputs)
    if (n->requires_grad) return tape;
  return nullptr;
}

std::string pair_message(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

struct Broadcast {
  Shape out;
  Shape stride_a;
  Shape stride_b;
};

Shape aligned_strides(const Shape& in, const Shape& out) {
  const std::size_t n = out.size();
  const std::size_t offset = n - in.size();
  Shape strides(n, 0);
  Shape contiguous = contiguous_strides(in);
  for (std::size_t i = 0; i < in.size(); ++i)
    strides[i + offset] = (in[i] == 1 && out[i + offset] != 1) ? 0 : contiguous[i];
  return strides;
}

Broadcast plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Broadcast p;
  p.out.assign(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    Index da = i + a.size() >= n ? a[i + a.size() - n] : 1;
    Index db = i + b.size() >= n ? b[i + b.size() - n] : 1;
    if (da == db || db == 1) p.out[i] = da;
    else if (da == 1) p.out[i] = db;
    else throw ShapeError(pair_message(op, a, b));
  }
  p.stride_a = aligned_strides(a, p.out);
  p.stride_b = aligned_strides(b, p.out);
  return p;
}

/// Visits every output position with the matching offsets of two strided
/// operands: f(out_index, a_index, b_index).
template <typename F>
void walk2(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  const Index total = numel(out);
  if (total == 0) return;
  const std::size_t n = out.size();
  if (n == 0) {
    f(Index{0}, Index{0}, Index{0});
    return;
  }
  const Index inner = out[n - 1];
  const Index ia_step = sa[n - 1];
  const Index ib_step = sb[n - 1];
  std::vector<Index> idx(n, 0);
  Index io = 0, ia = 0, ib = 0;
  const Index outer = total / inner;
  for (Index o = 0; o < outer; ++o) {
    for (Index j = 0; j < inner; ++j) f(io + j, ia + j * ia_step, ib + j * ib_step);
    io += inner;
    for (Index ax = static_cast<Index>(n) - 2; ax >= 0; --ax) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

template <typename F>
void walk1(const Shape& out, const Shape& s, F&& f) {
  walk2(out, s, s, [&](Index io, Index is, Index) { f(io, is); });
}

struct AxisSplit {
  Index outer = 1;
  Index len = 1;
  Index inner = 1;
};

AxisSplit split_at(const Shape& shape, Index axis) {
  AxisSplit s;
  for (Index i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[i];
  return s;
}

// Generic binary op. `partials(x, y)` returns (d out/d x, d out/d y).
template <typename S, typename Fwd, typename Partials>
Tensor<S> binary(const char* name, const Tensor<S>& a, const Tensor<S>& b, Fwd fwd,
                 Partials partials) {
  check_finite(a, name);
  check_finite(b, name);
  const bool same = a.shape() == b.shape();
  Broadcast p;
  Array<S> data;
  if (same) {
    data = a.data().binaryExpr(b.data(), fwd);
  } else {
    p = plan_broadcast(name, a.shape(), b.shape());
    data.resize(numel(p.out));
    const auto& x = a.data();
    const auto& y = b.data();
    walk2(p.out, p.stride_a, p.stride_b,
          [&](Index io, Index ia, Index ib) { data[io] = fwd(x[ia], y[ib]); });
  }
  Tensor<S> out(same ? a.shape() : p.out, std::move(data));
  if (Tape* tape = recording({a.node().get(), b.node().get()})) {
    tape->record({a.node(), b.node()}, out.node(),
                 [an = a.node(), bn = b.node(), on = out.node(), p = std::move(p), same, partials] {
                   const auto& g = on->grad;
                   const auto& x = an->data;
                   const auto& y = bn->data;
                   Array<S>* ga = an->requires_grad ? &an->ensure_grad() : nullptr;
                   Array<S>* gb = bn->requires_grad ? &bn->ensure_grad() : nullptr;
                   auto visit = [&](Index io, Index ia, Index ib) {
                     auto [pa, pb] = partials(x[ia], y[ib]);
                     if (ga) (*ga)[ia] += g[io] * pa;
                     if (gb) (*gb)[ib] += g[io] * pb;
                   };
                   if (same) {
                     for (Index i = 0; i < g.size(); ++i) visit(i, i, i);
                   } else {
                     walk2(p.out, p.stride_a, p.stride_b, visit);
                   }
                 });
  }
  return out;
}

// Generic unary op over whole arrays: fwd(x) -> y, deriv(x, y) -> dy/dx.
template <typename S, typename Fwd, typename Deriv>
Tensor<S> unary(const char* name, const Tensor<S>& a, Fwd fwd, Deriv deriv) {
  check_finite(a, name);
  Tensor<S> out(a.shape(), Array<S>(fwd(a.data())));
  if (Tape* tape = recording({a.node().get()})) {
    tape->record({a.node()}, out.node(), [an = a.node(), on = out.node(), deriv] {
      an->ensure_grad() += on->grad * deriv(an->data, on->data);
    });
  }
  return out;
}

}  // namespace

// Binary

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary(
      "add", a, b, [](S x, S y) { return x + y; },
      [](S, S) { return std::pair<S, S>{S(1), S(1)}; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary(
      "sub", a, b, [](S x, S y) { return x - y; },
      [](S, S) { return std::pair<S, S>{S(1), S(-1)}; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary(
      "mul", a, b, [](S x, S y) { return x * y; },
      [](S x, S y) { return std::pair<S, S>{y, x}; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return binary(
      "div", a, b, [](S x, S y) { return x / y; },
      [](S x, S y) { return std::pair<S, S>{S(1) / y, -x / (y * y)}; });
}

template <typename S>
Tensor<S> maximum(const Tensor<S>& a, const Tensor<S>& b) {
  return binary(
      "maximum", a, b, [](S x, S y) { return x >= y ? x : y; },
      [](S x, S y) { return x >= y ? std::pair<S, S>{S(1), S(0)} : std::pair<S, S>{S(0), S(1)}; });
}

// Unary

template <typename S>
Tensor<S> affine(const Tensor<S>& a, S scale, S shift) {
  return unary(
      "affine", a, [=](const Array<S>& x) { return (x * scale + shift).eval(); },
      [=](const Array<S>& x, const Array<S>&) { return Array<S>::Constant(x.size(), scale); });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return affine(a, S(-1), S(0));
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  return unary(
      "square", a, [](const Array<S>& x) { return x.square().eval(); },
      [](const Array<S>& x, const Array<S>&) { return (S(2) * x).eval(); });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
  return unary(
      "sqrt", a, [](const Array<S>& x) { return x.sqrt().eval(); },
      [](const Array<S>&, const Array<S>& y) { return (S(0.5) / y).eval(); });
}

template <typename S>
Tensor<S> rsqrt(const Tensor<S>& a) {
  return unary(
      "rsqrt", a, [](const Array<S>& x) { return x.rsqrt().eval(); },
      [](const Array<S>& x, const Array<S>& y) { return (S(-0.5) * y / x).eval(); });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return unary(
      "exp", a, [](const Array<S>& x) { return x.exp().eval(); },
      [](const Array<S>&, const Array<S>& y) { return y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  return unary(
      "log", a, [](const Array<S>& x) { return x.log().eval(); },
      [](const Array<S>& x, const Array<S>&) { return x.inverse().eval(); });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& a) {
  return unary(
      "tanh", a, [](const Array<S>& x) { return x.tanh().eval(); },
      [](const Array<S>&, const Array<S>& y) { return (S(1) - y.square()).eval(); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return unary(
      "sigmoid", a, [](const Array<S>& x) { return (S(1) / (S(1) + (-x).exp())).eval(); },
      [](const Array<S>&, const Array<S>& y) { return (y * (S(1) - y)).eval(); });
}

template <typename S>
Tensor<S> silu(const Tensor<S>& a) {
  return unary(
      "silu", a, [](const Array<S>& x) { return (x / (S(1) + (-x).exp())).eval(); },
      [](const Array<S>& x, const Array<S>&) {
        Array<S> s = S(1) / (S(1) + (-x).exp());
        return (s * (S(1) + x * (S(1) - s))).eval();
      });
}

// Matmul

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  check_finite(a, "matmul");
  check_finite(b, "matmul");
  if (a.ndim() < 1 || b.ndim() < 2 || a.dim(-1) != b.dim(-2))
    throw ShapeError(pair_message("matmul", a.shape(), b.shape()));

  if (b.ndim() == 2) {
    const Index k = b.dim(0), n = b.dim(1);
    const Index m = a.size() / k;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    Tensor<S> out = Tensor<S>::empty(out_shape);
    MatrixMap<S>(out.mutable_data().data(), m, n).noalias() =
        ConstMatrixMap<S>(a.data().data(), m, k) * ConstMatrixMap<S>(b.data().data(), k, n);
    if (Tape* tape = recording({a.node().get(), b.node().get()})) {
      tape->record({a.node(), b.node()}, out.node(),
                   [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
                     ConstMatrixMap<S> g(on->grad.data(), m, n);
                     if (an->requires_grad)
                       MatrixMap<S>(an->ensure_grad().data(), m, k).noalias() +=
                           g * ConstMatrixMap<S>(bn->data.data(), k, n).transpose();
                     if (bn->requires_grad)
                       MatrixMap<S>(bn->ensure_grad().data(), k, n).noalias() +=
                           ConstMatrixMap<S>(an->data.data(), m, k).transpose() * g;
                   });
    }
    return out;
  }

  if (a.ndim() != b.ndim() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
    throw ShapeError(pair_message("matmul", a.shape(), b.shape()));
  const Index m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const Index batch = a.size() / (m * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor<S> out = Tensor<S>::empty(out_shape);
  for (Index i = 0; i < batch; ++i)
    MatrixMap<S>(out.mutable_data().data() + i * m * n, m, n).noalias() =
        ConstMatrixMap<S>(a.data().data() + i * m * k, m, k) *
        ConstMatrixMap<S>(b.data().data() + i * k * n, k, n);
  if (Tape* tape = recording({a.node().get(), b.node().get()})) {
    tape->record({a.node(), b.node()}, out.node(),
                 [an = a.node(), bn = b.node(), on = out.node(), m, k, n, batch] {
                   for (Index i = 0; i < batch; ++i) {
                     ConstMatrixMap<S> g(on->grad.data() + i * m * n, m, n);
                     if (an->requires_grad)
                       MatrixMap<S>(an->ensure_grad().data() + i * m * k, m, k).noalias() +=
                           g * ConstMatrixMap<S>(bn->data.data() + i * k * n, k, n).transpose();
                     if (bn->requires_grad)
                       MatrixMap<S>(bn->ensure_grad().data() + i * k * n, k, n).noalias() +=
                           ConstMatrixMap<S>(an->data.data() + i * m * k, m, k).transpose() * g;
                   }
                 });
  }
  return out;
}

// Layout

template <typename S>
Tensor<S> transpose(const Tensor<S>& a, Index axis0, Index axis1) {
  check_finite(a, "transpose");
  const Index r = a.ndim();
  const Index i0 = normalize_axis(axis0, r), i1 = normalize_axis(axis1, r);
  Shape out_shape = a.shape();
  std::swap(out_shape[i0], out_shape[i1]);
  Shape src_strides = contiguous_strides(a.shape());
  std::swap(src_strides[i0], src_strides[i1]);

  Tensor<S> out = Tensor<S>::empty(out_shape);
  auto& dst = out.mutable_data();
  const auto& src = a.data();
  walk1(out_shape, src_strides, [&](Index io, Index is) { dst[io] = src[is]; });
  if (Tape* tape = recording({a.node().get()})) {
    tape->record({a.node()}, out.node(), [an = a.node(), on = out.node(), out_shape, src_strides] {
      auto& ga = an->ensure_grad();
      const auto& g = on->grad;
      walk1(out_shape, src_strides, [&](Index io, Index is) { ga[is] += g[io]; });
    });
  }
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  Index known = 1;
  int inferred = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (inferred >= 0) throw ShapeError("reshape: more than one inferred extent");
      inferred = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (inferred >= 0) {
    if (known == 0 || a.size() % known != 0)
      throw ShapeError(pair_message("reshape", a.shape(), shape));
    shape[inferred] = a.size() / known;
  }
  if (numel(shape) != a.size()) throw ShapeError(pair_message("reshape", a.shape(), shape));
  Tensor<S> out(shape, a.data());
  if (Tape* tape = recording({a.node().get()})) {
    tape->record({a.node()}, out.node(),
                 [an = a.node(), on = out.node()] { an->ensure_grad() += on->grad; });
  }
  return out;
}

template <typename S>
Tensor<S> unsqueeze(const Tensor<S>& a, Index axis) {
  Shape shape = a.shape();
  const Index r = a.ndim() + 1;
  Index ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("unsqueeze: axis out of range");
  shape.insert(shape.begin() + ax, 1);
  return reshape(a, shape);
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, Index axis, Index start, Index stop) {
  const Index ax = normalize_axis(axis, a.ndim());
  if (start < 0 || stop < start || stop > a.shape()[ax])
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(stop) +
                     ") invalid for shape " + to_string(a.shape()));
  const AxisSplit s = split_at(a.shape(), ax);
  const Index len = stop - start;
  Shape out_shape = a.shape();
  out_shape[ax] = len;
  Tensor<S> out(out_shape);
  auto& dst = out.mutable_data();
  const auto& src = a.data();
  for (Index o = 0; o < s.outer; ++o)
    dst.segment(o * len * s.inner, len * s.inner) =
        src.segment((o * s.len + start) * s.inner, len * s.inner);
  if (Tape* tape = recording({a.node().get()})) {
    tape->record({a.node()}, out.node(), [an = a.node(), on = out.node(), s, start, len] {
      auto& ga = an->ensure_grad();
      for (Index o = 0; o < s.outer; ++o)
        ga.segment((o * s.len + start) * s.inner, len * s.inner) +=
            on->grad.segment(o * len * s.inner, len * s.inner);
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Index ax = normalize_axis(axis, parts.front().ndim());
  Shape out_shape = parts.front().shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (static_cast<Index>(probe.size()) != static_cast<Index>(out_shape.size()))
      throw ShapeError(pair_message("concat", parts.front().shape(), p.shape()));
    probe[ax] = 0;
    Shape ref = out_shape;
    ref[ax] = 0;
    if (probe != ref) throw ShapeError(pair_message("concat", parts.front().shape(), p.shape()));
    out_shape[ax] += p.shape()[ax];
  }
  const AxisSplit total = split_at(out_shape, ax);
  Tensor<S> out = Tensor<S>::empty(out_shape);
  auto& dst = out.mutable_data();
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    check_finite(p, "concat");
    const Index len = p.shape()[ax];
    for (Index o = 0; o < total.outer; ++o)
      dst.segment((o * total.len + offset) * total.inner, len * total.inner) =
          p.data().segment(o * len * total.inner, len * total.inner);
    offsets.push_back(offset);
    offset += len;
  }
  Tape* tape = Tape::active();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::vector<NodePtr<S>> nodes;
    for (const auto& p : parts) {
      inputs.push_back(p.node());
      nodes.push_back(p.node());
    }
    tape->record(std::move(inputs), out.node(),
                 [nodes = std::move(nodes), offsets = std::move(offsets), on = out.node(), total, ax] {
                   for (std::size_t i = 0; i < nodes.size(); ++i) {
                     auto& n = *nodes[i];
                     if (!n.requires_grad) continue;
                     auto& g = n.ensure_grad();
                     const Index len = n.shape[ax];
                     for (Index o = 0; o < total.outer; ++o)
                       g.segment(o * len * total.inner, len * total.inner) +=
                           on->grad.segment((o * total.len + offsets[i]) * total.inner,
                                            len * total.inner);
                   }
                 });
  }
  return out;
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& a, const Shape& shape) {
  check_finite(a, "broadcast_to");
  Broadcast p = plan_broadcast("broadcast_to", a.shape(), shape);
  if (p.out != shape) throw ShapeError(pair_message("broadcast_to", a.shape(), shape));
  Tensor<S> out = Tensor<S>::empty(shape);
  auto& dst = out.mutable_data();
  const auto& src = a.data();
  walk1(shape, p.stride_a, [&](Index io, Index is) { dst[io] = src[is]; });
  if (Tape* tape = recording({a.node().get()})) {
    tape->record({a.node()}, out.node(), [an = a.node(), on = out.node(), p = std::move(p)] {
      auto& ga = an->ensure_grad();
      const auto& g = on->grad;
      walk1(p.out, p.stride_a, [&](Index io, Index is) { ga[is] += g[io]; });
    });
  }
  return out;
}

// Reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& a, Index axis, bool keepdim) {
  check_finite(a, "sum");
  const Index ax = normalize_axis(axis, a.ndim());
  const AxisSplit s = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  if (keepdim) out_shape[ax] = 1;
  else out_shape.erase(out_shape.begin() + ax);
  Tensor<S> out(out_shape);
  auto& dst = out.mutable_data();
  const auto& src = a.data();
  if (s.inner == 1) {
    for (Index o = 0; o < s.outer; ++o) dst[o] = src.segment(o * s.len, s.len).sum();
  } else {
    for (Index o = 0; o < s.outer; ++o)
      for (Index j = 0; j < s.len; ++j)
        dst.segment(o * s.inner, s.inner) += src.segment((o * s.len + j) * s.inner, s.inner);
  }
  if (Tape* tape = recording({a.node().get()})) {
    tape->record({a.node()}, out.node(), [an = a.node(), on = out.node(), s] {
      auto& ga = an->ensure_grad();
      if (s.inner == 1) {
        for (Index o = 0; o < s.outer; ++o) ga.segment(o * s.len, s.len) += on->grad[o];
        return;
      }
      for (Index o = 0; o < s.outer; ++o)
        for (Index j = 0; j < s.len; ++j)
          ga.segment((o * s.len + j) * s.inner, s.inner) += on->grad.segment(o * s.inner, s.inner);
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a, Index axis, bool keepdim) {
  const Index len = a.dim(axis);
  return affine(sum(a, axis, keepdim), S(1) / static_cast<S>(len), S(0));
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  check_finite(a, "sum");
  Tensor<S> out = Tensor<S>::scalar(a.data().sum());
  if (Tape* tape = recording({a.node().get()})) {
    tape->record({a.node()}, out.node(),
                 [an = a.node(), on = out.node()] { an->ensure_grad() += on->grad[0]; });
  }
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  return affine(sum(a), S(1) / static_cast<S>(a.size()), S(0));
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& a, Index axis) {
  check_finite(a, "softmax");
  const Index ax = normalize_axis(axis, a.ndim());
  const AxisSplit s = split_at(a.shape(), ax);
  Tensor<S> out = Tensor<S>::empty(a.shape());
  auto& y = out.mutable_data();
  const auto& x = a.data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.len * s.inner + i;
      S m = -std::numeric_limits<S>::infinity();
      for (Index j = 0; j < s.len; ++j) m = std::max(m, x[base + j * s.inner]);
      S z = 0;
      for (Index j = 0; j < s.len; ++j) {
        const S e = std::exp(x[base + j * s.inner] - m);
        y[base + j * s.inner] = e;
        z += e;
      }
      for (Index j = 0; j < s.len; ++j) y[base + j * s.inner] /= z;
    }
  }
  if (Tape* tape = recording({a.node().get()})) {
    tape->record({a.node()}, out.node(), [an = a.node(), on = out.node(), s] {
      auto& ga = an->ensure_grad();
      const auto& g = on->grad;
      const auto& yv = on->data;
      for (Index o = 0; o < s.outer; ++o) {
        for (Index i = 0; i < s.inner; ++i) {
          const Index base = o * s.len * s.inner + i;
          S dot = 0;
          for (Index j = 0; j < s.len; ++j) dot += g[base + j * s.inner] * yv[base + j * s.inner];
          for (Index j = 0; j < s.len; ++j) {
            const Index t = base + j * s.inner;
            ga[t] += yv[t] * (g[t] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a) {
  Tensor<To> out(a.shape(), a.data().template cast<To>());
  if (Tape* tape = recording({a.node().get()})) {
    tape->record({a.node()}, out.node(), [an = a.node(), on = out.node()] {
      an->ensure_grad() += on->grad.template cast<From>();
    });
  }
  return out;
}

template <typename S>
Tensor<S> embedding(const Tensor<S>& table, std::span<const std::int32_t> indices,
                    const Shape& index_shape) {
  if (table.ndim() != 2) throw ShapeError("embedding: table must be rank 2, got " + to_string(table.shape()));
  if (numel(index_shape) != static_cast<Index>(indices.size()))
    throw ShapeError("embedding: index count does not match shape " + to_string(index_shape));
  const Index vocab = table.dim(0), d = table.dim(1);
  Shape out_shape = index_shape;
  out_shape.push_back(d);
  Tensor<S> out = Tensor<S>::empty(out_shape);
  auto& dst = out.mutable_data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Index row = indices[i];
    if (row < 0 || row >= vocab)
      throw std::out_of_range("embedding: index " + std::to_string(row) + " outside vocabulary of " +
                              std::to_string(vocab));
    dst.segment(static_cast<Index>(i) * d, d) = table.data().segment(row * d, d);
  }
  if (Tape* tape = recording({table.node().get()})) {
    std::vector<std::int32_t> rows(indices.begin(), indices.end());
    tape->record({table.node()}, out.node(), [tn = table.node(), on = out.node(), rows = std::move(rows), d] {
      auto& g = tn->ensure_grad();
      for (std::size_t i = 0; i < rows.size(); ++i)
        g.segment(static_cast<Index>(rows[i]) * d, d) += on->grad.segment(static_cast<Index>(i) * d, d);
    });
  }
  return out;
}

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const std::int32_t> targets) {
  check_finite(logits, "cross_entropy");
  const Index vocab = logits.dim(-1);
  const Index rows = logits.size() / vocab;
  if (rows != static_cast<Index>(targets.size()))
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     to_string(logits.shape()));
  ConstMatrixMap<S> x(logits.data().data(), rows, vocab);
  double total = 0;
  for (Index r = 0; r < rows; ++r) {
    const Index t = targets[r];
    if (t < 0 || t >= vocab) throw std::out_of_range("cross_entropy: target outside vocabulary");
    const S m = x.row(r).maxCoeff();
    const S lse = m + std::log((x.row(r).array() - m).exp().sum());
    total += static_cast<double>(lse - x(r, t));
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / static_cast<double>(rows)));
  if (Tape* tape = recording({logits.node().get()})) {
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    tape->record({logits.node()}, out.node(), [ln = logits.node(), on = out.node(), tgt = std::move(tgt), rows, vocab] {
      ConstMatrixMap<S> xs(ln->data.data(), rows, vocab);
      MatrixMap<S> g(ln->ensure_grad().data(), rows, vocab);
      const S scale = on->grad[0] / static_cast<S>(rows);
      for (Index r = 0; r < rows; ++r) {
        const S m = xs.row(r).maxCoeff();
        auto e = (xs.row(r).array() - m).exp().eval();
        g.row(r).array() += scale * e / e.sum();
        g(r, tgt[r]) -= scale;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>* scale, S eps) {
  check_finite(x, "rms_norm");
  if (x.ndim() < 1) throw ShapeError("rms_norm: scalar input");
  const Index d = x.dim(-1);
  if (scale && scale->size() != d)
    throw ShapeError(pair_message("rms_norm", x.shape(), scale->shape()));
  const Index rows = d == 0 ? 0 : x.size() / d;
  Tensor<S> out = Tensor<S>::empty(x.shape());
  Array<S> inv(rows);
  const auto& xd = x.data();
  auto& y = out.mutable_data();
  for (Index r = 0; r < rows; ++r) {
    const auto xs = xd.segment(r * d, d);
    inv[r] = S(1) / std::sqrt(xs.square().sum() / static_cast<S>(d) + eps);
    if (scale) y.segment(r * d, d) = xs * inv[r] * scale->data();
    else y.segment(r * d, d) = xs * inv[r];
  }
  const detail::Node* scale_node = scale ? scale->node().get() : x.node().get();
  if (Tape* tape = recording({x.node().get(), scale_node})) {
    NodePtr<S> sn = scale ? scale->node() : nullptr;
    std::vector<std::shared_ptr<detail::Node>> inputs{x.node()};
    if (sn) inputs.push_back(sn);
    tape->record(std::move(inputs), out.node(), [xn = x.node(), sn, on = out.node(), inv, rows, d] {
      const auto& g = on->grad;
      const auto& xd = xn->data;
      for (Index r = 0; r < rows; ++r) {
        const auto xs = xd.segment(r * d, d);
        const auto gs = g.segment(r * d, d);
        const S ir = inv[r];
        if (xn->requires_grad) {
          const Array<S> gw = sn ? Array<S>(gs * sn->data) : Array<S>(gs);
          const S dot = (gw * xs).sum();
          xn->ensure_grad().segment(r * d, d) += ir * gw - xs * (ir * ir * ir * dot / static_cast<S>(d));
        }
        if (sn && sn->requires_grad) sn->ensure_grad() += gs * xs * ir;
      }
    });
  }
  return out;
}

#define DDL_INSTANTIATE_OPS(S)                                                            \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> div(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> maximum(const Tensor<S>&, const Tensor<S>&);                         \
  template Tensor<S> affine(const Tensor<S>&, S, S);                                      \
  template Tensor<S> neg(const Tensor<S>&);                                               \
  template Tensor<S> square(const Tensor<S>&);                                            \
  template Tensor<S> sqrt(const Tensor<S>&);                                              \
  template Tensor<S> rsqrt(const Tensor<S>&);                                             \
  template Tensor<S> exp(const Tensor<S>&);                                               \
  template Tensor<S> log(const Tensor<S>&);                                               \
  template Tensor<S> tanh(const Tensor<S>&);                                              \
  template Tensor<S> sigmoid(const Tensor<S>&);                                           \
  template Tensor<S> silu(const Tensor<S>&);                                              \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                          \
  template Tensor<S> transpose(const Tensor<S>&, Index, Index);                           \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                    \
  template Tensor<S> unsqueeze(const Tensor<S>&, Index);                                  \
  template Tensor<S> slice(const Tensor<S>&, Index, Index, Index);                        \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, Index);                        \
  template Tensor<S> broadcast_to(const Tensor<S>&, const Shape&);                        \
  template Tensor<S> sum(const Tensor<S>&, Index, bool);                                  \
  template Tensor<S> mean(const Tensor<S>&, Index, bool);                                 \
  template Tensor<S> sum(const Tensor<S>&);                                               \
  template Tensor<S> mean(const Tensor<S>&);                                              \
  template Tensor<S> softmax(const Tensor<S>&, Index);                                    \
  template Tensor<S> embedding(const Tensor<S>&, std::span<const std::int32_t>, const Shape&); \
  template Tensor<S> cross_entropy(const Tensor<S>&, std::span<const std::int32_t>);      \
  template Tensor<S> rms_norm(const Tensor<S>&, const Tensor<S>*, S);

DDL_INSTANTIATE_OPS(float)
DDL_INSTANTIATE_OPS(double)
#undef DDL_INSTANTIATE_OPS

template Tensor<float> cast<float, float>(const Tensor<float>&);
template Tensor<double> cast<double, float>(const Tensor<float>&);
template Tensor<float> cast<float, double>(const Tensor<double>&);
template Tensor<double> cast<double, double>(const Tensor<double>&);

}  // namespace ddl
