#include "rainforge/ops.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "rainforge/detail/kernels.hpp"

namespace rainforge {

using detail::normalize_axis;

namespace {

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw Error(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                dtype_name(b.dtype()));
  }
}

struct BroadcastPlan {
  Shape out;
  std::vector<int64_t> stride_a, stride_b;
};

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
  }
  return st;
}

// Strides of `in` viewed inside `out` (0 on broadcast axes).
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const size_t r = out.size();
  const size_t off = r - in.size();
  auto st = contiguous_strides(in);
  std::vector<int64_t> res(r, 0);
  for (size_t i = 0; i < in.size(); ++i) {
    res[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : st[i];
  }
  return res;
}

BroadcastPlan make_plan(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  p.out = broadcast_shape(a, b);
  p.stride_a = broadcast_strides(a, p.out);
  p.stride_b = broadcast_strides(b, p.out);
  return p;
}

template <class T, class F>
void broadcast_apply(const T* a, const T* b, T* out, const BroadcastPlan& p, F f) {
  const size_t r = p.out.size();
  const int64_t inner = p.out[r - 1];
  const int64_t ia = p.stride_a[r - 1], ib = p.stride_b[r - 1];
  const int64_t outer = numel_of(p.out) / inner;
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t o = 0; o < outer; ++o) {
    T* dst = out + o * inner;
    for (int64_t j = 0; j < inner; ++j) dst[j] = f(a[oa + j * ia], b[ob + j * ib]);
    for (int64_t d = static_cast<int64_t>(r) - 2; d >= 0; --d) {
      const auto du = static_cast<size_t>(d);
      ++idx[du];
      oa += p.stride_a[du];
      ob += p.stride_b[du];
      if (idx[du] < p.out[du]) break;
      oa -= p.stride_a[du] * p.out[du];
      ob -= p.stride_b[du] * p.out[du];
      idx[du] = 0;
    }
  }
}

template <class F>
Tensor binary_kernel(const Tensor& a, const Tensor& b, const char* op, F f) {
  check_same_dtype(a, b, op);
  Tensor out;
  dispatch(a.dtype(), [&]<typename T>() {
    if (a.shape() == b.shape()) {
      out = make_tensor(a.shape(), a.dtype());
      auto pa = a.data<T>();
      auto pb = b.data<T>();
      auto po = out.mutable_data<T>();
      for (size_t i = 0; i < po.size(); ++i) po[i] = f(pa[i], pb[i]);
      return;
    }
    BroadcastPlan plan;
    try {
      plan = make_plan(a.shape(), b.shape());
    } catch (const Error&) {
      throw Error(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                  shape_str(b.shape()));
    }
    out = make_tensor(plan.out, a.dtype());
    broadcast_apply(a.data<T>().data(), b.data<T>().data(), out.mutable_data<T>().data(), plan,
                    f);
  });
  return out;
}

// Repeats x along broadcast axes until it has `shape`.
Tensor expand_to(const Tensor& x, const Shape& shape);

template <class Fwd, class Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd bwd_factor) {
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (size_t i = 0; i < po.size(); ++i) po[i] = fwd(px[i]);
  });
  record_op({x}, out, [x, out, bwd_factor](const Tensor& g) {
    Tensor gx = make_tensor(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      auto px = x.data<T>();
      auto py = out.data<T>();
      auto pg = g.data<T>();
      auto pr = gx.mutable_data<T>();
      for (size_t i = 0; i < pr.size(); ++i) pr[i] = pg[i] * bwd_factor(px[i], py[i]);
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    const int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw Error("shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = binary_kernel(a, b, "add", [](auto x, auto y) { return x + y; });
  record_op({a, b}, out, [a, b](const Tensor& g) {
    return std::vector<Tensor>{a.requires_grad() ? sum_to(g, a.shape()) : Tensor(),
                               b.requires_grad() ? sum_to(g, b.shape()) : Tensor()};
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = binary_kernel(a, b, "sub", [](auto x, auto y) { return x - y; });
  record_op({a, b}, out, [a, b](const Tensor& g) {
    return std::vector<Tensor>{a.requires_grad() ? sum_to(g, a.shape()) : Tensor(),
                               b.requires_grad() ? sum_to(neg(g), b.shape()) : Tensor()};
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out = binary_kernel(a, b, "mul", [](auto x, auto y) { return x * y; });
  record_op({a, b}, out, [a, b](const Tensor& g) {
    return std::vector<Tensor>{a.requires_grad() ? sum_to(mul(g, b), a.shape()) : Tensor(),
                               b.requires_grad() ? sum_to(mul(g, a), b.shape()) : Tensor()};
  });
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  Tensor out = binary_kernel(a, b, "div", [](auto x, auto y) { return x / y; });
  detail::check_finite(out, "div");
  record_op({a, b}, out, [a, b, out](const Tensor& g) {
    Tensor ga, gb;
    if (a.requires_grad()) ga = sum_to(div(g, b), a.shape());
    if (b.requires_grad()) gb = sum_to(neg(div(mul(g, out), b)), b.shape());
    return std::vector<Tensor>{ga, gb};
  });
  return out;
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double s) {
  return unary(
      x, [s](auto v) { return static_cast<decltype(v)>(v * s); },
      [s](auto, auto y) { return static_cast<decltype(y)>(s); });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      x, [s](auto v) { return static_cast<decltype(v)>(v + s); },
      [](auto, auto y) { return static_cast<decltype(y)>(1); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](auto v) { return v > 0 ? v : decltype(v)(0); },
      [](auto v, auto) { return v > 0 ? decltype(v)(1) : decltype(v)(0); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](auto v) {
        using T = decltype(v);
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](auto, auto y) { return y * (decltype(y)(1) - y); });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x,
      [](auto v) {
        using T = decltype(v);
        return T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
      },
      [](auto v, auto) {
        using T = decltype(v);
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
        const T pdf = std::exp(T(-0.5) * v * v) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
        return cdf + v * pdf;
      });
}

Tensor exp(const Tensor& x) {
  Tensor out = unary(
      x, [](auto v) { return std::exp(v); }, [](auto, auto y) { return y; });
  detail::check_finite(out, "exp");
  return out;
}

Tensor log(const Tensor& x) {
  dispatch(x.dtype(), [&]<typename T>() {
    for (T v : x.data<T>()) {
      if (!(v > 0)) throw Error("log: non-positive input " + std::to_string(v));
    }
  });
  return unary(
      x, [](auto v) { return std::log(v); }, [](auto v, auto) { return decltype(v)(1) / v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](auto v) { return std::abs(v); },
      [](auto v, auto) {
        using T = decltype(v);
        return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0));
      });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](auto v) { return v * v; }, [](auto v, auto) { return decltype(v)(2) * v; });
}

Tensor zeros_like(const Tensor& x) { return Tensor::zeros(x.shape(), x.dtype()); }

// ---------------------------------------------------------------- reductions

namespace {

Tensor sum_to_kernel(const Tensor& x, const Shape& shape) {
  const Shape& xs = x.shape();
  if (shape.size() > xs.size()) {
    throw Error("sum_to: target " + shape_str(shape) + " has higher rank than " + shape_str(xs));
  }
  const size_t off = xs.size() - shape.size();
  Shape aligned(xs.size(), 1);
  for (size_t i = 0; i < shape.size(); ++i) {
    aligned[off + i] = shape[i];
    if (shape[i] != xs[off + i] && shape[i] != 1) {
      throw Error("sum_to: cannot reduce " + shape_str(xs) + " to " + shape_str(shape));
    }
  }
  Tensor out = make_tensor(shape, x.dtype());
  const auto st = broadcast_strides(aligned, xs);
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    const size_t r = xs.size();
    const int64_t inner = xs[r - 1];
    const int64_t is = st[r - 1];
    const int64_t outer = x.numel() / inner;
    std::vector<int64_t> idx(r, 0);
    int64_t base = 0;
    for (int64_t o = 0; o < outer; ++o) {
      const T* src = px.data() + o * inner;
      for (int64_t j = 0; j < inner; ++j) po[static_cast<size_t>(base + j * is)] += src[j];
      for (int64_t d = static_cast<int64_t>(r) - 2; d >= 0; --d) {
        const auto du = static_cast<size_t>(d);
        ++idx[du];
        base += st[du];
        if (idx[du] < xs[du]) break;
        base -= st[du] * xs[du];
        idx[du] = 0;
      }
    }
  });
  return out;
}

Tensor expand_kernel(const Tensor& x, const Shape& shape) {
  Tensor out = make_tensor(shape, x.dtype());
  BroadcastPlan p;
  p.out = shape;
  p.stride_a = broadcast_strides(x.shape(), shape);
  p.stride_b = p.stride_a;
  dispatch(x.dtype(), [&]<typename T>() {
    const T* px = x.data<T>().data();
    broadcast_apply(px, px, out.mutable_data<T>().data(), p, [](T v, T) { return v; });
  });
  return out;
}

Tensor expand_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (broadcast_shape(x.shape(), shape) != shape) {
    throw Error("expand: cannot expand " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor out = expand_kernel(x, shape);
  record_op({x}, out, [x](const Tensor& g) { return std::vector<Tensor>{sum_to(g, x.shape())}; });
  return out;
}

}  // namespace

Tensor sum_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  Tensor out = sum_to_kernel(x, shape);
  record_op({x}, out, [x](const Tensor& g) { return std::vector<Tensor>{expand_to(g, x.shape())}; });
  return out;
}

Tensor sum(const Tensor& x) { return reshape(sum_to(x, Shape(x.dim(), 1)), {1}); }

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, const std::vector<int64_t>& axes, bool keepdim) {
  Shape kept = x.shape();
  std::vector<bool> reduced(kept.size(), false);
  for (int64_t a : axes) {
    const auto ax = static_cast<size_t>(normalize_axis(a, x.dim(), "sum"));
    kept[ax] = 1;
    reduced[ax] = true;
  }
  Tensor out = sum_to(x, kept);
  if (keepdim) return out;
  Shape squeezed;
  for (size_t i = 0; i < kept.size(); ++i) {
    if (!reduced[i]) squeezed.push_back(kept[i]);
  }
  if (squeezed.empty()) squeezed.push_back(1);
  return reshape(out, squeezed);
}

Tensor mean(const Tensor& x, const std::vector<int64_t>& axes, bool keepdim) {
  int64_t count = 1;
  for (int64_t a : axes) count *= x.size(normalize_axis(a, x.dim(), "mean"));
  return scale(sum(x, axes, keepdim), 1.0 / static_cast<double>(count));
}

Tensor max(const Tensor& x, int64_t axis, bool keepdim) {
  axis = normalize_axis(axis, x.dim(), "max");
  const auto geo = detail::axis_geometry(x.shape(), axis);
  Shape kept = x.shape();
  kept[static_cast<size_t>(axis)] = 1;
  Tensor out = make_tensor(kept, x.dtype());
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(geo.outer * geo.inner));
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (int64_t o = 0; o < geo.outer; ++o) {
      for (int64_t i = 0; i < geo.inner; ++i) {
        const T* base = px.data() + o * geo.len * geo.inner + i;
        int64_t best = 0;
        for (int64_t l = 1; l < geo.len; ++l) {
          if (base[l * geo.inner] > base[best * geo.inner]) best = l;
        }
        po[static_cast<size_t>(o * geo.inner + i)] = base[best * geo.inner];
        (*argmax)[static_cast<size_t>(o * geo.inner + i)] = best;
      }
    }
  });
  record_op({x}, out, [x, geo, argmax](const Tensor& g) {
    Tensor gx = make_tensor(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      auto pg = g.data<T>();
      auto pr = gx.mutable_data<T>();
      for (int64_t o = 0; o < geo.outer; ++o) {
        for (int64_t i = 0; i < geo.inner; ++i) {
          const auto k = static_cast<size_t>(o * geo.inner + i);
          pr[static_cast<size_t>((o * geo.len + (*argmax)[k]) * geo.inner + i)] += pg[k];
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
  if (keepdim) return out;
  Shape squeezed;
  for (int64_t i = 0; i < x.dim(); ++i) {
    if (i != axis) squeezed.push_back(x.size(i));
  }
  if (squeezed.empty()) squeezed.push_back(1);
  return reshape(out, squeezed);
}

// ---------------------------------------------------------------- shape ops

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel_of(shape) != x.numel()) {
    throw Error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  if (shape == x.shape()) return x;
  Tensor out = x.detach();
  out.impl()->shape = shape;
  record_op({x}, out, [x](const Tensor& g) { return std::vector<Tensor>{reshape(g, x.shape())}; });
  return out;
}

Tensor permute(const Tensor& x, const std::vector<int64_t>& perm) {
  const auto r = static_cast<size_t>(x.dim());
  if (perm.size() != r) {
    throw Error("permute: permutation of length " + std::to_string(perm.size()) +
                " for tensor " + shape_str(x.shape()));
  }
  std::vector<bool> seen(r, false);
  for (int64_t p : perm) {
    if (p < 0 || p >= static_cast<int64_t>(r) || seen[static_cast<size_t>(p)]) {
      throw Error("permute: invalid permutation for " + shape_str(x.shape()));
    }
    seen[static_cast<size_t>(p)] = true;
  }
  Shape out_shape(r);
  const auto in_strides = contiguous_strides(x.shape());
  std::vector<int64_t> src_strides(r);
  for (size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[static_cast<size_t>(perm[i])];
    src_strides[i] = in_strides[static_cast<size_t>(perm[i])];
  }
  Tensor out = make_tensor(out_shape, x.dtype());
  BroadcastPlan p;
  p.out = out_shape;
  p.stride_a = src_strides;
  p.stride_b = src_strides;
  dispatch(x.dtype(), [&]<typename T>() {
    const T* px = x.data<T>().data();
    broadcast_apply(px, px, out.mutable_data<T>().data(), p, [](T v, T) { return v; });
  });
  record_op({x}, out, [x, perm](const Tensor& g) {
    std::vector<int64_t> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
    return std::vector<Tensor>{permute(g, inv)};
  });
  return out;
}

Tensor transpose(const Tensor& x, int64_t a, int64_t b) {
  a = normalize_axis(a, x.dim(), "transpose");
  b = normalize_axis(b, x.dim(), "transpose");
  std::vector<int64_t> perm(static_cast<size_t>(x.dim()));
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int64_t>(i);
  std::swap(perm[static_cast<size_t>(a)], perm[static_cast<size_t>(b)]);
  return permute(x, perm);
}

Tensor concat(const std::vector<Tensor>& xs, int64_t axis) {
  if (xs.empty()) throw Error("concat: no inputs");
  const int64_t rank = xs[0].dim();
  if (axis < -rank || axis >= rank) {
    throw Error("concat: axis " + std::to_string(axis) + " out of range for rank " +
                std::to_string(rank));
  }
  axis = normalize_axis(axis, rank, "concat");
  Shape out_shape = xs[0].shape();
  out_shape[static_cast<size_t>(axis)] = 0;
  for (const auto& t : xs) {
    check_same_dtype(xs[0], t, "concat");
    bool ok = t.dim() == rank;
    for (int64_t d = 0; ok && d < rank; ++d) {
      if (d != axis && t.size(d) != xs[0].size(d)) ok = false;
    }
    if (!ok) {
      throw Error("concat: shape mismatch " + shape_str(xs[0].shape()) + " vs " +
                  shape_str(t.shape()) + " along axis " + std::to_string(axis));
    }
    out_shape[static_cast<size_t>(axis)] += t.size(axis);
  }
  Tensor out = make_tensor(out_shape, xs[0].dtype());
  const auto geo = detail::axis_geometry(out_shape, axis);
  dispatch(out.dtype(), [&]<typename T>() {
    auto po = out.mutable_data<T>();
    int64_t offset = 0;
    for (const auto& t : xs) {
      const int64_t chunk = t.size(axis) * geo.inner;
      auto pt = t.data<T>();
      for (int64_t o = 0; o < geo.outer; ++o) {
        std::copy_n(pt.data() + o * chunk, chunk, po.data() + o * geo.len * geo.inner + offset);
      }
      offset += chunk;
    }
  });
  record_op(xs, out, [xs, axis](const Tensor& g) {
    std::vector<Tensor> grads;
    int64_t start = 0;
    for (const auto& t : xs) {
      const int64_t len = t.size(axis);
      grads.push_back(t.requires_grad() ? slice(g, axis, start, start + len) : Tensor());
      start += len;
    }
    return grads;
  });
  return out;
}

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t end) {
  axis = normalize_axis(axis, x.dim(), "slice");
  const int64_t n = x.size(axis);
  if (start < 0 || end > n || start >= end) {
    throw Error("slice: range [" + std::to_string(start) + ", " + std::to_string(end) +
                ") invalid for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = end - start;
  Tensor out = make_tensor(out_shape, x.dtype());
  const auto geo = detail::axis_geometry(x.shape(), axis);
  const int64_t chunk = (end - start) * geo.inner;
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (int64_t o = 0; o < geo.outer; ++o) {
      std::copy_n(px.data() + (o * geo.len + start) * geo.inner, chunk, po.data() + o * chunk);
    }
  });
  record_op({x}, out, [x, axis, start, geo, chunk](const Tensor& g) {
    Tensor gx = make_tensor(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      auto pg = g.data<T>();
      auto pr = gx.mutable_data<T>();
      for (int64_t o = 0; o < geo.outer; ++o) {
        std::copy_n(pg.data() + o * chunk, chunk, pr.data() + (o * geo.len + start) * geo.inner);
      }
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

Tensor roll(const Tensor& x, int64_t axis, int64_t shift) {
  axis = normalize_axis(axis, x.dim(), "roll");
  const auto geo = detail::axis_geometry(x.shape(), axis);
  const int64_t s = ((shift % geo.len) + geo.len) % geo.len;
  if (s == 0) return x;
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (int64_t o = 0; o < geo.outer; ++o) {
      for (int64_t l = 0; l < geo.len; ++l) {
        const int64_t src = (l - s + geo.len) % geo.len;
        std::copy_n(px.data() + (o * geo.len + src) * geo.inner, geo.inner,
                    po.data() + (o * geo.len + l) * geo.inner);
      }
    }
  });
  record_op({x}, out, [axis, shift](const Tensor& g) {
    return std::vector<Tensor>{roll(g, axis, -shift)};
  });
  return out;
}

// ---------------------------------------------------------------- linear algebra

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct MatmulGeometry {
  int64_t batch, m, k, n;
  bool a_shared, b_shared;
  Shape out;
};

MatmulGeometry matmul_geometry(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2) {
    throw Error("matmul: operands must have rank >= 2, got " + shape_str(a) + " and " +
                shape_str(b));
  }
  MatmulGeometry g{};
  g.m = a[a.size() - 2];
  g.k = a[a.size() - 1];
  g.n = b[b.size() - 1];
  if (b[b.size() - 2] != g.k) {
    throw Error("matmul: inner dimension mismatch " + shape_str(a) + " x " + shape_str(b));
  }
  const Shape ba(a.begin(), a.end() - 2), bb(b.begin(), b.end() - 2);
  g.a_shared = ba.empty();
  g.b_shared = bb.empty();
  Shape batch_shape;
  if (ba == bb || g.b_shared) {
    batch_shape = ba;
  } else if (g.a_shared) {
    batch_shape = bb;
  } else {
    throw Error("matmul: batch shapes differ " + shape_str(a) + " x " + shape_str(b));
  }
  g.batch = numel_of(batch_shape);
  g.out = batch_shape;
  g.out.push_back(g.m);
  g.out.push_back(g.n);
  return g;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_same_dtype(a, b, "matmul");
  const auto geo = matmul_geometry(a.shape(), b.shape());
  Tensor out = make_tensor(geo.out, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    auto po = out.mutable_data<T>();
    for (int64_t i = 0; i < geo.batch; ++i) {
      Eigen::Map<const RowMat<T>> A(pa.data() + (geo.a_shared ? 0 : i * geo.m * geo.k), geo.m, geo.k);
      Eigen::Map<const RowMat<T>> B(pb.data() + (geo.b_shared ? 0 : i * geo.k * geo.n), geo.k, geo.n);
      Eigen::Map<RowMat<T>> C(po.data() + i * geo.m * geo.n, geo.m, geo.n);
      C.noalias() = A * B;
    }
  });
  record_op({a, b}, out, [a, b, geo](const Tensor& g) {
    Tensor ga, gb;
    if (a.requires_grad()) ga = make_tensor(a.shape(), a.dtype());
    if (b.requires_grad()) gb = make_tensor(b.shape(), b.dtype());
    dispatch(a.dtype(), [&]<typename T>() {
      auto pa = a.data<T>();
      auto pb = b.data<T>();
      auto pg = g.data<T>();
      for (int64_t i = 0; i < geo.batch; ++i) {
        Eigen::Map<const RowMat<T>> A(pa.data() + (geo.a_shared ? 0 : i * geo.m * geo.k), geo.m, geo.k);
        Eigen::Map<const RowMat<T>> B(pb.data() + (geo.b_shared ? 0 : i * geo.k * geo.n), geo.k, geo.n);
        Eigen::Map<const RowMat<T>> G(pg.data() + i * geo.m * geo.n, geo.m, geo.n);
        if (ga.defined()) {
          Eigen::Map<RowMat<T>> GA(ga.mutable_data<T>().data() + (geo.a_shared ? 0 : i * geo.m * geo.k),
                                   geo.m, geo.k);
          GA.noalias() += G * B.transpose();
        }
        if (gb.defined()) {
          Eigen::Map<RowMat<T>> GB(gb.mutable_data<T>().data() + (geo.b_shared ? 0 : i * geo.k * geo.n),
                                   geo.k, geo.n);
          GB.noalias() += A.transpose() * G;
        }
      }
    });
    return std::vector<Tensor>{ga, gb};
  });
  return out;
}

Tensor solve_spd(const Tensor& a, const Tensor& b) {
  check_same_dtype(a, b, "solve_spd");
  if (a.dim() < 2 || a.size(-1) != a.size(-2)) {
    throw Error("solve_spd: matrix must be square, got " + shape_str(a.shape()));
  }
  const auto geo = matmul_geometry(a.shape(), b.shape());
  if (geo.a_shared != geo.b_shared) {
    throw Error("solve_spd: batch shapes differ " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  }
  const int64_t k = geo.m, n = geo.n;
  Tensor out = make_tensor(b.shape(), b.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    auto po = out.mutable_data<T>();
    for (int64_t i = 0; i < geo.batch; ++i) {
      Eigen::Map<const RowMat<T>> A(pa.data() + i * k * k, k, k);
      Eigen::Map<const RowMat<T>> B(pb.data() + i * k * n, k, n);
      Eigen::Map<RowMat<T>> X(po.data() + i * k * n, k, n);
      Eigen::LLT<RowMat<T>> llt(A);
      if (llt.info() != Eigen::Success) throw Error("solve_spd: matrix is not positive definite");
      X = llt.solve(B);
    }
  });
  record_op({a, b}, out, [a, out](const Tensor& g) {
    // A symmetric: dB = A^{-1} G, dA = -dB X^T.
    Tensor gb = solve_spd(a, g);
    Tensor ga;
    if (a.requires_grad()) ga = neg(matmul(gb, transpose(out, -1, -2)));
    return std::vector<Tensor>{ga, gb};
  });
  return out;
}

Tensor softmax(const Tensor& x, int64_t axis) {
  axis = normalize_axis(axis, x.dim(), "softmax");
  const auto geo = detail::axis_geometry(x.shape(), axis);
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (int64_t o = 0; o < geo.outer; ++o) {
      for (int64_t i = 0; i < geo.inner; ++i) {
        const T* src = px.data() + o * geo.len * geo.inner + i;
        T* dst = po.data() + o * geo.len * geo.inner + i;
        T mx = src[0];
        for (int64_t l = 1; l < geo.len; ++l) mx = std::max(mx, src[l * geo.inner]);
        T total = 0;
        for (int64_t l = 0; l < geo.len; ++l) {
          dst[l * geo.inner] = std::exp(src[l * geo.inner] - mx);
          total += dst[l * geo.inner];
        }
        const T inv = T(1) / total;
        for (int64_t l = 0; l < geo.len; ++l) dst[l * geo.inner] *= inv;
      }
    }
  });
  record_op({x}, out, [out, geo](const Tensor& g) {
    Tensor gx = make_tensor(out.shape(), out.dtype());
    dispatch(out.dtype(), [&]<typename T>() {
      auto py = out.data<T>();
      auto pg = g.data<T>();
      auto pr = gx.mutable_data<T>();
      for (int64_t o = 0; o < geo.outer; ++o) {
        for (int64_t i = 0; i < geo.inner; ++i) {
          const int64_t base = o * geo.len * geo.inner + i;
          T dot = 0;
          for (int64_t l = 0; l < geo.len; ++l) {
            dot += pg[static_cast<size_t>(base + l * geo.inner)] * py[static_cast<size_t>(base + l * geo.inner)];
          }
          for (int64_t l = 0; l < geo.len; ++l) {
            const auto idx = static_cast<size_t>(base + l * geo.inner);
            pr[idx] = py[idx] * (pg[idx] - dot);
          }
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

}  // namespace rainforge
