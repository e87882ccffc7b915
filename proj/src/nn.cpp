#include "rainforge/nn.hpp"

#include <Eigen/Core>
#include <cmath>
#include <memory>

#include "rainforge/detail/kernels.hpp"
#include "rainforge/ops.hpp"

namespace rainforge {

// ---------------------------------------------------------------- Module

std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

std::vector<NamedTensor> Module::named_parameters() const {
  std::vector<NamedTensor> out;
  collect_parameters("", out);
  return out;
}

std::vector<Tensor> Module::parameters() const {
  std::vector<Tensor> out;
  for (auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

int64_t Module::parameter_count() const {
  int64_t n = 0;
  for (auto& p : named_parameters()) n += p.tensor.numel();
  return n;
}

void Module::zero_grad() const {
  for (auto& p : named_parameters()) p.tensor.zero_grad();
}

// ---------------------------------------------------------------- conv2d

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  int64_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
  int64_t k() const { return c * kh * kw; }
  int64_t l() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  for (int64_t c = 0; c < g.c; ++c) {
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.l();
        for (int64_t oy = 0; oy < g.ho; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ki;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + iy) * g.w;
          for (int64_t ox = 0; ox < g.wo; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* x) {
  for (int64_t c = 0; c < g.c; ++c) {
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.l();
        for (int64_t oy = 0; oy < g.ho; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + oy * g.wo;
          T* dst = x + (c * g.h + iy) * g.w;
          for (int64_t ox = 0; ox < g.wo; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
  if (x.dim() != 4 || weight.dim() != 4) {
    throw Error("conv2d: expected 4-D input and weight, got " + shape_str(x.shape()) + " and " +
                shape_str(weight.shape()));
  }
  if (x.size(1) != weight.size(1)) {
    throw Error("conv2d: input has " + std::to_string(x.size(1)) + " channels, weight expects " +
                std::to_string(weight.size(1)));
  }
  if (x.dtype() != weight.dtype()) throw Error("conv2d: dtype mismatch");
  if (stride < 1 || pad < 0) throw Error("conv2d: invalid stride/padding");
  ConvGeometry g{x.size(0), x.size(1), x.size(2), x.size(3), weight.size(0), weight.size(2),
                 weight.size(3), stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  if (g.ho < 1 || g.wo < 1) {
    throw Error("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != g.o)) {
    throw Error("conv2d: bias shape " + shape_str(bias.shape()) + " for " + std::to_string(g.o) +
                " output channels");
  }

  Tensor out = make_tensor({g.n, g.o, g.ho, g.wo}, x.dtype());
  // im2col buffers are kept for the backward pass.
  auto cols = std::make_shared<Tensor>();
  if (!g.pointwise()) *cols = make_tensor({g.n, g.k(), g.l()}, x.dtype());

  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    Eigen::Map<const RowMat<T>> W(weight.data<T>().data(), g.o, g.k());
    for (int64_t b = 0; b < g.n; ++b) {
      const T* src = px.data() + b * g.c * g.h * g.w;
      if (!g.pointwise()) {
        T* cb = cols->mutable_data<T>().data() + b * g.k() * g.l();
        im2col(src, g, cb);
        src = cb;
      }
      Eigen::Map<const RowMat<T>> X(src, g.k(), g.l());
      Eigen::Map<RowMat<T>> Y(po.data() + b * g.o * g.l(), g.o, g.l());
      Y.noalias() = W * X;
      if (bias.defined()) {
        auto pb = bias.data<T>();
        for (int64_t o = 0; o < g.o; ++o) Y.row(o).array() += pb[static_cast<size_t>(o)];
      }
    }
  });

  record_op({x, weight, bias}, out, [x, weight, bias, g, cols](const Tensor& grad) {
    Tensor gx, gw, gb;
    if (x.requires_grad()) gx = make_tensor(x.shape(), x.dtype());
    if (weight.requires_grad()) gw = make_tensor(weight.shape(), weight.dtype());
    if (bias.defined() && bias.requires_grad()) gb = make_tensor(bias.shape(), bias.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      auto pg = grad.data<T>();
      Eigen::Map<const RowMat<T>> W(weight.data<T>().data(), g.o, g.k());
      RowMat<T> gcols;
      for (int64_t b = 0; b < g.n; ++b) {
        Eigen::Map<const RowMat<T>> G(pg.data() + b * g.o * g.l(), g.o, g.l());
        const T* src = g.pointwise() ? x.data<T>().data() + b * g.c * g.h * g.w
                                     : cols->data<T>().data() + b * g.k() * g.l();
        Eigen::Map<const RowMat<T>> X(src, g.k(), g.l());
        if (gw.defined()) {
          Eigen::Map<RowMat<T>> GW(gw.mutable_data<T>().data(), g.o, g.k());
          GW.noalias() += G * X.transpose();
        }
        if (gb.defined()) {
          auto pgb = gb.mutable_data<T>();
          for (int64_t o = 0; o < g.o; ++o) pgb[static_cast<size_t>(o)] += G.row(o).sum();
        }
        if (gx.defined()) {
          T* dst = gx.mutable_data<T>().data() + b * g.c * g.h * g.w;
          if (g.pointwise()) {
            Eigen::Map<RowMat<T>> GX(dst, g.c, g.l());
            GX.noalias() = W.transpose() * G;
          } else {
            gcols.noalias() = W.transpose() * G;
            col2im(gcols.data(), g, dst);
          }
        }
      }
    });
    return std::vector<Tensor>{gx, gw, gb};
  });
  return out;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.dim() != 4) throw Error("depthwise_conv2d: expected N x C x H x W, got " + shape_str(x.shape()));
  const int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  if (weight.shape() != Shape{c, 1, 3, 3}) {
    throw Error("depthwise_conv2d: weight " + shape_str(weight.shape()) + " does not match " +
                std::to_string(c) + " channels");
  }
  if (bias.defined() && bias.shape() != Shape{c}) {
    throw Error("depthwise_conv2d: bias shape " + shape_str(bias.shape()));
  }
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto pw = weight.data<T>();
    auto po = out.mutable_data<T>();
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* src = px.data() + (b * c + ch) * h * w;
        T* dst = po.data() + (b * c + ch) * h * w;
        const T* k = pw.data() + ch * 9;
        const T bv = bias.defined() ? bias.data<T>()[static_cast<size_t>(ch)] : T(0);
        for (int64_t y = 0; y < h; ++y) {
          for (int64_t xx = 0; xx < w; ++xx) {
            T acc = bv;
            for (int64_t i = 0; i < 3; ++i) {
              const int64_t iy = y + i - 1;
              if (iy < 0 || iy >= h) continue;
              for (int64_t j = 0; j < 3; ++j) {
                const int64_t ix = xx + j - 1;
                if (ix < 0 || ix >= w) continue;
                acc += k[i * 3 + j] * src[iy * w + ix];
              }
            }
            dst[y * w + xx] = acc;
          }
        }
      }
    }
  });
  record_op({x, weight, bias}, out, [x, weight, bias, n, c, h, w](const Tensor& grad) {
    Tensor gx, gw, gb;
    if (x.requires_grad()) gx = make_tensor(x.shape(), x.dtype());
    if (weight.requires_grad()) gw = make_tensor(weight.shape(), weight.dtype());
    if (bias.defined() && bias.requires_grad()) gb = make_tensor(bias.shape(), bias.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      auto px = x.data<T>();
      auto pw = weight.data<T>();
      auto pg = grad.data<T>();
      for (int64_t b = 0; b < n; ++b) {
        for (int64_t ch = 0; ch < c; ++ch) {
          const T* src = px.data() + (b * c + ch) * h * w;
          const T* gsrc = pg.data() + (b * c + ch) * h * w;
          const T* k = pw.data() + ch * 9;
          for (int64_t y = 0; y < h; ++y) {
            for (int64_t xx = 0; xx < w; ++xx) {
              const T gv = gsrc[y * w + xx];
              if (gb.defined()) gb.mutable_data<T>()[static_cast<size_t>(ch)] += gv;
              for (int64_t i = 0; i < 3; ++i) {
                const int64_t iy = y + i - 1;
                if (iy < 0 || iy >= h) continue;
                for (int64_t j = 0; j < 3; ++j) {
                  const int64_t ix = xx + j - 1;
                  if (ix < 0 || ix >= w) continue;
                  if (gw.defined()) gw.mutable_data<T>()[static_cast<size_t>(ch * 9 + i * 3 + j)] += gv * src[iy * w + ix];
                  if (gx.defined()) gx.mutable_data<T>()[static_cast<size_t>((b * c + ch) * h * w + iy * w + ix)] += gv * k[i * 3 + j];
                }
              }
            }
          }
        }
      }
    });
    return std::vector<Tensor>{gx, gw, gb};
  });
  return out;
}

// ---------------------------------------------------------------- layer norm

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, int64_t axis) {
  if (!(eps > 0)) throw Error("layer_norm: epsilon must be positive");
  axis = detail::normalize_axis(axis, x.dim(), "layer_norm");
  const auto geo = detail::axis_geometry(x.shape(), axis);
  if (gamma.shape() != Shape{geo.len} || beta.shape() != Shape{geo.len}) {
    throw Error("layer_norm: gamma/beta " + shape_str(gamma.shape()) + " do not match axis extent " +
                std::to_string(geo.len) + " of " + shape_str(x.shape()));
  }
  Tensor out = make_tensor(x.shape(), x.dtype());
  // Normalized values and inverse std per position, kept for backward.
  auto xhat = std::make_shared<Tensor>(make_tensor(x.shape(), x.dtype()));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(geo.outer * geo.inner));
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto pgm = gamma.data<T>();
    auto pbt = beta.data<T>();
    auto po = out.mutable_data<T>();
    auto ph = xhat->mutable_data<T>();
    for (int64_t o = 0; o < geo.outer; ++o) {
      for (int64_t i = 0; i < geo.inner; ++i) {
        const int64_t base = o * geo.len * geo.inner + i;
        T mu = 0;
        for (int64_t l = 0; l < geo.len; ++l) mu += px[static_cast<size_t>(base + l * geo.inner)];
        mu /= static_cast<T>(geo.len);
        T var = 0;
        for (int64_t l = 0; l < geo.len; ++l) {
          const T d = px[static_cast<size_t>(base + l * geo.inner)] - mu;
          var += d * d;
        }
        var /= static_cast<T>(geo.len);
        const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
        (*inv_std)[static_cast<size_t>(o * geo.inner + i)] = is;
        for (int64_t l = 0; l < geo.len; ++l) {
          const auto idx = static_cast<size_t>(base + l * geo.inner);
          ph[idx] = (px[idx] - mu) * is;
          po[idx] = pgm[static_cast<size_t>(l)] * ph[idx] + pbt[static_cast<size_t>(l)];
        }
      }
    }
  });
  record_op({x, gamma, beta}, out, [x, gamma, beta, geo, xhat, inv_std](const Tensor& grad) {
    Tensor gx, gg, gbt;
    if (x.requires_grad()) gx = make_tensor(x.shape(), x.dtype());
    if (gamma.requires_grad()) gg = make_tensor(gamma.shape(), gamma.dtype());
    if (beta.requires_grad()) gbt = make_tensor(beta.shape(), beta.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      auto pg = grad.data<T>();
      auto ph = xhat->data<T>();
      auto pgm = gamma.data<T>();
      const T inv_len = T(1) / static_cast<T>(geo.len);
      for (int64_t o = 0; o < geo.outer; ++o) {
        for (int64_t i = 0; i < geo.inner; ++i) {
          const int64_t base = o * geo.len * geo.inner + i;
          T mean_dh = 0, mean_dh_h = 0;
          for (int64_t l = 0; l < geo.len; ++l) {
            const auto idx = static_cast<size_t>(base + l * geo.inner);
            const T dh = pg[idx] * pgm[static_cast<size_t>(l)];
            mean_dh += dh;
            mean_dh_h += dh * ph[idx];
            if (gg.defined()) gg.mutable_data<T>()[static_cast<size_t>(l)] += pg[idx] * ph[idx];
            if (gbt.defined()) gbt.mutable_data<T>()[static_cast<size_t>(l)] += pg[idx];
          }
          if (!gx.defined()) continue;
          mean_dh *= inv_len;
          mean_dh_h *= inv_len;
          const T is = static_cast<T>((*inv_std)[static_cast<size_t>(o * geo.inner + i)]);
          auto pr = gx.mutable_data<T>();
          for (int64_t l = 0; l < geo.len; ++l) {
            const auto idx = static_cast<size_t>(base + l * geo.inner);
            const T dh = pg[idx] * pgm[static_cast<size_t>(l)];
            pr[idx] = is * (dh - mean_dh - ph[idx] * mean_dh_h);
          }
        }
      }
    });
    return std::vector<Tensor>{gx, gg, gbt};
  });
  return out;
}

// ---------------------------------------------------------------- padding / resampling

namespace {

int64_t reflect_index(int64_t i, int64_t n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

void check_spatial(const Tensor& x, const char* op) {
  if (x.dim() < 2) throw Error(std::string(op) + ": need at least 2 axes, got " + shape_str(x.shape()));
}

}  // namespace

Tensor reflection_pad(const Tensor& x, int64_t top, int64_t bottom, int64_t left, int64_t right) {
  check_spatial(x, "reflection_pad");
  const int64_t h = x.size(-2), w = x.size(-1);
  if (top < 0 || bottom < 0 || left < 0 || right < 0) throw Error("reflection_pad: negative pad");
  if (std::max(top, bottom) >= h || std::max(left, right) >= w) {
    throw Error("reflection_pad: pad (" + std::to_string(top) + "," + std::to_string(bottom) + "," +
                std::to_string(left) + "," + std::to_string(right) + ") too large for extent " +
                std::to_string(h) + "x" + std::to_string(w));
  }
  if (top == 0 && bottom == 0 && left == 0 && right == 0) return x;
  const int64_t ho = h + top + bottom, wo = w + left + right;
  const int64_t planes = x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = ho;
  out_shape[out_shape.size() - 1] = wo;
  Tensor out = make_tensor(out_shape, x.dtype());
  auto for_each = [=](auto&& fn) {
    for (int64_t p = 0; p < planes; ++p) {
      for (int64_t y = 0; y < ho; ++y) {
        const int64_t sy = reflect_index(y - top, h);
        for (int64_t xx = 0; xx < wo; ++xx) {
          fn((p * h + sy) * w + reflect_index(xx - left, w), (p * ho + y) * wo + xx);
        }
      }
    }
  };
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for_each([&](int64_t src, int64_t dst) { po[static_cast<size_t>(dst)] = px[static_cast<size_t>(src)]; });
  });
  record_op({x}, out, [x, for_each](const Tensor& g) {
    Tensor gx = make_tensor(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      auto pg = g.data<T>();
      auto pr = gx.mutable_data<T>();
      for_each([&](int64_t src, int64_t dst) { pr[static_cast<size_t>(src)] += pg[static_cast<size_t>(dst)]; });
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

Tensor reflection_pad(const Tensor& x, int64_t pad) { return reflection_pad(x, pad, pad, pad, pad); }

Tensor crop(const Tensor& x, int64_t top, int64_t left, int64_t h, int64_t w) {
  check_spatial(x, "crop");
  Tensor y = x;
  if (top != 0 || h != x.size(-2)) y = slice(y, -2, top, top + h);
  if (left != 0 || w != x.size(-1)) y = slice(y, -1, left, left + w);
  return y;
}

Tensor upsample_nearest2x(const Tensor& x) {
  check_spatial(x, "upsample_nearest2x");
  const int64_t h = x.size(-2), w = x.size(-1);
  const int64_t planes = x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = 2 * h;
  out_shape[out_shape.size() - 1] = 2 * w;
  Tensor out = make_tensor(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (int64_t p = 0; p < planes; ++p) {
      for (int64_t y = 0; y < 2 * h; ++y) {
        for (int64_t xx = 0; xx < 2 * w; ++xx) {
          po[static_cast<size_t>((p * 2 * h + y) * 2 * w + xx)] =
              px[static_cast<size_t>((p * h + y / 2) * w + xx / 2)];
        }
      }
    }
  });
  record_op({x}, out, [x, planes, h, w](const Tensor& g) {
    Tensor gx = make_tensor(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      auto pg = g.data<T>();
      auto pr = gx.mutable_data<T>();
      for (int64_t p = 0; p < planes; ++p) {
        for (int64_t y = 0; y < 2 * h; ++y) {
          for (int64_t xx = 0; xx < 2 * w; ++xx) {
            pr[static_cast<size_t>((p * h + y / 2) * w + xx / 2)] +=
                pg[static_cast<size_t>((p * 2 * h + y) * 2 * w + xx)];
          }
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

Tensor activate(const Tensor& x, Activation act) {
  return act == Activation::gelu ? gelu(x) : relu(x);
}

// ---------------------------------------------------------------- layers

Conv2dLayer::Conv2dLayer(const Conv2dOptions& opts, Rng& rng, DType dt) : options(opts) {
  if (opts.kernel % 2 == 0) throw Error("Conv2dLayer: kernel size must be odd");
  if (options.pad < 0) options.pad = opts.kernel / 2;
  const double fan_in = static_cast<double>(opts.in_channels * opts.kernel * opts.kernel);
  weight = rng.normal_tensor({opts.out_channels, opts.in_channels, opts.kernel, opts.kernel},
                             std::sqrt(2.0 / fan_in), dt);
  weight.set_requires_grad(true);
  if (opts.bias) {
    bias = Tensor::zeros({opts.out_channels}, dt);
    bias.set_requires_grad(true);
  }
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  if (options.mode == PadMode::reflect && options.pad > 0) {
    return conv2d(reflection_pad(x, options.pad), weight, bias, options.stride, 0);
  }
  return conv2d(x, weight, bias, options.stride, static_cast<int>(options.pad));
}

void Conv2dLayer::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({join_name(prefix, "weight"), weight});
  if (bias.defined()) out.push_back({join_name(prefix, "bias"), bias});
}

void Conv2dLayer::zero_init() {
  dispatch(weight.dtype(), [&]<typename T>() {
    for (auto& v : weight.mutable_data<T>()) v = 0;
    if (bias.defined()) {
      for (auto& v : bias.mutable_data<T>()) v = 0;
    }
  });
}

DepthwiseConv2dLayer::DepthwiseConv2dLayer(int64_t channels, Rng& rng, DType dt) {
  weight = rng.normal_tensor({channels, 1, 3, 3}, std::sqrt(2.0 / 9.0), dt);
  weight.set_requires_grad(true);
  bias = Tensor::zeros({channels}, dt);
  bias.set_requires_grad(true);
}

Tensor DepthwiseConv2dLayer::forward(const Tensor& x) const { return depthwise_conv2d(x, weight, bias); }

void DepthwiseConv2dLayer::collect_parameters(const std::string& prefix,
                                              std::vector<NamedTensor>& out) const {
  out.push_back({join_name(prefix, "weight"), weight});
  out.push_back({join_name(prefix, "bias"), bias});
}

LinearLayer::LinearLayer(int64_t in_features, int64_t out_features, Rng& rng, DType dt) {
  weight = rng.normal_tensor({out_features, in_features}, std::sqrt(2.0 / static_cast<double>(in_features)), dt);
  weight.set_requires_grad(true);
  bias = Tensor::zeros({out_features}, dt);
  bias.set_requires_grad(true);
}

Tensor LinearLayer::forward_tokens(const Tensor& x) const {
  if (x.size(-1) != weight.size(1)) {
    throw Error("LinearLayer: input features " + std::to_string(x.size(-1)) + " != " +
                std::to_string(weight.size(1)));
  }
  return add(matmul(x, transpose(weight, 0, 1)), bias);
}

Tensor LinearLayer::forward_channels(const Tensor& x) const {
  if (x.dim() != 4 || x.size(1) != weight.size(1)) {
    throw Error("LinearLayer: expected N x " + std::to_string(weight.size(1)) + " x H x W, got " +
                shape_str(x.shape()));
  }
  return conv2d(x, reshape(weight, {weight.size(0), weight.size(1), 1, 1}), bias, 1, 0);
}

void LinearLayer::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({join_name(prefix, "weight"), weight});
  out.push_back({join_name(prefix, "bias"), bias});
}

void LinearLayer::zero_init() {
  dispatch(weight.dtype(), [&]<typename T>() {
    for (auto& v : weight.mutable_data<T>()) v = 0;
    for (auto& v : bias.mutable_data<T>()) v = 0;
  });
}

LayerNormLayer::LayerNormLayer(int64_t features, DType dt, double eps_) : eps(eps_) {
  if (!(eps > 0)) throw Error("LayerNormLayer: epsilon must be positive");
  gamma = Tensor::ones({features}, dt);
  gamma.set_requires_grad(true);
  beta = Tensor::zeros({features}, dt);
  beta.set_requires_grad(true);
}

Tensor LayerNormLayer::forward(const Tensor& x, int64_t axis) const {
  return layer_norm(x, gamma, beta, eps, axis);
}

void LayerNormLayer::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({join_name(prefix, "gamma"), gamma});
  out.push_back({join_name(prefix, "beta"), beta});
}

Resample::Resample(int64_t channels, ResampleDirection dir, Rng& rng, DType dt) : direction(dir) {
  Conv2dOptions o;
  o.in_channels = channels;
  if (dir == ResampleDirection::down) {
    o.out_channels = 2 * channels;
    o.stride = 2;
  } else {
    if (channels % 2 != 0) throw Error("Resample(up): channel count must be even");
    o.out_channels = channels / 2;
  }
  conv = Conv2dLayer(o, rng, dt);
}

Tensor Resample::forward(const Tensor& x) const {
  if (direction == ResampleDirection::down) {
    if (x.size(-1) % 2 != 0 || x.size(-2) % 2 != 0) {
      throw Error("resample(down): extents must be even, got " + shape_str(x.shape()));
    }
    return conv.forward(x);
  }
  return conv.forward(upsample_nearest2x(x));
}

void Resample::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  conv.collect_parameters(join_name(prefix, "conv"), out);
}

}  // namespace rainforge
