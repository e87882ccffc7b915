#include "rainforge/window_transformer.hpp"

#include <cmath>

#include "rainforge/ops.hpp"

namespace rainforge {

Tensor window_partition(const Tensor& x, int64_t m) {
  if (x.dim() != 4) throw Error("window_partition: expected N x C x H x W, got " + shape_str(x.shape()));
  const int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  if (m < 1 || h % m != 0 || w % m != 0) {
    throw Error("window_partition: extents " + std::to_string(h) + "x" + std::to_string(w) +
                " are not multiples of window " + std::to_string(m));
  }
  Tensor t = reshape(x, {n, c, h / m, m, w / m, m});
  t = permute(t, {0, 2, 4, 3, 5, 1});
  return reshape(t, {n * (h / m) * (w / m), m * m, c});
}

Tensor window_merge(const Tensor& windows, int64_t n, int64_t h, int64_t w) {
  if (windows.dim() != 3) throw Error("window_merge: expected [B, T, C], got " + shape_str(windows.shape()));
  const auto m = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(windows.size(1)))));
  if (m * m != windows.size(1) || h % m != 0 || w % m != 0 || windows.size(0) != n * (h / m) * (w / m)) {
    throw Error("window_merge: " + shape_str(windows.shape()) + " does not tile " +
                std::to_string(n) + "x" + std::to_string(h) + "x" + std::to_string(w));
  }
  const int64_t c = windows.size(2);
  Tensor t = reshape(windows, {n, h / m, w / m, m, m, c});
  t = permute(t, {0, 5, 1, 3, 2, 4});
  return reshape(t, {n, c, h, w});
}

Tensor shifted_mask(int64_t h, int64_t w, int64_t m, int64_t shift, DType dt) {
  if (shift < 0 || shift >= m) throw Error("shifted_mask: shift must lie in [0, window)");
  if (h % m != 0 || w % m != 0) throw Error("shifted_mask: extents must be multiples of the window");
  const int64_t p = (h / m) * (w / m), t = m * m;
  Tensor mask = Tensor::zeros({p, t, t}, dt);
  if (shift == 0) return mask;

  // Label the shifted map in three bands per axis; only the last window row/column mixes bands.
  auto band = [&](int64_t i, int64_t n) -> int64_t {
    if (i < n - m) return 0;
    if (i < n - shift) return 1;
    return 2;
  };
  std::vector<int64_t> labels(static_cast<size_t>(p * t));
  for (int64_t wy = 0; wy < h / m; ++wy) {
    for (int64_t wx = 0; wx < w / m; ++wx) {
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < m; ++j) {
          const int64_t y = wy * m + i, x = wx * m + j;
          labels[static_cast<size_t>((wy * (w / m) + wx) * t + i * m + j)] = band(y, h) * 3 + band(x, w);
        }
      }
    }
  }
  dispatch(dt, [&]<typename T>() {
    auto pm = mask.mutable_data<T>();
    for (int64_t win = 0; win < p; ++win) {
      for (int64_t a = 0; a < t; ++a) {
        for (int64_t b = 0; b < t; ++b) {
          if (labels[static_cast<size_t>(win * t + a)] != labels[static_cast<size_t>(win * t + b)]) {
            pm[static_cast<size_t>((win * t + a) * t + b)] = static_cast<T>(kMaskedScore);
          }
        }
      }
    }
  });
  return mask;
}

// ---------------------------------------------------------------- WindowAttention

WindowAttention::WindowAttention(int64_t d, int64_t out_dim, int64_t h, int64_t m, Rng& rng, DType dt)
    : dim(d), heads(h), window(m) {
  if (h < 1 || d % h != 0) {
    throw Error("WindowAttention: dim " + std::to_string(d) + " not divisible by " + std::to_string(h) + " heads");
  }
  if (m < 1) throw Error("WindowAttention: window must be positive");
  proj_q = LinearLayer(d, d, rng, dt);
  proj_k = LinearLayer(d, d, rng, dt);
  proj_v = LinearLayer(d, d, rng, dt);
  proj_out = LinearLayer(d, out_dim, rng, dt);
}

Tensor WindowAttention::scores(const Tensor& xw, const Tensor& mask, Tensor* values) const {
  if (xw.dim() != 3 || xw.size(2) != dim) {
    throw Error("WindowAttention: expected [B, T, " + std::to_string(dim) + "], got " + shape_str(xw.shape()));
  }
  const int64_t b = xw.size(0), t = xw.size(1), hd = dim / heads;
  auto split = [&](const Tensor& y) { return permute(reshape(y, {b, t, heads, hd}), {0, 2, 1, 3}); };
  Tensor q = split(proj_q.forward_tokens(xw));
  Tensor k = split(proj_k.forward_tokens(xw));
  *values = split(proj_v.forward_tokens(xw));
  Tensor s = scale(matmul(q, transpose(k, -1, -2)), 1.0 / std::sqrt(static_cast<double>(hd)));
  if (mask.defined()) {
    if (mask.dim() != 3 || mask.size(1) != t || mask.size(2) != t || b % mask.size(0) != 0) {
      throw Error("WindowAttention: mask " + shape_str(mask.shape()) + " does not fit windows " +
                  shape_str(xw.shape()));
    }
    const int64_t p = mask.size(0);
    s = reshape(add(reshape(s, {b / p, p, heads, t, t}), reshape(mask, {1, p, 1, t, t})), {b, heads, t, t});
  }
  return s;
}

Tensor WindowAttention::attention_weights(const Tensor& xw, const Tensor& mask) const {
  Tensor v;
  return softmax(scores(xw, mask, &v), -1);
}

Tensor WindowAttention::forward(const Tensor& xw, const Tensor& mask) const {
  Tensor v;
  Tensor attn = softmax(scores(xw, mask, &v), -1);
  const int64_t b = xw.size(0), t = xw.size(1);
  Tensor merged = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {b, t, dim});
  return proj_out.forward_tokens(merged);
}

Tensor WindowAttention::forward_image(const Tensor& x, int64_t shift) const {
  const int64_t n = x.size(0), h = x.size(2), w = x.size(3);
  const int64_t ph = (window - h % window) % window, pw = (window - w % window) % window;
  Tensor y = reflection_pad(x, 0, ph, 0, pw);
  const int64_t hp = h + ph, wp = w + pw;
  Tensor mask;
  if (shift > 0) {
    y = roll(roll(y, 2, -shift), 3, -shift);
    mask = shifted_mask(hp, wp, window, shift, x.dtype());
  }
  Tensor out = window_merge(forward(window_partition(y, window), mask), n, hp, wp);
  if (shift > 0) out = roll(roll(out, 2, shift), 3, shift);
  return crop(out, 0, 0, h, w);
}

void WindowAttention::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  proj_q.collect_parameters(join_name(prefix, "q"), out);
  proj_k.collect_parameters(join_name(prefix, "k"), out);
  proj_v.collect_parameters(join_name(prefix, "v"), out);
  proj_out.collect_parameters(join_name(prefix, "out"), out);
}

// ---------------------------------------------------------------- DconvFfn

DconvFfn::DconvFfn(int64_t d, int64_t ratio, Rng& rng, DType dt, Activation act, bool lit)
    : activation(act), literal(lit) {
  if (ratio < 1) throw Error("DconvFfn: expansion ratio must be >= 1");
  norm = LayerNormLayer(d, dt);
  fc1 = LinearLayer(d, d * ratio, rng, dt);
  dwconv = DepthwiseConv2dLayer(d * ratio, rng, dt);
  fc2 = LinearLayer(d * ratio, d, rng, dt);
}

Tensor DconvFfn::forward(const Tensor& x) const {
  auto act = [&](const Tensor& t) { return literal ? t : activate(t, activation); };
  Tensor y = act(fc1.forward_channels(norm.forward(x, 1)));
  y = act(dwconv.forward(y));
  return add(x, fc2.forward_channels(y));
}

void DconvFfn::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  norm.collect_parameters(join_name(prefix, "norm"), out);
  fc1.collect_parameters(join_name(prefix, "fc1"), out);
  dwconv.collect_parameters(join_name(prefix, "dwconv"), out);
  fc2.collect_parameters(join_name(prefix, "fc2"), out);
}

// ---------------------------------------------------------------- DualTransformerBlock

DualTransformerBlock::DualTransformerBlock(int64_t d, int64_t heads, int64_t window, int64_t shift_,
                                           int64_t ffn_ratio, Rng& rng, DType dt, Activation act,
                                           bool ffn_literal)
    : dim(d), shift(shift_), activation(act) {
  if (d % 2 != 0) throw Error("DualTransformerBlock: channel count must be even, got " + std::to_string(d));
  if (shift < 0 || shift >= window) throw Error("DualTransformerBlock: shift must lie in [0, window)");
  norm = LayerNormLayer(d, dt);
  attention = WindowAttention(d, d / 2, heads, window, rng, dt);
  Conv2dOptions o;
  o.in_channels = d;
  o.out_channels = d;
  conv1 = Conv2dLayer(o, rng, dt);
  o.out_channels = d / 2;
  conv2 = Conv2dLayer(o, rng, dt);
  ffn = DconvFfn(d, ffn_ratio, rng, dt, act, ffn_literal);
}

Tensor DualTransformerBlock::dual(const Tensor& x) const {
  if (x.dim() != 4 || x.size(1) != dim) {
    throw Error("DualTransformerBlock: expected " + std::to_string(dim) + " channels, got " + shape_str(x.shape()));
  }
  Tensor y = norm.forward(x, 1);
  Tensor f_sa = attention.forward_image(y, shift);
  Tensor f_conv = conv2.forward(activate(conv1.forward(y), activation));
  return add(concat({f_sa, f_conv}, 1), x);
}

Tensor DualTransformerBlock::forward(const Tensor& x) const { return ffn.forward(dual(x)); }

void DualTransformerBlock::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  norm.collect_parameters(join_name(prefix, "norm"), out);
  attention.collect_parameters(join_name(prefix, "attn"), out);
  conv1.collect_parameters(join_name(prefix, "conv1"), out);
  conv2.collect_parameters(join_name(prefix, "conv2"), out);
  ffn.collect_parameters(join_name(prefix, "ffn"), out);
}

// ---------------------------------------------------------------- NLFFM

Tensor image_to_rows(const Tensor& x) {
  if (x.dim() != 4) throw Error("image_to_rows: expected N x C x H x W, got " + shape_str(x.shape()));
  return permute(reshape(x, {x.size(0), x.size(1), x.size(2) * x.size(3)}), {0, 2, 1});
}

Tensor rows_to_image(const Tensor& rows, int64_t h, int64_t w) {
  return reshape(permute(rows, {0, 2, 1}), {rows.size(0), rows.size(2), h, w});
}

namespace {

Tensor regularized_gram(const Tensor& v, double eps) {
  const int64_t k = v.size(2);
  Tensor eye = Tensor::zeros({k, k}, v.dtype());
  dispatch(v.dtype(), [&]<typename T>() {
    auto d = eye.mutable_data<T>();
    for (int64_t i = 0; i < k; ++i) d[static_cast<size_t>(i * k + i)] = static_cast<T>(eps);
  });
  return add(matmul(transpose(v, 1, 2), v), eye);
}

}  // namespace

Tensor subspace_project(const Tensor& v, const Tensor& m, double eps) {
  if (!(eps > 0)) throw Error("subspace_project: eps must be positive");
  Tensor coeff = solve_spd(regularized_gram(v, eps), matmul(transpose(v, 1, 2), m));
  return matmul(v, coeff);
}

Tensor subspace_projector(const Tensor& v, double eps) {
  if (!(eps > 0)) throw Error("subspace_projector: eps must be positive");
  return matmul(v, solve_spd(regularized_gram(v, eps), transpose(v, 1, 2)));
}

Nlffm::Nlffm(int64_t c, int64_t k, double eps_, Rng& rng, DType dt) : channels(c), rank(k), eps(eps_) {
  if (k < 1) throw Error("Nlffm: rank must be positive");
  if (!(eps > 0)) throw Error("Nlffm: eps must be positive");
  Conv2dOptions o;
  o.in_channels = 2 * c;
  o.out_channels = k;
  basis_conv = Conv2dLayer(o, rng, dt);
}

Tensor Nlffm::basis(const Tensor& x1, const Tensor& x2) const {
  if (x1.shape() != x2.shape()) {
    throw Error("Nlffm: feature shapes differ " + shape_str(x1.shape()) + " vs " + shape_str(x2.shape()));
  }
  if (x1.dim() != 4 || x1.size(1) != channels) {
    throw Error("Nlffm: expected " + std::to_string(channels) + " channels, got " + shape_str(x1.shape()));
  }
  if (rank > x1.size(2) * x1.size(3)) {
    throw Error("Nlffm: rank " + std::to_string(rank) + " exceeds H*W = " + std::to_string(x1.size(2) * x1.size(3)));
  }
  return image_to_rows(basis_conv.forward(concat({x1, x2}, 1)));
}

Tensor Nlffm::forward(const Tensor& x1, const Tensor& x2) const {
  Tensor v = basis(x1, x2);
  return rows_to_image(subspace_project(v, image_to_rows(x1), eps), x1.size(2), x1.size(3));
}

void Nlffm::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  basis_conv.collect_parameters(join_name(prefix, "basis"), out);
}

}  // namespace rainforge
