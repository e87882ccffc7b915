#pragma once

#include "rainforge/nn.hpp"

namespace rainforge {

/// Additive bias separating tokens that may not attend to each other.
inline constexpr double kMaskedScore = -1e9;

/// [N, C, H, W] -> [N * P, M * M, C] with P = (H / M) * (W / M). Windows are
/// ordered row-major per image; tokens row-major inside a window.
Tensor window_partition(const Tensor& x, int64_t window);
/// Exact inverse of window_partition.
Tensor window_merge(const Tensor& windows, int64_t n, int64_t h, int64_t w);

/// Per-window additive masks [P, M*M, M*M] for an H x W map that was
/// cyclically shifted by -shift on both axes. Tokens in the same window that
/// came from different regions of the unshifted map get kMaskedScore.
Tensor shifted_mask(int64_t h, int64_t w, int64_t window, int64_t shift, DType dt = DType::f32);

/// Multi-head self-attention inside windows: Q, K, V = x P_Q, x P_K, x P_V;
/// out = softmax(Q K^T / sqrt(d) + mask) V, heads concatenated and projected.
class WindowAttention : public Module {
 public:
  WindowAttention() = default;
  WindowAttention(int64_t dim, int64_t out_dim, int64_t heads, int64_t window, Rng& rng, DType dt);

  /// xw [B, T, D]; mask [P, T, T] with B a multiple of P, or undefined.
  Tensor forward(const Tensor& xw, const Tensor& mask = Tensor()) const;
  /// Softmax weights [B, heads, T, T].
  Tensor attention_weights(const Tensor& xw, const Tensor& mask = Tensor()) const;

  /// Full path on an image: reflection-pad to a multiple of the window,
  /// optional cyclic shift with masking, attention, un-shift and crop.
  Tensor forward_image(const Tensor& x, int64_t shift) const;

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;

  int64_t dim = 0, heads = 1, window = 1;
  LinearLayer proj_q, proj_k, proj_v, proj_out;

 private:
  Tensor scores(const Tensor& xw, const Tensor& mask, Tensor* values) const;
};

/// Feed-forward with a depthwise 3x3 conv between the two projections:
///   x + FC2(act(DWConv(act(FC1(LN(x))))))
/// `literal` drops both activations.
class DconvFfn : public Module {
 public:
  DconvFfn() = default;
  DconvFfn(int64_t dim, int64_t ratio, Rng& rng, DType dt, Activation act = Activation::relu,
           bool literal = false);

  Tensor forward(const Tensor& x) const;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  int64_t hidden() const { return fc1.weight.size(0); }

  Activation activation = Activation::relu;
  bool literal = false;
  LayerNormLayer norm;
  LinearLayer fc1, fc2;
  DepthwiseConv2dLayer dwconv;
};

/// Parallel window-attention and conv branches, each D/2 wide:
///   y = LN(x); F = concat(WMSA(y), conv(act(conv(y)))) + x; out = FFN(F)
class DualTransformerBlock : public Module {
 public:
  DualTransformerBlock() = default;
  DualTransformerBlock(int64_t dim, int64_t heads, int64_t window, int64_t shift, int64_t ffn_ratio,
                       Rng& rng, DType dt, Activation act = Activation::relu, bool ffn_literal = false);

  Tensor forward(const Tensor& x) const;
  /// Output before the feed-forward network.
  Tensor dual(const Tensor& x) const;

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;

  int64_t dim = 0, shift = 0;
  Activation activation = Activation::relu;
  LayerNormLayer norm;
  WindowAttention attention;
  Conv2dLayer conv1, conv2;
  DconvFfn ffn;
};

/// Projection of the low-level features x1 onto a k-dimensional spatial
/// subspace learned from [x1, x2]:
///   V = basis(concat(x1, x2)) as (H*W) x k,  out = V (V^T V + eps I)^{-1} V^T x1
class Nlffm : public Module {
 public:
  Nlffm() = default;
  Nlffm(int64_t channels, int64_t rank, double eps, Rng& rng, DType dt);

  Tensor forward(const Tensor& x1, const Tensor& x2) const;
  /// Basis matrix V [N, H*W, k].
  Tensor basis(const Tensor& x1, const Tensor& x2) const;

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;

  int64_t channels = 0, rank = 0;
  double eps = 1e-4;
  Conv2dLayer basis_conv;
};

/// V (V^T V + eps I)^{-1} V^T m for V [N, L, k], m [N, L, C].
Tensor subspace_project(const Tensor& v, const Tensor& m, double eps);
/// Explicit projector [N, L, L]; for tests and diagnostics.
Tensor subspace_projector(const Tensor& v, double eps);

/// [N, C, H, W] <-> [N, H*W, C]
Tensor image_to_rows(const Tensor& x);
Tensor rows_to_image(const Tensor& rows, int64_t h, int64_t w);

}  // namespace rainforge
