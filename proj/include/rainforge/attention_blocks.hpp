#pragma once

#include <array>
#include <vector>

#include "rainforge/nn.hpp"

namespace rainforge {

/// Which branch receives the gate a = sigmoid(theta). The other two get (1 - a) / 2 each.
enum class GatedBranch { spatial, pixel };

struct BlendCoefficients {
  double pixel, spatial, channel;
};

BlendCoefficients blend_coefficients(double theta, GatedBranch gated = GatedBranch::spatial);

/// Residual block blending pixel, spatial and channel attention over a
/// conv-relu-conv body:
///   out = x + c_p * PA(body) + c_s * SA(body) + c_c * CA(body)
class MultiAttentionBlock : public Module {
 public:
  MultiAttentionBlock() = default;
  MultiAttentionBlock(int64_t channels, Rng& rng, DType dt, Activation act = Activation::relu,
                      GatedBranch gated = GatedBranch::spatial);

  Tensor forward(const Tensor& x) const;

  Tensor body(const Tensor& x) const;
  /// N x 1 x H x W map in (0, 1).
  Tensor pixel_map(const Tensor& b) const;
  /// N x 1 x H x W map in (0, 1) from channel mean and max.
  Tensor spatial_map(const Tensor& b) const;
  /// N x C x 1 x 1 per-channel scale in (0, 1).
  Tensor channel_scale(const Tensor& b) const;
  /// The gated sum of the three attended copies of `b` (no residual).
  Tensor blend(const Tensor& b) const;

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;

  int64_t channels = 0;
  Activation activation = Activation::relu;
  GatedBranch gated = GatedBranch::spatial;
  Conv2dLayer body1, body2;
  Conv2dLayer pixel1, pixel2;
  Conv2dLayer spatial;
  Conv2dLayer channel1, channel2;
  Tensor theta;  // [1]
};

struct SamOutput {
  Tensor restored;
  Tensor gated_features;
};

/// Supervised attention between the stages:
///   restored = conv_img(feat) + img
///   gated    = conv_feat(feat) * sigmoid(conv_mask(restored)) + feat
class SupervisedAttentionModule : public Module {
 public:
  SupervisedAttentionModule() = default;
  SupervisedAttentionModule(int64_t channels, Rng& rng, DType dt);

  SamOutput forward(const Tensor& feat, const Tensor& img) const;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;

  Conv2dLayer conv_img, conv_mask, conv_feat;
};

struct EncoderDecoderTrace {
  std::array<Tensor, 3> encoder;  // Xe1..Xe3
  std::array<Tensor, 3> decoder;  // Xd1..Xd3
};

/// Three-level U-shaped network of MultiAttentionBlocks. Level i runs at
/// (H / 2^i, W / 2^i) with C * 2^i channels; skips add encoder output i
/// into the decoder at the same level.
class EncoderDecoder : public Module {
 public:
  static constexpr int kLevels = 3;

  EncoderDecoder() = default;
  EncoderDecoder(int64_t channels, int blocks_per_level, Rng& rng, DType dt,
                 Activation act = Activation::relu, GatedBranch gated = GatedBranch::spatial);

  /// img N x 3 x H x W (H, W divisible by 4) -> N x C x H x W.
  Tensor forward(const Tensor& img, EncoderDecoderTrace* trace = nullptr) const;

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  /// Parameters on the decoder side (decoder blocks and upsampling convs).
  std::vector<NamedTensor> decoder_parameters() const;

  int64_t channels = 0;
  Conv2dLayer shallow;
  std::array<std::vector<MultiAttentionBlock>, kLevels> encoder, decoder;
  std::array<Resample, kLevels - 1> down, up;  // up[i] maps level i+1 -> level i
};

}  // namespace rainforge
