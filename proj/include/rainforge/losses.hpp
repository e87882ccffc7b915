#pragma once

#include <string>
#include <vector>

#include "rainforge/nn.hpp"

namespace rainforge {

inline constexpr double kPsnrCap = 100.0;
inline constexpr double kMseFloor = 1e-12;

/// 10 log10(max_val^2 / MSE), capped at 100 dB when MSE < 1e-12.
double psnr(const Tensor& x, const Tensor& y, double max_val = 1.0);

/// Mean local SSIM over an 11x11 Gaussian window (sigma 1.5), valid
/// positions only, averaged over every image and channel of N x C x H x W.
double ssim(const Tensor& x, const Tensor& y, double max_val = 1.0);

/// Differentiable -psnr(restored, clean). Returns the constant -100 (no
/// gradient) when the images agree to within the MSE floor.
Tensor psnr_loss(const Tensor& restored, const Tensor& clean, double max_val = 1.0);

/// Mean absolute difference; differentiable.
Tensor l1_distance(const Tensor& a, const Tensor& b);

/// Frozen conv stack G_1..G_n: each stage is 3x3 conv stride 2 then relu.
/// Input is the channel-stacked Haar subbands of an RGB image (12 channels).
class FeatureExtractor : public Module {
 public:
  FeatureExtractor() = default;
  explicit FeatureExtractor(uint64_t seed, DType dt = DType::f32, std::vector<int64_t> widths = {16, 32, 64},
                            int64_t in_channels = 12);

  /// One tensor per stage.
  std::vector<Tensor> features(const Tensor& x) const;
  size_t stages() const { return convs.size(); }

  /// Replaces the weights from a tensor table ("stage1.weight", "stage1.bias", ...).
  void load_weights(const std::string& path);
  void save_weights(const std::string& path) const;

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;

  std::vector<Conv2dLayer> convs;
};

struct LossConfig {
  double lambda = 0.1;
  std::vector<double> omega;  // empty: uniform 1/n
  double eps_cr = 1e-7;
  int n_bits = 8;

  void validate() const;
  std::vector<double> weights(size_t stages) const;
};

/// sum_i w_i * L1(G_i(clean), G_i(restored)) / (L1(G_i(rainy), G_i(restored)) + eps)
/// with G applied to the stacked Haar subbands. Only `restored` is differentiated.
Tensor contrastive_reg(const Tensor& restored, const Tensor& clean, const Tensor& rainy,
                       const FeatureExtractor& fx, const LossConfig& cfg);

/// -psnr(restored, clean) + lambda * contrastive_reg(...).
Tensor total_loss(const Tensor& restored, const Tensor& clean, const Tensor& rainy,
                  const FeatureExtractor& fx, const LossConfig& cfg);

}  // namespace rainforge
