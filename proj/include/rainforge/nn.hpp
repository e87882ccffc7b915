#pragma once

#include <string>
#include <vector>

#include "rainforge/tensor.hpp"

namespace rainforge {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Base for anything owning trainable parameters. Parameter tensors are
/// shared handles, so updating one through `named_parameters()` updates the
/// owning layer.
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const = 0;

  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  int64_t parameter_count() const;
  void zero_grad() const;
};

std::string join_name(const std::string& prefix, const std::string& name);

// ---------------------------------------------------------------- functional ops

/// Cross-correlation of x [N,C,H,W] with w [O,C,kh,kw], zero padding `pad`.
/// `bias` may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);

/// Per-channel 3x3 filter, zero padding 1, stride 1. weight [C,1,3,3].
Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Normalizes over `axis` to zero mean / unit variance, then gamma * x + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, int64_t axis);

/// Mirror padding of the last two axes, edge sample not repeated.
Tensor reflection_pad(const Tensor& x, int64_t top, int64_t bottom, int64_t left, int64_t right);
Tensor reflection_pad(const Tensor& x, int64_t pad);

/// Crops the last two axes to [top, top+h) x [left, left+w).
Tensor crop(const Tensor& x, int64_t top, int64_t left, int64_t h, int64_t w);

Tensor upsample_nearest2x(const Tensor& x);

enum class Activation { relu, gelu };
Tensor activate(const Tensor& x, Activation act);

// ---------------------------------------------------------------- layers

enum class PadMode { zero, reflect };

/// Kaiming-style initialization: weights ~ Normal(0, 2 / fan_in), zero bias.
struct Conv2dOptions {
  int64_t in_channels = 1;
  int64_t out_channels = 1;
  int64_t kernel = 3;
  int stride = 1;
  int64_t pad = -1;  // -1: kernel / 2
  PadMode mode = PadMode::zero;
  bool bias = true;
};

class Conv2dLayer : public Module {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(const Conv2dOptions& opts, Rng& rng, DType dt);

  Tensor forward(const Tensor& x) const;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  /// Sets weight and bias to zero.
  void zero_init();

  Tensor weight, bias;
  Conv2dOptions options;
};

class DepthwiseConv2dLayer : public Module {
 public:
  DepthwiseConv2dLayer() = default;
  DepthwiseConv2dLayer(int64_t channels, Rng& rng, DType dt);

  Tensor forward(const Tensor& x) const;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;

  Tensor weight, bias;
};

/// Fully-connected map over the feature axis: the last axis of token
/// tensors, or axis 1 of N x C x H x W images.
class LinearLayer : public Module {
 public:
  LinearLayer() = default;
  LinearLayer(int64_t in_features, int64_t out_features, Rng& rng, DType dt);

  Tensor forward_tokens(const Tensor& x) const;
  Tensor forward_channels(const Tensor& x) const;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  void zero_init();

  Tensor weight, bias;
};

class LayerNormLayer : public Module {
 public:
  LayerNormLayer() = default;
  LayerNormLayer(int64_t features, DType dt, double eps = 1e-5);

  Tensor forward(const Tensor& x, int64_t axis) const;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;

  Tensor gamma, beta;
  double eps = 1e-5;
};

enum class ResampleDirection { down, up };

/// down: stride-2 3x3 conv, C -> 2C. up: nearest 2x then 3x3 conv, C -> C/2.
class Resample : public Module {
 public:
  Resample() = default;
  Resample(int64_t channels, ResampleDirection dir, Rng& rng, DType dt);

  Tensor forward(const Tensor& x) const;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;

  ResampleDirection direction = ResampleDirection::down;
  Conv2dLayer conv;
};

}  // namespace rainforge
