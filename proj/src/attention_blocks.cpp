#include "rainforge/attention_blocks.hpp"

#include <cmath>

#include "rainforge/ops.hpp"

namespace rainforge {

namespace {

constexpr int64_t kReduction = 4;

Conv2dLayer make_conv(int64_t in, int64_t out, int64_t kernel, Rng& rng, DType dt, int stride = 1) {
  Conv2dOptions o;
  o.in_channels = in;
  o.out_channels = out;
  o.kernel = kernel;
  o.stride = stride;
  return Conv2dLayer(o, rng, dt);
}

}  // namespace

BlendCoefficients blend_coefficients(double theta, GatedBranch gated) {
  const double a = 1.0 / (1.0 + std::exp(-theta));
  const double rest = (1.0 - a) / 2.0;
  if (gated == GatedBranch::pixel) return {a, rest, rest};
  return {rest, a, rest};
}

// ---------------------------------------------------------------- MAB

MultiAttentionBlock::MultiAttentionBlock(int64_t c, Rng& rng, DType dt, Activation act, GatedBranch g)
    : channels(c), activation(act), gated(g) {
  const int64_t hidden = std::max<int64_t>(1, c / kReduction);
  body1 = make_conv(c, c, 3, rng, dt);
  body2 = make_conv(c, c, 3, rng, dt);
  pixel1 = make_conv(c, hidden, 1, rng, dt);
  pixel2 = make_conv(hidden, 1, 1, rng, dt);
  spatial = make_conv(2, 1, 3, rng, dt);
  channel1 = make_conv(c, hidden, 1, rng, dt);
  channel2 = make_conv(hidden, c, 1, rng, dt);
  theta = Tensor::zeros({1}, dt);
  theta.set_requires_grad(true);
}

Tensor MultiAttentionBlock::body(const Tensor& x) const {
  if (x.dim() != 4 || x.size(1) != channels) {
    throw Error("MultiAttentionBlock: expected " + std::to_string(channels) + " channels, got " +
                shape_str(x.shape()));
  }
  return body2.forward(activate(body1.forward(x), activation));
}

Tensor MultiAttentionBlock::pixel_map(const Tensor& b) const {
  return sigmoid(pixel2.forward(relu(pixel1.forward(b))));
}

Tensor MultiAttentionBlock::spatial_map(const Tensor& b) const {
  Tensor pooled = concat({mean(b, {1}, true), max(b, 1, true)}, 1);
  return sigmoid(spatial.forward(pooled));
}

Tensor MultiAttentionBlock::channel_scale(const Tensor& b) const {
  Tensor pooled = mean(b, {2, 3}, true);
  return sigmoid(channel2.forward(relu(channel1.forward(pooled))));
}

Tensor MultiAttentionBlock::blend(const Tensor& b) const {
  Tensor a = sigmoid(theta);
  Tensor rest = scale(add_scalar(neg(a), 1.0), 0.5);
  Tensor pa = mul(b, pixel_map(b));
  Tensor sa = mul(b, spatial_map(b));
  Tensor ca = mul(b, channel_scale(b));
  const Tensor& cp = gated == GatedBranch::pixel ? a : rest;
  const Tensor& cs = gated == GatedBranch::pixel ? rest : a;
  return add(add(mul(pa, cp), mul(sa, cs)), mul(ca, rest));
}

Tensor MultiAttentionBlock::forward(const Tensor& x) const { return add(x, blend(body(x))); }

void MultiAttentionBlock::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  body1.collect_parameters(join_name(prefix, "body1"), out);
  body2.collect_parameters(join_name(prefix, "body2"), out);
  pixel1.collect_parameters(join_name(prefix, "pixel1"), out);
  pixel2.collect_parameters(join_name(prefix, "pixel2"), out);
  spatial.collect_parameters(join_name(prefix, "spatial"), out);
  channel1.collect_parameters(join_name(prefix, "channel1"), out);
  channel2.collect_parameters(join_name(prefix, "channel2"), out);
  out.push_back({join_name(prefix, "theta"), theta});
}

// ---------------------------------------------------------------- SAM

SupervisedAttentionModule::SupervisedAttentionModule(int64_t c, Rng& rng, DType dt) {
  conv_img = make_conv(c, 3, 3, rng, dt);
  conv_img.zero_init();
  conv_mask = make_conv(3, c, 3, rng, dt);
  conv_feat = make_conv(c, c, 3, rng, dt);
}

SamOutput SupervisedAttentionModule::forward(const Tensor& feat, const Tensor& img) const {
  if (feat.dim() != 4 || img.dim() != 4 || feat.size(2) != img.size(2) || feat.size(3) != img.size(3)) {
    throw Error("SupervisedAttentionModule: features " + shape_str(feat.shape()) +
                " and image " + shape_str(img.shape()) + " differ spatially");
  }
  SamOutput out;
  out.restored = add(conv_img.forward(feat), img);
  Tensor mask = sigmoid(conv_mask.forward(out.restored));
  out.gated_features = add(mul(conv_feat.forward(feat), mask), feat);
  return out;
}

void SupervisedAttentionModule::collect_parameters(const std::string& prefix,
                                                   std::vector<NamedTensor>& out) const {
  conv_img.collect_parameters(join_name(prefix, "conv_img"), out);
  conv_mask.collect_parameters(join_name(prefix, "conv_mask"), out);
  conv_feat.collect_parameters(join_name(prefix, "conv_feat"), out);
}

// ---------------------------------------------------------------- encoder-decoder

EncoderDecoder::EncoderDecoder(int64_t c, int blocks_per_level, Rng& rng, DType dt, Activation act,
                               GatedBranch gated)
    : channels(c) {
  if (blocks_per_level < 1) throw Error("EncoderDecoder: need at least one block per level");
  shallow = make_conv(3, c, 3, rng, dt);
  for (int level = 0; level < kLevels; ++level) {
    const int64_t lc = c << level;
    for (int i = 0; i < blocks_per_level; ++i) {
      encoder[static_cast<size_t>(level)].emplace_back(lc, rng, dt, act, gated);
    }
    if (level + 1 < kLevels) down[static_cast<size_t>(level)] = Resample(lc, ResampleDirection::down, rng, dt);
  }
  for (int level = kLevels - 1; level >= 0; --level) {
    const int64_t lc = c << level;
    for (int i = 0; i < blocks_per_level; ++i) {
      decoder[static_cast<size_t>(level)].emplace_back(lc, rng, dt, act, gated);
    }
    if (level > 0) up[static_cast<size_t>(level - 1)] = Resample(lc, ResampleDirection::up, rng, dt);
  }
}

Tensor EncoderDecoder::forward(const Tensor& img, EncoderDecoderTrace* trace) const {
  if (img.dim() != 4 || img.size(1) != 3) {
    throw Error("EncoderDecoder: expected N x 3 x H x W, got " + shape_str(img.shape()));
  }
  if (img.size(2) % 4 != 0 || img.size(3) % 4 != 0) {
    throw Error("EncoderDecoder: H and W must be divisible by 4, got " + shape_str(img.shape()) +
                "; pad the input first");
  }
  auto run = [](const std::vector<MultiAttentionBlock>& blocks, Tensor x) {
    for (const auto& b : blocks) x = b.forward(x);
    return x;
  };
  std::array<Tensor, kLevels> enc;
  Tensor x = shallow.forward(img);
  for (int level = 0; level < kLevels; ++level) {
    const auto l = static_cast<size_t>(level);
    if (level > 0) x = down[l - 1].forward(x);
    enc[l] = run(encoder[l], x);
    x = enc[l];
  }
  std::array<Tensor, kLevels> dec;
  for (int level = kLevels - 1; level >= 0; --level) {
    const auto l = static_cast<size_t>(level);
    Tensor in = level == kLevels - 1 ? enc[l] : add(up[l].forward(dec[l + 1]), enc[l]);
    dec[l] = run(decoder[l], in);
  }
  if (trace) {
    trace->encoder = enc;
    trace->decoder = dec;
  }
  return dec[0];
}

void EncoderDecoder::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  shallow.collect_parameters(join_name(prefix, "shallow"), out);
  for (int level = 0; level < kLevels; ++level) {
    const auto l = static_cast<size_t>(level);
    for (size_t i = 0; i < encoder[l].size(); ++i) {
      encoder[l][i].collect_parameters(
          join_name(prefix, "enc" + std::to_string(level + 1) + "." + std::to_string(i)), out);
    }
    if (level + 1 < kLevels) down[l].collect_parameters(join_name(prefix, "down" + std::to_string(level + 1)), out);
  }
  for (const auto& p : decoder_parameters()) out.push_back({join_name(prefix, p.name), p.tensor});
}

std::vector<NamedTensor> EncoderDecoder::decoder_parameters() const {
  std::vector<NamedTensor> out;
  for (int level = kLevels - 1; level >= 0; --level) {
    const auto l = static_cast<size_t>(level);
    for (size_t i = 0; i < decoder[l].size(); ++i) {
      decoder[l][i].collect_parameters("dec" + std::to_string(level + 1) + "." + std::to_string(i), out);
    }
    if (level > 0) up[l - 1].collect_parameters("up" + std::to_string(level + 1), out);
  }
  return out;
}

}  // namespace rainforge
