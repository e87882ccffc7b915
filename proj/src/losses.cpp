#include "rainforge/losses.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

#include "rainforge/frequency.hpp"
#include "rainforge/ops.hpp"
#include "rainforge/serialize.hpp"

namespace rainforge {

namespace {

void require_same(const Tensor& x, const Tensor& y, const char* op) {
  if (x.shape() != y.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
}

double mse(const Tensor& x, const Tensor& y) {
  const auto a = x.to_vector(), b = y.to_vector();
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

std::array<double, kSsimWindow> gaussian_taps() {
  std::array<double, kSsimWindow> g{};
  double total = 0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    g[static_cast<size_t>(i)] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
    total += g[static_cast<size_t>(i)];
  }
  for (auto& v : g) v /= total;
  return g;
}

// Separable valid-mode Gaussian filter of one h x w plane.
std::vector<double> filter_valid(const double* p, int64_t h, int64_t w, const std::array<double, kSsimWindow>& g) {
  const int64_t ho = h - kSsimWindow + 1, wo = w - kSsimWindow + 1;
  std::vector<double> rows(static_cast<size_t>(h * wo));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < wo; ++x) {
      double acc = 0;
      for (int k = 0; k < kSsimWindow; ++k) acc += g[static_cast<size_t>(k)] * p[y * w + x + k];
      rows[static_cast<size_t>(y * wo + x)] = acc;
    }
  std::vector<double> out(static_cast<size_t>(ho * wo));
  for (int64_t y = 0; y < ho; ++y)
    for (int64_t x = 0; x < wo; ++x) {
      double acc = 0;
      for (int k = 0; k < kSsimWindow; ++k) acc += g[static_cast<size_t>(k)] * rows[static_cast<size_t>((y + k) * wo + x)];
      out[static_cast<size_t>(y * wo + x)] = acc;
    }
  return out;
}

}  // namespace

double psnr(const Tensor& x, const Tensor& y, double max_val) {
  require_same(x, y, "psnr");
  if (!(max_val > 0)) throw Error("psnr: max_val must be positive");
  const double m = mse(x, y);
  if (m < kMseFloor) return kPsnrCap;
  return 10.0 * std::log10(max_val * max_val / m);
}

double ssim(const Tensor& x, const Tensor& y, double max_val) {
  require_same(x, y, "ssim");
  if (x.dim() < 2) throw Error("ssim: expected at least 2 dimensions");
  const int64_t h = x.size(x.dim() - 2), w = x.size(x.dim() - 1);
  if (h < kSsimWindow || w < kSsimWindow) {
    throw Error("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than the 11x11 window");
  }
  const double c1 = (0.01 * max_val) * (0.01 * max_val), c2 = (0.03 * max_val) * (0.03 * max_val);
  const auto g = gaussian_taps();
  const auto a = x.to_vector(), b = y.to_vector();
  const int64_t planes = x.numel() / (h * w);
  std::vector<double> aa(static_cast<size_t>(h * w)), bb(aa.size()), ab(aa.size());
  double total = 0;
  int64_t count = 0;
  for (int64_t p = 0; p < planes; ++p) {
    const double* pa = a.data() + p * h * w;
    const double* pb = b.data() + p * h * w;
    for (size_t i = 0; i < aa.size(); ++i) {
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    const auto mu_a = filter_valid(pa, h, w, g), mu_b = filter_valid(pb, h, w, g);
    const auto s_aa = filter_valid(aa.data(), h, w, g), s_bb = filter_valid(bb.data(), h, w, g);
    const auto s_ab = filter_valid(ab.data(), h, w, g);
    for (size_t i = 0; i < mu_a.size(); ++i) {
      const double va = s_aa[i] - mu_a[i] * mu_a[i], vb = s_bb[i] - mu_b[i] * mu_b[i];
      const double cov = s_ab[i] - mu_a[i] * mu_b[i];
      total += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
               ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
    }
    count += static_cast<int64_t>(mu_a.size());
  }
  return total / static_cast<double>(count);
}

Tensor psnr_loss(const Tensor& restored, const Tensor& clean, double max_val) {
  require_same(restored, clean, "psnr_loss");
  Tensor diff = sub(restored, clean);
  Tensor m = mean(square(diff));
  if (m.item() < kMseFloor) return Tensor::full({1}, -kPsnrCap, restored.dtype());
  // -10 log10(max^2 / mse) = 10 / ln(10) * ln(mse) - 20 log10(max)
  return add_scalar(scale(log(m), 10.0 / std::numbers::ln10), -20.0 * std::log10(max_val));
}

Tensor l1_distance(const Tensor& a, const Tensor& b) {
  require_same(a, b, "l1_distance");
  return mean(abs(sub(a, b)));
}

// ---------------------------------------------------------------- FeatureExtractor

FeatureExtractor::FeatureExtractor(uint64_t seed, DType dt, std::vector<int64_t> widths, int64_t in_channels) {
  if (widths.empty()) throw Error("FeatureExtractor: need at least one stage");
  Rng rng(seed);
  int64_t in = in_channels;
  for (int64_t wd : widths) {
    Conv2dOptions o;
    o.in_channels = in;
    o.out_channels = wd;
    o.stride = 2;
    Conv2dLayer conv(o, rng, dt);
    conv.weight.set_requires_grad(false);
    conv.bias.set_requires_grad(false);
    convs.push_back(conv);
    in = wd;
  }
}

std::vector<Tensor> FeatureExtractor::features(const Tensor& x) const {
  std::vector<Tensor> out;
  Tensor h = x;
  for (const auto& c : convs) {
    h = relu(c.forward(h));
    out.push_back(h);
  }
  return out;
}

void FeatureExtractor::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  for (size_t i = 0; i < convs.size(); ++i) convs[i].collect_parameters(join_name(prefix, "stage" + std::to_string(i + 1)), out);
}

void FeatureExtractor::save_weights(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  TensorTable table;
  for (const auto& p : named_parameters()) table.emplace_back(p.name, p.tensor);
  write_tensor_table(os, table);
  if (!os) throw Error("write failed: " + path);
}

void FeatureExtractor::load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path);
  std::map<std::string, Tensor> loaded;
  for (auto& [name, t] : read_tensor_table(is)) loaded[name] = t;
  for (auto& p : named_parameters()) {
    auto it = loaded.find(p.name);
    if (it == loaded.end()) throw Error("feature weights " + path + ": missing tensor " + p.name);
    if (it->second.shape() != p.tensor.shape()) {
      throw Error("feature weights " + path + ": " + p.name + " has shape " + shape_str(it->second.shape()) +
                  ", expected " + shape_str(p.tensor.shape()));
    }
    Tensor src = it->second.to(p.tensor.dtype());
    dispatch(p.tensor.dtype(), [&]<typename T>() {
      auto d = p.tensor.mutable_data<T>();
      auto s = src.data<T>();
      std::copy(s.begin(), s.end(), d.begin());
    });
  }
}

// ---------------------------------------------------------------- losses

void LossConfig::validate() const {
  if (!(lambda >= 0)) throw Error("loss config: lambda must be >= 0");
  for (double w : omega) {
    if (!(w >= 0)) throw Error("loss config: omega entries must be >= 0");
  }
  if (!(eps_cr > 0)) throw Error("loss config: eps_cr must be > 0");
  if (n_bits < 1 || n_bits > 16) throw Error("loss config: n_bits must lie in [1, 16]");
}

std::vector<double> LossConfig::weights(size_t stages) const {
  if (omega.empty()) return std::vector<double>(stages, 1.0 / static_cast<double>(stages));
  if (omega.size() != stages) {
    throw Error("loss config: " + std::to_string(omega.size()) + " omega entries for " + std::to_string(stages) +
                " feature stages");
  }
  return omega;
}

Tensor contrastive_reg(const Tensor& restored, const Tensor& clean, const Tensor& rainy,
                       const FeatureExtractor& fx, const LossConfig& cfg) {
  require_same(restored, clean, "contrastive_reg");
  require_same(restored, rainy, "contrastive_reg");
  cfg.validate();
  const auto w = cfg.weights(fx.stages());
  std::vector<Tensor> g_clean, g_rainy;
  {
    NoGradGuard guard;
    g_clean = fx.features(dwt2_haar_channels(clean));
    g_rainy = fx.features(dwt2_haar_channels(rainy));
  }
  const auto g_restored = fx.features(dwt2_haar_channels(restored));
  Tensor total;
  for (size_t i = 0; i < w.size(); ++i) {
    Tensor ratio = div(l1_distance(g_clean[i], g_restored[i]),
                       add_scalar(l1_distance(g_rainy[i], g_restored[i]), cfg.eps_cr));
    Tensor term = scale(ratio, w[i]);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor total_loss(const Tensor& restored, const Tensor& clean, const Tensor& rainy,
                  const FeatureExtractor& fx, const LossConfig& cfg) {
  cfg.validate();
  Tensor fidelity = psnr_loss(restored, clean, 1.0);
  if (cfg.lambda == 0) return fidelity;
  return add(fidelity, scale(contrastive_reg(restored, clean, rainy, fx, cfg), cfg.lambda));
}

}  // namespace rainforge
