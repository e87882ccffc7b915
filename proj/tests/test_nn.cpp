#include <doctest.h>

#include <cmath>

#include "rainforge/gradcheck.hpp"
#include "rainforge/nn.hpp"
#include "rainforge/ops.hpp"

using namespace rainforge;

namespace {

// Direct cross-correlation with zero padding.
std::vector<double> brute_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int64_t n = x.size(0), c = x.size(1), h = x.size(2), wd = x.size(3);
  const int64_t o = w.size(0), kh = w.size(2), kw = w.size(3);
  const int64_t ho = (h + 2 * pad - kh) / stride + 1, wo = (wd + 2 * pad - kw) / stride + 1;
  const auto xv = x.to_vector(), wv = w.to_vector();
  std::vector<double> out(static_cast<size_t>(n * o * ho * wo));
  for (int64_t bi = 0; bi < n; ++bi)
    for (int64_t oc = 0; oc < o; ++oc)
      for (int64_t y = 0; y < ho; ++y)
        for (int64_t xx = 0; xx < wo; ++xx) {
          double acc = b.defined() ? b.at(oc) : 0.0;
          for (int64_t ic = 0; ic < c; ++ic)
            for (int64_t i = 0; i < kh; ++i)
              for (int64_t j = 0; j < kw; ++j) {
                const int64_t iy = y * stride - pad + i, ix = xx * stride - pad + j;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += wv[static_cast<size_t>(((oc * c + ic) * kh + i) * kw + j)] *
                       xv[static_cast<size_t>(((bi * c + ic) * h + iy) * wd + ix)];
              }
          out[static_cast<size_t>(((bi * o + oc) * ho + y) * wo + xx)] = acc;
        }
  return out;
}

Tensor probe(const Tensor& y, uint64_t seed = 123) {
  Rng rng(seed);
  return sum(mul(y, rng.uniform_tensor(y.shape(), -1.0, 1.0, y.dtype())));
}

void check_close(const std::vector<double>& a, const std::vector<double>& b, double tol) {
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= tol);
}

}  // namespace

TEST_CASE("conv2d examples") {
  Rng rng(1);
  Tensor img = rng.normal_tensor({1, 1, 5, 5}, 1.0);
  Tensor delta = Tensor::ones({1, 1, 1, 1});
  CHECK(conv2d(img, delta, Tensor::zeros({1}), 1, 0).to_vector() == img.to_vector());

  Tensor zero_w = Tensor::zeros({2, 1, 3, 3});
  for (double v : conv2d(img, zero_w, Tensor::full({2}, 0.7), 1, 1).to_vector()) {
    CHECK(v == doctest::Approx(0.7));
  }

  std::vector<double> ramp;
  for (int i = 0; i < 25; ++i) ramp.push_back(i);
  Tensor r = Tensor::from_vector({1, 1, 5, 5}, ramp, DType::f64);
  Tensor avg = Tensor::full({1, 1, 3, 3}, 1.0 / 9.0, DType::f64);
  check_close(conv2d(r, avg, Tensor(), 1, 1).to_vector(), brute_conv(r, avg, Tensor(), 1, 1), 1e-6);
  CHECK(conv2d(r, avg, Tensor(), 1, 1).at(12) == doctest::Approx(12.0));

  CHECK_THROWS_AS(conv2d(img, Tensor::zeros({1, 2, 3, 3}), Tensor(), 1, 1), Error);
}

TEST_CASE("conv2d matches brute force across kernels and strides") {
  Rng rng(2);
  for (int k : {1, 3}) {
    for (int stride : {1, 2}) {
      Tensor x = rng.normal_tensor({2, 3, 6, 8}, 1.0, DType::f64);
      Tensor w = rng.normal_tensor({4, 3, k, k}, 1.0, DType::f64);
      Tensor b = rng.normal_tensor({4}, 1.0, DType::f64);
      const int pad = k / 2;
      check_close(conv2d(x, w, b, stride, pad).to_vector(), brute_conv(x, w, b, stride, pad), 1e-6);
    }
  }
}

TEST_CASE("conv layers pass finite differences") {
  Rng rng(3);
  for (PadMode mode : {PadMode::zero, PadMode::reflect}) {
    for (int stride : {1, 2}) {
      Conv2dOptions o;
      o.in_channels = 2;
      o.out_channels = 3;
      o.stride = stride;
      o.mode = mode;
      Conv2dLayer conv(o, rng, DType::f64);
      Tensor x = rng.normal_tensor({2, 2, 4, 4}, 1.0, DType::f64);
      auto loss = [&] { return probe(conv.forward(x)); };
      CHECK(parameter_gradient_check(conv.weight, loss).passed);
      CHECK(parameter_gradient_check(conv.bias, loss).passed);
      CHECK(finite_difference_check([&](const Tensor& v) { return probe(conv.forward(v)); }, x).passed);
    }
  }
}

TEST_CASE("depthwise conv") {
  Rng rng(4);
  Tensor x = rng.normal_tensor({2, 3, 5, 4}, 1.0, DType::f64);
  Tensor delta = Tensor::zeros({3, 1, 3, 3}, DType::f64);
  for (int c = 0; c < 3; ++c) delta.mutable_data<double>()[static_cast<size_t>(c * 9 + 4)] = 1.0;
  CHECK(depthwise_conv2d(x, delta, Tensor()).to_vector() == x.to_vector());

  DepthwiseConv2dLayer dw(3, rng, DType::f64);
  // Oracle: run each channel as its own single-channel conv.
  Tensor out = dw.forward(x);
  for (int64_t c = 0; c < 3; ++c) {
    Tensor xc = slice(x, 1, c, c + 1);
    Tensor wc = slice(dw.weight, 0, c, c + 1);
    const auto ref = brute_conv(xc, wc, slice(dw.bias, 0, c, c + 1), 1, 1);
    check_close(slice(out, 1, c, c + 1).to_vector(), ref, 1e-6);
  }

  Tensor two = Tensor::zeros({1, 2, 4, 4}, DType::f64);
  for (int i = 0; i < 16; ++i) two.mutable_data<double>()[static_cast<size_t>(i)] = rng.normal();
  Tensor y = depthwise_conv2d(two, slice(dw.weight, 0, 0, 2), Tensor());
  y = slice(y, 1, 1, 2);
  for (double v : y.to_vector()) CHECK(v == 0.0);

  // perturbation: output channel i only depends on input channel i
  Tensor base = dw.forward(x);
  Tensor bumped = x.clone();
  bumped.mutable_data<double>()[static_cast<size_t>(1 * 20 + 7)] += 1.0;  // batch 0, channel 1
  Tensor diff = sub(dw.forward(bumped), base);
  for (int64_t c : {0, 2}) {
    for (double v : slice(diff, 1, c, c + 1).to_vector()) CHECK(v == 0.0);
  }

  auto loss = [&] { return probe(dw.forward(x)); };
  CHECK(parameter_gradient_check(dw.weight, loss).passed);
  CHECK(parameter_gradient_check(dw.bias, loss).passed);
  CHECK(finite_difference_check([&](const Tensor& v) { return probe(dw.forward(v)); }, x).passed);
  CHECK_THROWS_AS(dw.forward(Tensor::zeros({1, 2, 4, 4}, DType::f64)), Error);
}

TEST_CASE("layer norm") {
  Rng rng(5);
  LayerNormLayer ln(6, DType::f64);
  Tensor x = rng.normal_tensor({2, 6, 3, 3}, 3.0, DType::f64);
  Tensor y = ln.forward(x, 1);
  Tensor mu = mean(y, {1}, false);
  Tensor var = mean(square(y), {1}, false);
  for (double v : mu.to_vector()) CHECK(std::abs(v) <= 1e-6);
  for (double v : var.to_vector()) CHECK(std::abs(v - 1.0) <= 1e-4);

  // constant input collapses to beta
  for (auto& v : ln.beta.mutable_data<double>()) v = 0.25;
  for (double v : ln.forward(Tensor::full({1, 6, 2, 2}, 3.0, DType::f64), 1).to_vector()) {
    CHECK(v == doctest::Approx(0.25));
  }

  // two-pass oracle on random gamma/beta
  ln.gamma = rng.normal_tensor({6}, 1.0, DType::f64).set_requires_grad(true);
  ln.beta = rng.normal_tensor({6}, 1.0, DType::f64).set_requires_grad(true);
  Tensor out = ln.forward(x, 1);
  const auto xv = x.to_vector();
  for (int64_t n = 0; n < 2; ++n) {
    for (int64_t p = 0; p < 9; ++p) {
      double m = 0, v = 0;
      for (int64_t c = 0; c < 6; ++c) m += xv[static_cast<size_t>((n * 6 + c) * 9 + p)];
      m /= 6;
      for (int64_t c = 0; c < 6; ++c) {
        const double d = xv[static_cast<size_t>((n * 6 + c) * 9 + p)] - m;
        v += d * d;
      }
      v /= 6;
      for (int64_t c = 0; c < 6; ++c) {
        const auto idx = static_cast<size_t>((n * 6 + c) * 9 + p);
        const double ref = ln.gamma.at(c) * (xv[idx] - m) / std::sqrt(v + ln.eps) + ln.beta.at(c);
        CHECK(std::abs(out.at(static_cast<int64_t>(idx)) - ref) <= 1e-6);
      }
    }
  }

  auto loss = [&] { return probe(ln.forward(x, 1)); };
  CHECK(parameter_gradient_check(ln.gamma, loss).passed);
  CHECK(parameter_gradient_check(ln.beta, loss).passed);
  CHECK(finite_difference_check([&](const Tensor& v) { return probe(ln.forward(v, 1)); }, x).passed);
  CHECK(finite_difference_check([&](const Tensor& v) { return probe(ln.forward(v, -1)); },
                                rng.normal_tensor({3, 4, 6}, 1.0, DType::f64)).passed);
  CHECK_THROWS_AS(ln.forward(x, 2), Error);
}

TEST_CASE("linear layer") {
  Rng rng(6);
  LinearLayer fc(4, 3, rng, DType::f64);
  Tensor tokens = rng.normal_tensor({2, 5, 4}, 1.0, DType::f64);
  Tensor img = permute(reshape(tokens, {2, 5, 1, 4}), {0, 3, 1, 2});  // N x C x H x W
  Tensor a = fc.forward_tokens(tokens);
  Tensor b = permute(fc.forward_channels(img), {0, 2, 3, 1});
  check_close(a.to_vector(), b.to_vector(), 1e-12);
  auto loss = [&] { return probe(fc.forward_tokens(tokens)); };
  CHECK(parameter_gradient_check(fc.weight, loss).passed);
  CHECK(parameter_gradient_check(fc.bias, loss).passed);
  auto loss_c = [&] { return probe(fc.forward_channels(img)); };
  CHECK(parameter_gradient_check(fc.weight, loss_c).passed);
}

TEST_CASE("resample") {
  Rng rng(7);
  Resample down(4, ResampleDirection::down, rng, DType::f32);
  Resample up(8, ResampleDirection::up, rng, DType::f32);
  Tensor x = rng.normal_tensor({2, 4, 8, 8}, 1.0);
  Tensor d = down.forward(x);
  CHECK(d.shape() == Shape{2, 8, 4, 4});
  CHECK(up.forward(d).shape() == x.shape());
  CHECK_THROWS_AS(down.forward(Tensor::zeros({1, 4, 7, 8})), Error);

  Tensor small = Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(upsample_nearest2x(small).to_vector() ==
        std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});

  Tensor xd = rng.normal_tensor({1, 2, 4, 4}, 1.0, DType::f64);
  CHECK(finite_difference_check([&](const Tensor& v) { return probe(upsample_nearest2x(v)); }, xd).passed);
}

TEST_CASE("reflection pad") {
  Tensor row = Tensor::from_vector({1, 3}, {1, 2, 3});
  Tensor padded = reflection_pad(row, 0, 0, 1, 1);
  CHECK(padded.to_vector() == std::vector<double>{2, 1, 2, 3, 2});

  Rng rng(8);
  Tensor x = rng.normal_tensor({2, 3, 5, 6}, 1.0);
  Tensor p = reflection_pad(x, 2);
  CHECK(p.shape() == Shape{2, 3, 9, 10});
  CHECK(crop(p, 2, 2, 5, 6).to_vector() == x.to_vector());

  for (double v : reflection_pad(Tensor::full({1, 1, 3, 3}, 0.4), 2).to_vector()) {
    CHECK(v == doctest::Approx(0.4));
  }
  CHECK_THROWS_AS(reflection_pad(x, 5), Error);

  Tensor xd = rng.normal_tensor({1, 2, 4, 5}, 1.0, DType::f64);
  CHECK(finite_difference_check([&](const Tensor& v) { return probe(reflection_pad(v, 1, 2, 3, 0)); }, xd).passed);
}

TEST_CASE("parameter init and registry") {
  Rng rng(9);
  Conv2dOptions o;
  o.in_channels = 16;
  o.out_channels = 32;
  Conv2dLayer conv(o, rng, DType::f64);
  const auto w = conv.weight.to_vector();
  double var = 0;
  for (double v : w) var += v * v;
  var /= static_cast<double>(w.size());
  CHECK(var == doctest::Approx(2.0 / (16 * 9)).epsilon(0.1));
  for (double v : conv.bias.to_vector()) CHECK(v == 0.0);
  auto names = conv.named_parameters();
  REQUIRE(names.size() == 2);
  CHECK(names[0].name == "weight");
  CHECK(conv.parameter_count() == 32 * 16 * 9 + 32);
  o.kernel = 2;
  CHECK_THROWS_AS(Conv2dLayer(o, rng, DType::f32), Error);
}
