#include "rainforge/gradcheck_suite.hpp"

#include "rainforge/attention_blocks.hpp"
#include "rainforge/frequency.hpp"
#include "rainforge/losses.hpp"
#include "rainforge/model.hpp"
#include "rainforge/ops.hpp"
#include "rainforge/window_transformer.hpp"

namespace rainforge {

namespace {

constexpr DType F64 = DType::f64;

// Random projection to a scalar so every output element matters.
Tensor probe(const Tensor& y) {
  Rng rng(0xC0FFEE + static_cast<uint64_t>(y.numel()));
  return sum(mul(y, rng.uniform_tensor(y.shape(), -1.0, 1.0, y.dtype())));
}

GradCheckReport merge(const std::vector<GradCheckReport>& rs) {
  GradCheckReport out;
  out.passed = true;
  for (const auto& r : rs) {
    out.max_rel_error = std::max(out.max_rel_error, r.max_rel_error);
    out.checked += r.checked;
    out.excluded.insert(out.excluded.end(), r.excluded.begin(), r.excluded.end());
    out.passed = out.passed && r.passed;
  }
  return out;
}

using UnaryOp = std::function<Tensor(const Tensor&)>;

GradCheckReport unary(const UnaryOp& op, const Tensor& x, double tol) {
  return finite_difference_check([&](const Tensor& v) { return probe(op(v)); }, x, 1e-5, tol);
}

GradCheckReport binary(const std::function<Tensor(const Tensor&, const Tensor&)>& op, const Tensor& a,
                       const Tensor& b, double tol) {
  return merge({finite_difference_check([&](const Tensor& v) { return probe(op(v, b)); }, a, 1e-5, tol),
                finite_difference_check([&](const Tensor& v) { return probe(op(a, v)); }, b, 1e-5, tol)});
}

// Checks every parameter of `m` (subsampled) plus the input.
GradCheckReport module_check(const Module& m, const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                             double tol, int64_t per_param = 12) {
  std::vector<GradCheckReport> rs;
  for (const auto& p : m.named_parameters()) {
    if (!p.tensor.requires_grad()) continue;
    rs.push_back(parameter_gradient_check(p.tensor, [&]() { return probe(f(x)); }, 1e-5, tol, per_param));
  }
  rs.push_back(finite_difference_check([&](const Tensor& v) { return probe(f(v)); }, x, 1e-5, tol, 24));
  return merge(rs);
}

Tensor positive_definite(Rng& rng, int64_t batch, int64_t k) {
  Tensor m = rng.normal_tensor({batch, k, k}, 1.0, F64);
  Tensor a = matmul(m, transpose(m, 1, 2));
  Tensor eye = Tensor::zeros({k, k}, F64);
  for (int64_t i = 0; i < k; ++i) eye.mutable_data<double>()[static_cast<size_t>(i * k + i)] = static_cast<double>(k);
  return add(a, eye);
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(const std::function<void(const GradCheckCase&)>& progress) {
  std::vector<GradCheckCase> out;
  auto add_case = [&](const std::string& name, double tol, const GradCheckReport& r) {
    out.push_back({name, tol, r});
    if (progress) progress(out.back());
  };
  const double op = kOpTolerance, blk = kBlockTolerance;
  Rng rng(2024);
  auto normal = [&](const Shape& s) { return rng.normal_tensor(s, 1.0, F64); };
  auto uniform = [&](const Shape& s, double lo, double hi) { return rng.uniform_tensor(s, lo, hi, F64); };

  // ---- elementwise
  const Tensor a = normal({3, 4}), b = normal({3, 4}), row = normal({1, 4}), col = normal({3, 1});
  add_case("add", op, merge({binary([](auto& p, auto& q) { return add(p, q); }, a, b, op),
                            binary([](auto& p, auto& q) { return add(p, q); }, a, row, op)}));
  add_case("sub", op, merge({binary([](auto& p, auto& q) { return sub(p, q); }, a, b, op),
                            binary([](auto& p, auto& q) { return sub(p, q); }, col, a, op)}));
  add_case("mul", op, merge({binary([](auto& p, auto& q) { return mul(p, q); }, a, b, op),
                            binary([](auto& p, auto& q) { return mul(p, q); }, a, col, op)}));
  add_case("div", op, binary([](auto& p, auto& q) { return div(p, q); }, a, uniform({3, 4}, 0.5, 2.0), op));
  add_case("neg", op, unary([](auto& v) { return neg(v); }, a, op));
  add_case("scale", op, unary([](auto& v) { return scale(v, -1.7); }, a, op));
  add_case("add_scalar", op, unary([](auto& v) { return add_scalar(v, 0.3); }, a, op));
  add_case("relu", op, unary([](auto& v) { return relu(v); }, a, op));
  add_case("sigmoid", op, unary([](auto& v) { return sigmoid(v); }, a, op));
  add_case("gelu", op, unary([](auto& v) { return gelu(v); }, a, op));
  add_case("exp", op, unary([](auto& v) { return exp(v); }, a, op));
  add_case("log", op, unary([](auto& v) { return log(v); }, uniform({3, 4}, 0.5, 3.0), op));
  add_case("abs", op, unary([](auto& v) { return abs(v); }, a, op));
  add_case("square", op, unary([](auto& v) { return square(v); }, a, op));

  // ---- reductions and shapes
  const Tensor t4 = normal({2, 3, 4, 5});
  add_case("sum", op, unary([](auto& v) { return scale(sum(v), 0.5); }, t4, op));
  add_case("mean", op, unary([](auto& v) { return mean(v); }, t4, op));
  add_case("sum_axes", op, unary([](auto& v) { return sum(v, {1, 3}, true); }, t4, op));
  add_case("mean_axes", op, unary([](auto& v) { return mean(v, {0, 2}, false); }, t4, op));
  add_case("max", op, unary([](auto& v) { return max(v, 1, true); }, t4, op));
  add_case("sum_to", op, unary([](auto& v) { return sum_to(v, {1, 3, 1, 5}); }, t4, op));
  add_case("reshape", op, unary([](auto& v) { return reshape(v, {6, 20}); }, t4, op));
  add_case("permute", op, unary([](auto& v) { return permute(v, {3, 1, 0, 2}); }, t4, op));
  add_case("transpose", op, unary([](auto& v) { return transpose(v, 1, 3); }, t4, op));
  add_case("concat", op, binary([](auto& p, auto& q) { return concat({p, q}, 1); }, t4, normal({2, 2, 4, 5}), op));
  add_case("slice", op, unary([](auto& v) { return slice(v, 2, 1, 3); }, t4, op));
  add_case("roll", op, unary([](auto& v) { return roll(roll(v, 2, -1), 3, 2); }, t4, op));
  add_case("softmax", op, unary([](auto& v) { return softmax(v, -1); }, t4, op));

  // ---- linear algebra
  add_case("matmul", op, merge({binary([](auto& p, auto& q) { return matmul(p, q); }, normal({3, 4}), normal({4, 2}), op),
                               binary([](auto& p, auto& q) { return matmul(p, q); }, normal({2, 3, 4}),
                                      normal({2, 4, 5}), op),
                               binary([](auto& p, auto& q) { return matmul(p, q); }, normal({2, 3, 4}),
                                      normal({4, 2}), op)}));
  {
    const Tensor spd = positive_definite(rng, 2, 3), rhs = normal({2, 3, 2});
    // Symmetric perturbations keep A in the SPD family the solver assumes.
    auto sym = [](const Tensor& v) { return scale(add(v, transpose(v, 1, 2)), 0.5); };
    add_case("solve_spd",
             op, merge({finite_difference_check([&](const Tensor& v) { return probe(solve_spd(sym(v), rhs)); }, spd,
                                                1e-5, op),
                        finite_difference_check([&](const Tensor& v) { return probe(solve_spd(spd, v)); }, rhs, 1e-5,
                                                op)}));
  }

  // ---- convolution family
  {
    const Tensor x = normal({2, 3, 6, 5}), w = normal({4, 3, 3, 3}), bias = normal({4});
    auto f = [&](int stride, int pad) {
      return merge({finite_difference_check([&](const Tensor& v) { return probe(conv2d(v, w, bias, stride, pad)); }, x,
                                            1e-5, op),
                    finite_difference_check([&](const Tensor& v) { return probe(conv2d(x, v, bias, stride, pad)); }, w,
                                            1e-5, op),
                    finite_difference_check([&](const Tensor& v) { return probe(conv2d(x, w, v, stride, pad)); },
                                            bias, 1e-5, op)});
    };
    add_case("conv2d", op, f(1, 1));
    add_case("conv2d_stride2", op, f(2, 1));
    const Tensor pw = normal({5, 3, 1, 1});
    add_case("conv2d_1x1", op, binary([](auto& p, auto& q) { return conv2d(p, q, Tensor(), 1, 0); }, x, pw, op));
    const Tensor dw = normal({3, 1, 3, 3}), db = normal({3});
    add_case("depthwise_conv2d", op,
             merge({binary([&](auto& p, auto& q) { return depthwise_conv2d(p, q, db); }, x, dw, op),
                    unary([&](auto& v) { return depthwise_conv2d(x, dw, v); }, db, op)}));
    const Tensor g = uniform({3}, 0.5, 1.5), be = normal({3}), g5 = uniform({5}, 0.5, 1.5), b5 = normal({5});
    add_case("layer_norm", op,
             merge({unary([&](auto& v) { return layer_norm(v, g, be, 1e-5, 1); }, x, op),
                    unary([&](auto& v) { return layer_norm(x, v, be, 1e-5, 1); }, g, op),
                    unary([&](auto& v) { return layer_norm(x, g, v, 1e-5, 1); }, be, op),
                    unary([&](auto& v) { return layer_norm(v, g5, b5, 1e-5, 3); }, x, op)}));
    add_case("reflection_pad", op, unary([](auto& v) { return reflection_pad(v, 1, 2, 2, 0); }, x, op));
    add_case("crop", op, unary([](auto& v) { return crop(v, 1, 2, 3, 2); }, x, op));
    add_case("upsample_nearest2x", op, unary([](auto& v) { return upsample_nearest2x(v); }, x, op));
  }

  // ---- wavelets
  {
    const Tensor x = normal({2, 2, 4, 6});
    add_case("dwt2_haar", op, unary([](auto& v) { return dwt2_haar_channels(v); }, x, op));
    const Tensor ll = normal({1, 2, 2, 3}), lh = normal({1, 2, 2, 3}), hl = normal({1, 2, 2, 3}), hh = normal({1, 2, 2, 3});
    add_case("idwt2_haar", op,
             merge({unary([&](auto& v) { return idwt2_haar({v, lh, hl, hh}); }, ll, op),
                    unary([&](auto& v) { return idwt2_haar({ll, v, hl, hh}); }, lh, op),
                    unary([&](auto& v) { return idwt2_haar({ll, lh, v, hh}); }, hl, op),
                    unary([&](auto& v) { return idwt2_haar({ll, lh, hl, v}); }, hh, op)}));
  }

  // ---- layers and blocks
  {
    Rng init(7);
    Conv2dOptions o;
    o.in_channels = 3;
    o.out_channels = 4;
    Conv2dLayer zero_pad(o, init, F64);
    o.mode = PadMode::reflect;
    o.stride = 2;
    Conv2dLayer reflect(o, init, F64);
    const Tensor x = normal({1, 3, 6, 6});
    add_case("Conv2dLayer", blk, merge({module_check(zero_pad, [&](auto& v) { return zero_pad.forward(v); }, x, blk),
                                        module_check(reflect, [&](auto& v) { return reflect.forward(v); }, x, blk)}));

    LinearLayer lin(3, 5, init, F64);
    add_case("LinearLayer",
             blk, merge({module_check(lin, [&](auto& v) { return lin.forward_tokens(v); }, normal({2, 4, 3}), blk),
                         module_check(lin, [&](auto& v) { return lin.forward_channels(v); }, x, blk)}));
    LayerNormLayer ln(3, F64);
    add_case("LayerNormLayer", blk, module_check(ln, [&](auto& v) { return ln.forward(v, 1); }, x, blk));
    DepthwiseConv2dLayer dwl(3, init, F64);
    add_case("DepthwiseConv2dLayer", blk, module_check(dwl, [&](auto& v) { return dwl.forward(v); }, x, blk));
    Resample down(4, ResampleDirection::down, init, F64), up(4, ResampleDirection::up, init, F64);
    const Tensor x4 = normal({1, 4, 4, 4});
    add_case("Resample", blk, merge({module_check(down, [&](auto& v) { return down.forward(v); }, x4, blk),
                                     module_check(up, [&](auto& v) { return up.forward(v); }, x4, blk)}));

    MultiAttentionBlock mab(4, init, F64);
    mab.theta.mutable_data<double>()[0] = 0.4;
    add_case("MultiAttentionBlock", blk, module_check(mab, [&](auto& v) { return mab.forward(v); }, x4, blk));

    SupervisedAttentionModule sam(4, init, F64);
    sam.conv_img = Conv2dLayer(sam.conv_img.options, init, F64);
    const Tensor img = uniform({1, 3, 4, 4}, 0.0, 1.0);
    add_case("SupervisedAttentionModule", blk, module_check(sam, [&](auto& v) {
               auto r = sam.forward(v, img);
               return concat({r.restored, r.gated_features}, 1);
             }, x4, blk));

    EncoderDecoder ed(2, 1, init, F64);
    add_case("EncoderDecoder", blk,
             module_check(ed, [&](auto& v) { return ed.forward(v); }, uniform({1, 3, 8, 8}, 0.0, 1.0), blk, 4));

    WindowAttention wa(4, 2, 2, 2, init, F64);
    const Tensor xi = normal({1, 4, 5, 6});
    add_case("WindowAttention", blk,
             merge({module_check(wa, [&](auto& v) { return wa.forward_image(v, 0); }, xi, blk),
                    module_check(wa, [&](auto& v) { return wa.forward_image(v, 1); }, xi, blk)}));
    DconvFfn ffn(4, 2, init, F64);
    add_case("DconvFfn", blk, module_check(ffn, [&](auto& v) { return ffn.forward(v); }, xi, blk));
    DualTransformerBlock dual(4, 2, 2, 1, 2, init, F64);
    add_case("DualTransformerBlock", blk, module_check(dual, [&](auto& v) { return dual.forward(v); }, xi, blk));
    Nlffm nl(4, 2, 1e-4, init, F64);
    const Tensor x2 = normal({1, 4, 5, 6});
    add_case("Nlffm", blk, merge({module_check(nl, [&](auto& v) { return nl.forward(v, x2); }, xi, blk),
                                  unary([&](auto& v) { return nl.forward(xi, v); }, x2, blk)}));
  }

  // ---- losses
  {
    FeatureExtractor fx(3, F64, {4, 4});
    const Tensor clean = uniform({1, 3, 8, 8}, 0.0, 1.0), rainy = uniform({1, 3, 8, 8}, 0.0, 1.0);
    const Tensor restored = add(scale(clean, 0.6), scale(rainy, 0.4));
    LossConfig cfg;
    add_case("l1_distance", op, unary([&](auto& v) { return l1_distance(v, clean); }, restored, op));
    add_case("psnr_loss", op, unary([&](auto& v) { return psnr_loss(v, clean); }, restored, op));
    add_case("contrastive_reg", blk,
             unary([&](auto& v) { return contrastive_reg(v, clean, rainy, fx, cfg); }, restored, blk));
    add_case("total_loss", blk, unary([&](auto& v) { return total_loss(v, clean, rainy, fx, cfg); }, restored, blk));
  }
  return out;
}

}  // namespace rainforge
