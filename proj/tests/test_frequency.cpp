#include <doctest.h>

#include <cmath>

#include "rainforge/frequency.hpp"
#include "rainforge/gradcheck.hpp"
#include "rainforge/ops.hpp"

using namespace rainforge;

namespace {

double energy(const Tensor& t) {
  double e = 0;
  for (double v : t.to_vector()) e += v * v;
  return e;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace

TEST_CASE("haar on known blocks") {
  const auto s = dwt2_haar(Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4}));
  CHECK(s.ll.item() == 5.0);
  CHECK(s.hl.item() == -1.0);
  CHECK(s.lh.item() == -2.0);
  CHECK(s.hh.item() == 0.0);

  const auto c = dwt2_haar(Tensor::full({2, 3, 4, 6}, 0.3));
  for (double v : c.ll.to_vector()) CHECK(v == doctest::Approx(0.6));
  for (const Tensor* t : {&c.lh, &c.hl, &c.hh}) {
    for (double v : t->to_vector()) CHECK(v == 0.0);
  }

  Tensor ll = Tensor::full({1, 1, 2, 2}, 1.4);
  Tensor z = Tensor::zeros({1, 1, 2, 2});
  for (double v : idwt2_haar({ll, z, z, z}).to_vector()) CHECK(v == doctest::Approx(0.7));
}

TEST_CASE("haar round trip and energy") {
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = rng.uniform_tensor({2, 3, 8, 10}, 0.0, 1.0);
    const auto s = dwt2_haar(x);
    CHECK(max_abs_diff(idwt2_haar(s), x) <= 1e-5);
    const double e = energy(s.ll) + energy(s.lh) + energy(s.hl) + energy(s.hh);
    CHECK(std::abs(e - energy(x)) <= 1e-4 * energy(x));

    Tensor xd = x.to(DType::f64);
    CHECK(max_abs_diff(idwt2_haar(dwt2_haar(xd)), xd) <= 1e-12);
  }
  Tensor x = rng.uniform_tensor({1, 2, 16, 16}, 0.0, 1.0, DType::f64);
  CHECK(max_abs_diff(idwt2_haar_multilevel(dwt2_haar_multilevel(x, 3)), x) <= 1e-12);
}

TEST_CASE("haar linearity and detail removal") {
  Rng rng(2);
  Tensor x = rng.normal_tensor({1, 2, 6, 6}, 1.0, DType::f64);
  Tensor y = rng.normal_tensor({1, 2, 6, 6}, 1.0, DType::f64);
  const double alpha = 0.7, beta = -1.3;
  Tensor lhs = dwt2_haar_channels(add(scale(x, alpha), scale(y, beta)));
  Tensor rhs = add(scale(dwt2_haar_channels(x), alpha), scale(dwt2_haar_channels(y), beta));
  CHECK(max_abs_diff(lhs, rhs) <= 1e-6);

  // x without HH == x - idwt(0, 0, 0, HH)
  const auto s = dwt2_haar(x);
  Tensor z = zeros_like(s.ll);
  Tensor no_hh = idwt2_haar({s.ll, s.lh, s.hl, z});
  Tensor oracle = sub(x, idwt2_haar({z, z, z, s.hh}));
  CHECK(max_abs_diff(no_hh, oracle) <= 1e-12);
}

TEST_CASE("haar gradients and errors") {
  Rng rng(3);
  Tensor x = rng.normal_tensor({1, 2, 4, 6}, 1.0, DType::f64);
  Tensor w = rng.normal_tensor({1, 8, 2, 3}, 1.0, DType::f64);
  auto f = [&](const Tensor& v) { return sum(mul(square(dwt2_haar_channels(v)), w)); };
  CHECK(finite_difference_check(f, x).passed);

  Tensor bands = rng.normal_tensor({1, 2, 2, 3}, 1.0, DType::f64);
  Tensor w2 = rng.normal_tensor({1, 2, 4, 6}, 1.0, DType::f64);
  auto g = [&](const Tensor& v) { return sum(mul(idwt2_haar({v, scale(v, 2.0), bands, v}), w2)); };
  CHECK(finite_difference_check(g, bands).passed);

  CHECK_THROWS_AS(dwt2_haar(Tensor::zeros({1, 1, 3, 4})), Error);
  CHECK_THROWS_AS(idwt2_haar({Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 2, 3}),
                              Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 2, 2})}),
                  Error);
  CHECK(pad_to_even(Tensor::zeros({1, 1, 5, 7})).shape() == Shape{1, 1, 6, 8});
}
