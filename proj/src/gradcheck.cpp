#include "rainforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rainforge {

namespace {

// One-sided slopes that differ by less than this (relative) are taken as smooth.
constexpr double kGapFloor = 1e-6;
// Rounding error of one function value, in units of eps * |f|.
constexpr double kNoiseUlps = 16.0;

double scalar_value(const Tensor& y) {
  if (!y.defined() || y.numel() != 1) {
    throw Error("gradient check: function must return a scalar, got " +
                (y.defined() ? shape_str(y.shape()) : std::string("<undefined>")));
  }
  return y.item();
}

GradCheckReport compare(Tensor target, const Tensor& analytic,
                        const std::function<double()>& evaluate, double step, double tol,
                        int64_t max_elements) {
  if (target.dtype() != DType::f64) throw Error("gradient check requires an f64 tensor");
  GradCheckReport report;
  auto data = target.mutable_data<double>();
  const auto n = static_cast<int64_t>(data.size());
  const int64_t stride = (max_elements > 0 && max_elements < n) ? (n + max_elements - 1) / max_elements : 1;

  for (int64_t i = 0; i < n; i += stride) {
    const auto k = static_cast<size_t>(i);
    const double orig = data[k];
    data[k] = orig + step;
    const double up = evaluate();
    data[k] = orig - step;
    const double down = evaluate();
    data[k] = orig;
    const double mid = evaluate();

    const double fwd = (up - mid) / step;
    const double bwd = (mid - down) / step;
    // For smooth f the gap fwd - bwd is f'' * step and grows tenfold with the
    // step. A kink at or near x breaks that scaling. Rounding in f adds noise
    // of order eps * |f| / step to each slope, so gaps below that say nothing.
    const double gap = fwd - bwd;
    const double fmax = std::max({std::abs(up), std::abs(mid), std::abs(down)});
    const double noise = kNoiseUlps * std::numeric_limits<double>::epsilon() * fmax / step;
    if (std::abs(gap) > std::max(kGapFloor * std::max({1.0, std::abs(fwd), std::abs(bwd)}), 2.0 * noise)) {
      const double h = step * 10.0;
      data[k] = orig + h;
      const double up2 = evaluate();
      data[k] = orig - h;
      const double down2 = evaluate();
      data[k] = orig;
      const double gap2 = ((up2 - mid) - (mid - down2)) / h;
      if (std::abs(gap2 - 10.0 * gap) > 5.0 * std::abs(gap) + 11.0 * noise) {
        report.excluded.push_back(i);
        continue;
      }
    }
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic.defined() ? analytic.at(i) : 0.0;
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    report.max_rel_error = std::max(report.max_rel_error, err);
    ++report.checked;
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace

GradCheckReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                        const Tensor& x, double step, double tol,
                                        int64_t max_elements) {
  if (x.dtype() != DType::f64) throw Error("finite_difference_check requires f64 input");
  Tensor probe = x.clone();
  probe.set_requires_grad(true);
  Tensor analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f(probe);
    scalar_value(y);
    tape.backward(y);
    analytic = probe.grad();
  }
  Tensor work = x.clone();
  auto evaluate = [&]() {
    NoGradGuard guard;
    return scalar_value(f(work));
  };
  return compare(work, analytic, evaluate, step, tol, max_elements);
}

GradCheckReport parameter_gradient_check(Tensor param, const std::function<Tensor()>& loss,
                                         double step, double tol, int64_t max_elements) {
  if (param.dtype() != DType::f64) throw Error("parameter_gradient_check requires an f64 tensor");
  const bool had_grad = param.requires_grad();
  param.set_requires_grad(true);
  param.zero_grad();
  Tensor analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = loss();
    scalar_value(y);
    tape.backward(y);
    analytic = param.grad();
  }
  param.zero_grad();
  auto evaluate = [&]() {
    NoGradGuard guard;
    return scalar_value(loss());
  };
  GradCheckReport report = compare(param, analytic, evaluate, step, tol, max_elements);
  param.set_requires_grad(had_grad);
  return report;
}

}  // namespace rainforge
