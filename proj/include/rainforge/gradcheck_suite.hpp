#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rainforge/gradcheck.hpp"

namespace rainforge {

struct GradCheckCase {
  std::string name;
  double tol;
  GradCheckReport report;
};

inline constexpr double kOpTolerance = 1e-6;
inline constexpr double kBlockTolerance = 1e-4;

/// Central-difference checks (f64, step 1e-5) of every differentiable op at
/// 1e-6 and every layer and composite block at 1e-4. `progress` is called
/// after each case.
std::vector<GradCheckCase> run_gradcheck_suite(const std::function<void(const GradCheckCase&)>& progress = {});

}  // namespace rainforge
