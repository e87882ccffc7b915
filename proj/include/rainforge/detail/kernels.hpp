#pragma once

#include <cmath>
#include <string>

#include "rainforge/tensor.hpp"

namespace rainforge::detail {

inline int64_t normalize_axis(int64_t axis, int64_t rank, const char* op) {
  const int64_t a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw Error(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                std::to_string(rank));
  }
  return a;
}

/// Row-major view of a tensor as [outer, len, inner] around one axis.
struct AxisGeometry {
  int64_t outer = 1, len = 1, inner = 1;
};

inline AxisGeometry axis_geometry(const Shape& s, int64_t axis) {
  AxisGeometry g;
  for (int64_t i = 0; i < static_cast<int64_t>(s.size()); ++i) {
    const int64_t e = s[static_cast<size_t>(i)];
    if (i < axis) g.outer *= e;
    else if (i == axis) g.len = e;
    else g.inner *= e;
  }
  return g;
}

inline void check_finite(const Tensor& t, const char* op) {
  dispatch(t.dtype(), [&]<typename T>() {
    for (T v : t.data<T>()) {
      if (!std::isfinite(v)) throw Error(std::string(op) + ": produced a non-finite value");
    }
  });
}

}  // namespace rainforge::detail
