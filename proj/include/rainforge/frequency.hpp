#pragma once

#include <vector>

#include "rainforge/tensor.hpp"

namespace rainforge {

/// One level of the orthonormal 2-D Haar transform. Each band is
/// N x C x H/2 x W/2. For a 2x2 block [[a, b], [c, d]]:
///   LL = (a + b + c + d) / 2    HL = (a - b + c - d) / 2
///   LH = (a + b - c - d) / 2    HH = (a - b - c + d) / 2
struct DwtSubbands {
  Tensor ll, lh, hl, hh;
};

/// Requires even H and W.
DwtSubbands dwt2_haar(const Tensor& x);
Tensor idwt2_haar(const DwtSubbands& s);

/// Bands stacked along the channel axis in order LL, LH, HL, HH: N x 4C x H/2 x W/2.
Tensor dwt2_haar_channels(const Tensor& x);

/// Repeated transform of the LL band; result[i] is level i + 1.
std::vector<DwtSubbands> dwt2_haar_multilevel(const Tensor& x, int levels);
Tensor idwt2_haar_multilevel(const std::vector<DwtSubbands>& levels);

/// Reflection-pads one row/column on the far side of odd extents.
Tensor pad_to_even(const Tensor& x);

}  // namespace rainforge
