#include "rainforge/frequency.hpp"

#include "rainforge/nn.hpp"
#include "rainforge/ops.hpp"

namespace rainforge {

namespace {

// Band-major layout [4, N, C, H/2, W/2] in order LL, LH, HL, HH.
Tensor haar_synthesis(const Tensor& bands);

Tensor haar_analysis(const Tensor& x) {
  if (x.dim() != 4) throw Error("dwt2_haar: expected N x C x H x W, got " + shape_str(x.shape()));
  const int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw Error("dwt2_haar: extents must be even (pad first), got " + shape_str(x.shape()));
  }
  const int64_t hh = h / 2, hw = w / 2;
  const int64_t band = n * c * hh * hw;
  Tensor out = make_tensor({4, n, c, hh, hw}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (int64_t p = 0; p < n * c; ++p) {
      const T* src = px.data() + p * h * w;
      for (int64_t i = 0; i < hh; ++i) {
        for (int64_t j = 0; j < hw; ++j) {
          const T a = src[(2 * i) * w + 2 * j], b = src[(2 * i) * w + 2 * j + 1];
          const T cc = src[(2 * i + 1) * w + 2 * j], d = src[(2 * i + 1) * w + 2 * j + 1];
          const int64_t k = (p * hh + i) * hw + j;
          po[static_cast<size_t>(k)] = (a + b + cc + d) / T(2);
          po[static_cast<size_t>(band + k)] = (a + b - cc - d) / T(2);
          po[static_cast<size_t>(2 * band + k)] = (a - b + cc - d) / T(2);
          po[static_cast<size_t>(3 * band + k)] = (a - b - cc + d) / T(2);
        }
      }
    }
  });
  // The transform is orthogonal, so its adjoint is the synthesis.
  record_op({x}, out, [](const Tensor& g) { return std::vector<Tensor>{haar_synthesis(g)}; });
  return out;
}

Tensor haar_synthesis(const Tensor& bands) {
  if (bands.dim() != 5 || bands.size(0) != 4) {
    throw Error("idwt2_haar: expected 4 stacked bands, got " + shape_str(bands.shape()));
  }
  const int64_t n = bands.size(1), c = bands.size(2), hh = bands.size(3), hw = bands.size(4);
  const int64_t h = 2 * hh, w = 2 * hw;
  const int64_t band = n * c * hh * hw;
  Tensor out = make_tensor({n, c, h, w}, bands.dtype());
  dispatch(bands.dtype(), [&]<typename T>() {
    auto ps = bands.data<T>();
    auto po = out.mutable_data<T>();
    for (int64_t p = 0; p < n * c; ++p) {
      T* dst = po.data() + p * h * w;
      for (int64_t i = 0; i < hh; ++i) {
        for (int64_t j = 0; j < hw; ++j) {
          const int64_t k = (p * hh + i) * hw + j;
          const T ll = ps[static_cast<size_t>(k)], lh = ps[static_cast<size_t>(band + k)];
          const T hl = ps[static_cast<size_t>(2 * band + k)], hh_ = ps[static_cast<size_t>(3 * band + k)];
          dst[(2 * i) * w + 2 * j] = (ll + lh + hl + hh_) / T(2);
          dst[(2 * i) * w + 2 * j + 1] = (ll + lh - hl - hh_) / T(2);
          dst[(2 * i + 1) * w + 2 * j] = (ll - lh + hl - hh_) / T(2);
          dst[(2 * i + 1) * w + 2 * j + 1] = (ll - lh - hl + hh_) / T(2);
        }
      }
    }
  });
  record_op({bands}, out, [](const Tensor& g) { return std::vector<Tensor>{haar_analysis(g)}; });
  return out;
}

Tensor band(const Tensor& stacked, int64_t i) {
  Shape s(stacked.shape().begin() + 1, stacked.shape().end());
  return reshape(slice(stacked, 0, i, i + 1), s);
}

}  // namespace

DwtSubbands dwt2_haar(const Tensor& x) {
  Tensor s = haar_analysis(x);
  return {band(s, 0), band(s, 1), band(s, 2), band(s, 3)};
}

Tensor idwt2_haar(const DwtSubbands& s) {
  const Shape& ref = s.ll.shape();
  if (s.lh.shape() != ref || s.hl.shape() != ref || s.hh.shape() != ref) {
    throw Error("idwt2_haar: inconsistent subband shapes " + shape_str(ref) + ", " +
                shape_str(s.lh.shape()) + ", " + shape_str(s.hl.shape()) + ", " +
                shape_str(s.hh.shape()));
  }
  if (ref.size() != 4) throw Error("idwt2_haar: subbands must be N x C x h x w");
  Shape one = ref;
  one.insert(one.begin(), 1);
  Tensor stacked = concat({reshape(s.ll, one), reshape(s.lh, one), reshape(s.hl, one), reshape(s.hh, one)}, 0);
  return haar_synthesis(stacked);
}

Tensor dwt2_haar_channels(const Tensor& x) {
  const DwtSubbands s = dwt2_haar(x);
  return concat({s.ll, s.lh, s.hl, s.hh}, 1);
}

std::vector<DwtSubbands> dwt2_haar_multilevel(const Tensor& x, int levels) {
  if (levels < 1) throw Error("dwt2_haar_multilevel: levels must be >= 1");
  std::vector<DwtSubbands> out;
  Tensor cur = x;
  for (int l = 0; l < levels; ++l) {
    out.push_back(dwt2_haar(cur));
    cur = out.back().ll;
  }
  return out;
}

Tensor idwt2_haar_multilevel(const std::vector<DwtSubbands>& levels) {
  if (levels.empty()) throw Error("idwt2_haar_multilevel: no levels");
  Tensor ll = levels.back().ll;
  for (auto it = levels.rbegin(); it != levels.rend(); ++it) {
    ll = idwt2_haar({ll, it->lh, it->hl, it->hh});
  }
  return ll;
}

Tensor pad_to_even(const Tensor& x) {
  const int64_t ph = x.size(-2) % 2, pw = x.size(-1) % 2;
  if (ph == 0 && pw == 0) return x;
  return reflection_pad(x, 0, ph, 0, pw);
}

}  // namespace rainforge
