#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

namespace ipsfuse {

// exp() for hot inner loops. The float variant is a branch-free polynomial
// (relative error ~1e-7, ~2 ulp) whose ops all map to SIMD instructions, so
// loops over arrays auto-vectorize; the double variant stays on libm so the
// double-precision gradient oracles keep full accuracy.
inline float fexp(float x) {
  float z = x * 1.44269504088896341f;  // x / ln 2
  // round-to-nearest via the 2^23 magic constant; branch-free so loops with
  // this call stay vectorizable (float min/max ternaries would not)
  float kf = (z + 12582912.0f) - 12582912.0f;
  float t = (z - kf) * 0.693147180559945309f;  // remainder back in natural log scale
  // e^t on |t| <= ln(2)/2 via a degree-6 Horner expansion
  float p = 1.0f + t * (1.0f + t * (0.5f + t * (1.0f / 6.0f +
            t * (1.0f / 24.0f + t * (1.0f / 120.0f + t * (1.0f / 720.0f))))));
  // integer exponent clamp saturates instead of overflowing
  auto k = static_cast<std::int32_t>(kf);
  k = k < -126 ? -126 : k;
  k = k > 127 ? 127 : k;
  auto bits = static_cast<std::uint32_t>(k + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

inline double fexp(double x) { return std::exp(x); }

}  // namespace ipsfuse
