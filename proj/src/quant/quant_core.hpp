// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "common/error.hpp"

namespace tdnnq {

enum class QuantBits : std::uint8_t { b8 = 8, b16 = 16 };
enum class QuantMode : std::uint8_t { symmetric = 0, asymmetric = 1 };

// Integer range per (bits, mode).
//   symmetric int8:  [-127, 127]    (-128 is never used)
//   symmetric int16: [-32767, 32767]
//   asymmetric:      [0, 2^(bits-1) - 1], i.e. [0, 127] / [0, 32767]
std::int32_t quant_min(QuantBits bits, QuantMode mode);
std::int32_t quant_max(QuantBits bits, QuantMode mode);

// The affine map r = scale * (q - zero_point) between reals and integers.
struct QuantParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;
  QuantBits bits = QuantBits::b8;
  QuantMode mode = QuantMode::symmetric;

  std::int32_t q_min() const { return quant_min(bits, mode); }
  std::int32_t q_max() const { return quant_max(bits, mode); }

  // Smallest / largest representable real value.
  double real_min() const { return scale * (q_min() - zero_point); }
  double real_max() const { return scale * (q_max() - zero_point); }

  void validate() const;
};

struct RangeStats {
  double min = 0.0;
  double max = 0.0;

  void validate() const;
  void update(float x) {
    if (x < min) min = x;
    if (x > max) max = x;
  }
  void merge(const RangeStats& o) {
    if (o.min < min) min = o.min;
    if (o.max > max) max = o.max;
  }
  static RangeStats of(std::span<const float> xs);
};

// Integer payload plus the params that produced it. Values are stored
// widened to int32 in memory; serialization narrows to 1 or 2 bytes.
struct QuantizedTensor {
  std::vector<std::int32_t> data;
  std::vector<std::size_t> shape;
  QuantParams params;

  std::size_t size() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  void validate() const;
};

// Scale/zero-point from observed range. Symmetric mode widens the range to
// [-m, m] with m = max(|min|, |max|) so the zero-point is exactly 0.
// A degenerate range (min == max) is substituted with [min - 1, max + 1].
QuantParams compute_qparams(const RangeStats& stats, QuantBits bits, QuantMode mode);

// q_i = clamp(round(x_i / scale) + zero_point, q_min, q_max), round half to even.
QuantizedTensor quantize(std::span<const float> x, const QuantParams& params);

// Single-value version of the map; no validation.
inline std::int32_t quantize_value(double x, const QuantParams& p) {
  double q = std::nearbyint(x / p.scale) + p.zero_point;
  const double lo = p.q_min(), hi = p.q_max();
  if (q < lo) q = lo;
  if (q > hi) q = hi;
  return static_cast<std::int32_t>(q);
}

inline float dequantize_value(std::int32_t q, const QuantParams& p) {
  return static_cast<float>(p.scale * (q - p.zero_point));
}

// r_i = scale * (q_i - zero_point)
std::vector<float> dequantize(const QuantizedTensor& q);

// dequantize(quantize(x)) - snaps floats onto the quantization grid.
// Idempotent: applying it twice gives the same result elementwise.
std::vector<float> fake_quantize(std::span<const float> x, const QuantParams& params);

// True when x lies inside [real_min, real_max]; the straight-through
// estimator passes gradients exactly on this predicate.
inline bool in_quant_range(float x, const QuantParams& p) {
  return x >= p.real_min() && x <= p.real_max();
}

}  // namespace tdnnq
