// SPDX-License-Identifier: Apache-2.0

#include "quant/quant_core.hpp"

#include <cmath>

namespace tdnnq {

std::int32_t quant_min(QuantBits bits, QuantMode mode) {
  if (mode == QuantMode::asymmetric) return 0;
  return bits == QuantBits::b8 ? -127 : -32767;
}

std::int32_t quant_max(QuantBits bits, QuantMode /*mode*/) {
  return bits == QuantBits::b8 ? 127 : 32767;
}

void QuantParams::validate() const {
  if (!(scale > 0.0) || !std::isfinite(scale)) raise(ErrorKind::invalid_input, "quant params: scale must be finite and > 0");
  if (zero_point < q_min() || zero_point > q_max()) raise(ErrorKind::invalid_input, "quant params: zero point outside integer range");
  if (mode == QuantMode::symmetric && zero_point != 0) raise(ErrorKind::invalid_input, "quant params: symmetric mode requires zero point 0");
}

void RangeStats::validate() const {
  if (!std::isfinite(min) || !std::isfinite(max)) raise(ErrorKind::invalid_input, "range stats: non-finite bounds");
  if (min > max) raise(ErrorKind::invalid_input, "range stats: min > max");
}

RangeStats RangeStats::of(std::span<const float> xs) {
  if (xs.empty()) raise(ErrorKind::invalid_input, "range stats: empty input");
  RangeStats s{xs[0], xs[0]};
  for (float x : xs) s.update(x);
  return s;
}

void QuantizedTensor::validate() const {
  params.validate();
  if (size() != data.size()) raise(ErrorKind::dimension, "quantized tensor: shape product does not match payload length");
  const std::int32_t lo = params.q_min(), hi = params.q_max();
  for (std::int32_t v : data)
    if (v < lo || v > hi) raise(ErrorKind::invalid_input, "quantized tensor: element outside integer range");
}

QuantParams compute_qparams(const RangeStats& stats, QuantBits bits, QuantMode mode) {
  stats.validate();

  double x_min = stats.min;
  double x_max = stats.max;
  if (x_min == x_max) {
    x_min -= 1.0;
    x_max += 1.0;
  }
  if (mode == QuantMode::symmetric) {
    const double m = std::max(std::abs(x_min), std::abs(x_max));
    x_min = -m;
    x_max = m;
  }

  QuantParams p;
  p.bits = bits;
  p.mode = mode;
  p.scale = (x_max - x_min) / static_cast<double>(quant_max(bits, mode) - quant_min(bits, mode));
  if (mode == QuantMode::symmetric) {
    p.zero_point = 0;
  } else {
    double z = std::nearbyint(quant_min(bits, mode) - x_min / p.scale);
    const double lo = quant_min(bits, mode), hi = quant_max(bits, mode);
    if (z < lo) z = lo;
    if (z > hi) z = hi;
    p.zero_point = static_cast<std::int32_t>(z);
  }
  p.validate();
  return p;
}

QuantizedTensor quantize(std::span<const float> x, const QuantParams& params) {
  params.validate();
  QuantizedTensor out;
  out.params = params;
  out.shape = {x.size()};
  out.data.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) raise(ErrorKind::invalid_input, "quantize: non-finite input value");
    out.data[i] = quantize_value(x[i], params);
  }
  return out;
}

std::vector<float> dequantize(const QuantizedTensor& q) {
  q.validate();
  std::vector<float> out(q.data.size());
  for (std::size_t i = 0; i < q.data.size(); ++i) out[i] = dequantize_value(q.data[i], q.params);
  return out;
}

std::vector<float> fake_quantize(std::span<const float> x, const QuantParams& params) {
  params.validate();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) raise(ErrorKind::invalid_input, "fake_quantize: non-finite input value");
    out[i] = dequantize_value(quantize_value(x[i], params), params);
  }
  return out;
}

}  // namespace tdnnq
