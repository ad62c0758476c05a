// SPDX-License-Identifier: Apache-2.0

#include "kernels/int_kernels.hpp"

#include <cmath>

namespace tdnnq {

namespace {

// Product-term accumulation: int32 for int8 operands (the Fig. 1 dataflow),
// int64 once any operand is 16-bit since int16*int16 sums overflow int32
// almost immediately. Zero-point corrections are always folded in 64 bits.
bool use_int32_accumulator(const IntConvPlan& plan) {
  return plan.q_weights.params.bits == QuantBits::b8 && plan.act_params.bits == QuantBits::b8;
}

// TODO: SIMD the int8 path (AVX2 maddubs-style); scalar is enough at the
// model sizes exercised here.
std::int64_t dot_q(const IntConvPlan& plan, const std::int32_t* acts, std::size_t k, bool int32_acc) {
  const std::int32_t* w = plan.q_weights.data.data() + k * plan.inner_dim;
  if (int32_acc) {
    std::int32_t acc = 0;
    for (std::size_t j = 0; j < plan.inner_dim; ++j) acc += acts[j] * w[j];
    return acc;
  }
  std::int64_t acc = 0;
  for (std::size_t j = 0; j < plan.inner_dim; ++j) acc += static_cast<std::int64_t>(acts[j]) * w[j];
  return acc;
}

void check_acts(const IntConvPlan& plan, const QuantizedTensor& q_acts, const ActRowSums& a1) {
  if (q_acts.shape.size() != 2 || q_acts.shape[1] != plan.inner_dim)
    raise(ErrorKind::dimension, "int matmul: activation inner dimension does not match plan");
  if (a1.row_sums_a1.size() != q_acts.shape[0])
    raise(ErrorKind::dimension, "int matmul: row sums inconsistent with activations");
}

}  // namespace

IntConvPlan build_plan(const Matrix& weights, const QuantParams& w_params, const QuantParams& act_params,
                       const std::optional<QuantParams>& out_params) {
  w_params.validate();
  act_params.validate();
  if (weights.rows == 0 || weights.cols == 0) raise(ErrorKind::dimension, "build_plan: empty weight matrix");

  IntConvPlan plan;
  plan.out_dim = weights.rows;
  plan.inner_dim = weights.cols;
  plan.act_params = act_params;
  plan.out_params = out_params;

  const bool all8 = w_params.bits == QuantBits::b8 && act_params.bits == QuantBits::b8;
  if (all8 && plan.inner_dim > kInt8MaxInnerDim)
    raise(ErrorKind::overflow_risk,
          "build_plan: inner dimension " + std::to_string(plan.inner_dim) + " risks int32 accumulator overflow for int8");

  plan.q_weights = quantize(std::span<const float>(weights.data), w_params);
  plan.q_weights.shape = {weights.rows, weights.cols};

  plan.col_sums_a2.assign(plan.out_dim, 0);
  for (std::size_t k = 0; k < plan.out_dim; ++k) {
    std::int64_t s = 0;
    for (std::size_t j = 0; j < plan.inner_dim; ++j) s += plan.weight_at(k, j);
    plan.col_sums_a2[k] = s;
  }

  const double s1s2 = act_params.scale * w_params.scale;
  plan.multiplier_m = out_params ? s1s2 / out_params->scale : s1s2;
  plan.const_nz1z2 = static_cast<std::int64_t>(plan.inner_dim) * act_params.zero_point * w_params.zero_point;
  return plan;
}

ActRowSums compute_row_sums(const QuantizedTensor& q_acts, std::size_t inner_dim) {
  if (q_acts.shape.size() != 2 || q_acts.shape[1] != inner_dim)
    raise(ErrorKind::dimension, "compute_row_sums: activations must be frames x inner_dim");
  const std::size_t frames = q_acts.shape[0];
  ActRowSums sums;
  sums.row_sums_a1.assign(frames, 0);
  for (std::size_t i = 0; i < frames; ++i) {
    const std::int32_t* row = q_acts.data.data() + i * inner_dim;
    std::int64_t s = 0;
    for (std::size_t j = 0; j < inner_dim; ++j) s += row[j];
    sums.row_sums_a1[i] = s;
  }
  return sums;
}

Matrix int_matmul_float_out(const IntConvPlan& plan, const QuantizedTensor& q_acts, const ActRowSums& a1) {
  check_acts(plan, q_acts, a1);
  const std::size_t frames = q_acts.shape[0];
  const bool int32_acc = use_int32_accumulator(plan);
  const std::int64_t z1 = plan.act_params.zero_point;
  const std::int64_t z2 = plan.q_weights.params.zero_point;

  Matrix out(frames, plan.out_dim);
  for (std::size_t i = 0; i < frames; ++i) {
    const std::int32_t* acts = q_acts.data.data() + i * plan.inner_dim;
    const std::int64_t base = plan.const_nz1z2 - z2 * a1.row_sums_a1[i];
    float* orow = out.row(i);
    for (std::size_t k = 0; k < plan.out_dim; ++k) {
      const std::int64_t core = base - z1 * plan.col_sums_a2[k] + dot_q(plan, acts, k, int32_acc);
      orow[k] = static_cast<float>(plan.multiplier_m * static_cast<double>(core));
    }
  }
  return out;
}

QuantizedTensor int_matmul_requant(const IntConvPlan& plan, const QuantizedTensor& q_acts, const ActRowSums& a1) {
  if (!plan.out_params) raise(ErrorKind::invalid_argument, "int_matmul_requant: plan was built without output quantization");
  check_acts(plan, q_acts, a1);
  const QuantParams& op = *plan.out_params;
  const std::size_t frames = q_acts.shape[0];
  const bool int32_acc = use_int32_accumulator(plan);
  const std::int64_t z1 = plan.act_params.zero_point;
  const std::int64_t z2 = plan.q_weights.params.zero_point;
  const double lo = op.q_min(), hi = op.q_max();

  QuantizedTensor out;
  out.params = op;
  out.shape = {frames, plan.out_dim};
  out.data.resize(frames * plan.out_dim);
  for (std::size_t i = 0; i < frames; ++i) {
    const std::int32_t* acts = q_acts.data.data() + i * plan.inner_dim;
    const std::int64_t base = plan.const_nz1z2 - z2 * a1.row_sums_a1[i];
    for (std::size_t k = 0; k < plan.out_dim; ++k) {
      const std::int64_t core = base - z1 * plan.col_sums_a2[k] + dot_q(plan, acts, k, int32_acc);
      double q = op.zero_point + std::nearbyint(plan.multiplier_m * static_cast<double>(core));
      if (q < lo) q = lo;
      if (q > hi) q = hi;
      out.data[i * plan.out_dim + k] = static_cast<std::int32_t>(q);
    }
  }
  return out;
}

Matrix conv1d_int(const IntConvPlan& plan, const QuantizedTensor& q_spliced_input) {
  const ActRowSums a1 = compute_row_sums(q_spliced_input, plan.inner_dim);
  return int_matmul_float_out(plan, q_spliced_input, a1);
}

}  // namespace tdnnq
