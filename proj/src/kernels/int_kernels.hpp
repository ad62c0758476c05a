// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "common/matrix.hpp"
#include "quant/quant_core.hpp"

namespace tdnnq {

// Precomputed state for integer matmul / 1D convolution:
//
//   r3[i][k] = M * ( N*Z1*Z2 - Z1*a2[k] - Z2*a1[i] + sum_j q1[i][j]*q2[k][j] )
//   q3[i][k] = Z3 + round(M * (...))                 (requantized variant)
//
// with q1 the activations, q2 the weights (row k holds output k), Z1/Z2
// their zero points, a2[k] the per-row weight column sums and a1[i] the
// per-frame activation row sums. M = S1*S2 for the float-output variant,
// M = S1*S2/S3 when an output quantization is supplied. a2 and N*Z1*Z2
// depend only on the weights and are computed once per plan.
struct IntConvPlan {
  QuantizedTensor q_weights;           // out_dim x inner, row-major
  std::vector<std::int64_t> col_sums_a2;  // per output row
  double multiplier_m = 0.0;
  std::int64_t const_nz1z2 = 0;
  std::size_t out_dim = 0;
  std::size_t inner_dim = 0;  // N
  QuantParams act_params;
  std::optional<QuantParams> out_params;

  std::int32_t weight_at(std::size_t k, std::size_t j) const { return q_weights.data[k * inner_dim + j]; }
};

// Per-frame activation row sums a1[i] = sum_j q1[i][j].
struct ActRowSums {
  std::vector<std::int64_t> row_sums_a1;
};

// int8 plans accumulate the product term in 32 bits. Largest inner dimension
// with N * 127 * 127 < 2^31, so every prefix sum stays inside int32. Checked
// at plan construction.
constexpr std::size_t kInt8MaxInnerDim = ((1ull << 31) - 1) / (127ull * 127ull);

// Quantizes the weights once and precomputes the zero-point correction
// constants. out_params selects the requantized (integer-output) mode.
IntConvPlan build_plan(const Matrix& weights, const QuantParams& w_params, const QuantParams& act_params,
                       const std::optional<QuantParams>& out_params = std::nullopt);

ActRowSums compute_row_sums(const QuantizedTensor& q_acts, std::size_t inner_dim);

// Float-output integer matmul. q_acts holds frames x inner_dim.
Matrix int_matmul_float_out(const IntConvPlan& plan, const QuantizedTensor& q_acts, const ActRowSums& a1);

// Requantized integer matmul; plan must carry out_params.
QuantizedTensor int_matmul_requant(const IntConvPlan& plan, const QuantizedTensor& q_acts, const ActRowSums& a1);

// Integer 1D convolution over an already context-spliced, quantized input.
// Row sums are computed internally; the bias is NOT added here (the caller
// maps back to float first).
Matrix conv1d_int(const IntConvPlan& plan, const QuantizedTensor& q_spliced_input);

}  // namespace tdnnq
