// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "tdnn/model.hpp"

namespace tdnnq {

// Rank-r factorization W ~= A * B with A = U_r * Sigma_r and B = V_r^T from
// the SVD; the Frobenius-optimal rank-r approximation.
struct FactorizedLayer {
  Matrix factor_a;  // out_dim x r
  Matrix factor_b;  // r x in_cols
  std::size_t rank_r = 0;

  std::size_t param_count() const { return factor_a.size() + factor_b.size(); }
};

struct SvdResult {
  Matrix u;                           // m x k, orthonormal columns
  std::vector<double> singular_values;  // k, descending
  Matrix v;                           // n x k, orthonormal columns
};

// Full thin SVD via one-sided Jacobi rotations. k = min(m, n).
SvdResult svd(const Matrix& w);

FactorizedLayer svd_truncate(const Matrix& weights, std::size_t rank);

// Rank per layer index.
using RankPolicy = std::vector<std::size_t>;

// Picks per-layer ranks so the factorized parameter total approximates
// `target_ratio` of the original weight parameters (uniform rank fraction).
RankPolicy ranks_for_param_ratio(const TdnnModel& model, double target_ratio);

struct FactorizeReport {
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  double ratio = 0.0;
  std::vector<std::size_t> ranks;
};

// Replaces every dense layer's weight matrix with its SVD truncation; the
// output head is left dense. Forward passes compose B then A.
struct FactorizeResult {
  TdnnModel model;
  FactorizeReport report;
};
FactorizeResult factorize_model(const TdnnModel& model, const RankPolicy& policy);

}  // namespace tdnnq
