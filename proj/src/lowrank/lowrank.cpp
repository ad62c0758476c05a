// SPDX-License-Identifier: Apache-2.0

#include "lowrank/lowrank.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tdnnq {

namespace {

// One-sided Jacobi on the columns of a working copy in double precision.
// Rotations orthogonalize column pairs until every off-diagonal Gram entry
// is negligible; column norms are then the singular values.
struct JacobiWork {
  std::size_t m, n;
  std::vector<double> a;  // m x n column-major access via col()
  std::vector<double> v;  // n x n accumulated right rotations

  double* col(std::size_t j) { return a.data() + j * m; }
  double* vcol(std::size_t j) { return v.data() + j * n; }
};

SvdResult svd_tall(const Matrix& w) {
  const std::size_t m = w.rows, n = w.cols;
  JacobiWork work;
  work.m = m;
  work.n = n;
  work.a.resize(m * n);
  work.v.assign(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) work.col(j)[i] = w.at(i, j);
    work.vcol(j)[j] = 1.0;
  }

  const double eps = 1e-15;
  const int max_sweeps = 60;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        const double* cp = work.col(p);
        const double* cq = work.col(q);
        for (std::size_t i = 0; i < m; ++i) {
          app += cp[i] * cp[i];
          aqq += cq[i] * cq[i];
          apq += cp[i] * cq[i];
        }
        if (std::abs(apq) <= eps * std::sqrt(app * aqq) || apq == 0.0) continue;
        converged = false;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        double* wp = work.col(p);
        double* wq = work.col(q);
        for (std::size_t i = 0; i < m; ++i) {
          const double wp_i = wp[i];
          wp[i] = c * wp_i - s * wq[i];
          wq[i] = s * wp_i + c * wq[i];
        }
        double* vp = work.vcol(p);
        double* vq = work.vcol(q);
        for (std::size_t i = 0; i < n; ++i) {
          const double vp_i = vp[i];
          vp[i] = c * vp_i - s * vq[i];
          vq[i] = s * vp_i + c * vq[i];
        }
      }
    }
    if (converged) break;
  }

  // Column norms are the singular values; sort descending.
  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    const double* cj = work.col(j);
    for (std::size_t i = 0; i < m; ++i) s += cj[i] * cj[i];
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  SvdResult result;
  result.u = Matrix(m, n);
  result.v = Matrix(n, n);
  result.singular_values.resize(n);
  for (std::size_t out_j = 0; out_j < n; ++out_j) {
    const std::size_t j = idx[out_j];
    result.singular_values[out_j] = sigma[j];
    const double inv = sigma[j] > 0.0 ? 1.0 / sigma[j] : 0.0;
    for (std::size_t i = 0; i < m; ++i) result.u.at(i, out_j) = static_cast<float>(work.col(j)[i] * inv);
    for (std::size_t i = 0; i < n; ++i) result.v.at(i, out_j) = static_cast<float>(work.vcol(j)[i]);
  }
  return result;
}

}  // namespace

SvdResult svd(const Matrix& w) {
  if (w.rows == 0 || w.cols == 0) raise(ErrorKind::dimension, "svd: empty matrix");
  if (w.rows >= w.cols) return svd_tall(w);
  // Wide: decompose the transpose and swap factors.
  Matrix wt(w.cols, w.rows);
  for (std::size_t i = 0; i < w.rows; ++i)
    for (std::size_t j = 0; j < w.cols; ++j) wt.at(j, i) = w.at(i, j);
  SvdResult t = svd_tall(wt);
  SvdResult result;
  result.u = std::move(t.v);
  result.v = std::move(t.u);
  result.singular_values = std::move(t.singular_values);
  return result;
}

FactorizedLayer svd_truncate(const Matrix& weights, std::size_t rank) {
  const std::size_t k = std::min(weights.rows, weights.cols);
  if (rank < 1 || rank > k) raise(ErrorKind::invalid_argument, "svd_truncate: rank out of range");
  const SvdResult s = svd(weights);

  FactorizedLayer f;
  f.rank_r = rank;
  f.factor_a = Matrix(weights.rows, rank);
  f.factor_b = Matrix(rank, weights.cols);
  // Sigma is absorbed into A: A = U_r * Sigma_r, B = V_r^T.
  for (std::size_t i = 0; i < weights.rows; ++i)
    for (std::size_t r = 0; r < rank; ++r)
      f.factor_a.at(i, r) = static_cast<float>(s.u.at(i, r) * s.singular_values[r]);
  for (std::size_t r = 0; r < rank; ++r)
    for (std::size_t j = 0; j < weights.cols; ++j) f.factor_b.at(r, j) = s.v.at(j, r);
  return f;
}

RankPolicy ranks_for_param_ratio(const TdnnModel& model, double target_ratio) {
  if (!(target_ratio > 0.0 && target_ratio <= 1.0))
    raise(ErrorKind::invalid_argument, "ranks_for_param_ratio: ratio must be in (0, 1]");
  RankPolicy policy;
  for (const auto& l : model.layers) {
    if (l.kind != LayerKind::dense) raise(ErrorKind::invalid_argument, "ranks_for_param_ratio: model already factorized");
    const std::size_t m = l.weights.rows, n = l.weights.cols;
    // r * (m + n) = ratio * m * n
    auto r = static_cast<std::size_t>(std::llround(target_ratio * static_cast<double>(m) * static_cast<double>(n) /
                                                   static_cast<double>(m + n)));
    r = std::clamp<std::size_t>(r, 1, std::min(m, n));
    policy.push_back(r);
  }
  return policy;
}

FactorizeResult factorize_model(const TdnnModel& model, const RankPolicy& policy) {
  model.validate();
  if (policy.size() != model.layers.size())
    raise(ErrorKind::invalid_argument, "factorize_model: policy must name a rank per layer");

  FactorizeResult result;
  result.model = model;
  result.report.ranks = policy;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto& layer = result.model.layers[i];
    if (layer.kind != LayerKind::dense)
      raise(ErrorKind::invalid_argument, "factorize_model: layer " + std::to_string(i) + " already factorized");
    const std::size_t k = std::min(layer.weights.rows, layer.weights.cols);
    if (policy[i] < 1 || policy[i] > k)
      raise(ErrorKind::invalid_argument, "factorize_model: rank infeasible for layer " + std::to_string(i));
    result.report.params_before += layer.weights.size();
    FactorizedLayer f = svd_truncate(layer.weights, policy[i]);
    layer.kind = LayerKind::factorized;
    layer.rank = f.rank_r;
    layer.factor_a = std::move(f.factor_a);
    layer.factor_b = std::move(f.factor_b);
    layer.weights = Matrix();
    layer.stored_weight_q.reset();
    result.report.params_after += layer.weight_param_count();
  }
  result.report.ratio = static_cast<double>(result.report.params_after) / static_cast<double>(result.report.params_before);
  result.model.metadata["factorized"] = "svd";
  result.model.validate();
  return result;
}

}  // namespace tdnnq
