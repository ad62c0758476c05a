// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>

#include "kernels/int_kernels.hpp"
#include "quant/quant_core.hpp"
#include "test_util.hpp"

using namespace tdnnq;
using tdnnq::test::near_rel;

namespace {

// Independent float oracle: dequantize both operands in double and multiply
// with a float64 accumulator, never touching the integer decomposition.
Matrix oracle_matmul(const QuantizedTensor& q_acts, const QuantizedTensor& q_weights) {
  const std::size_t frames = q_acts.shape[0];
  const std::size_t inner = q_acts.shape[1];
  const std::size_t out_dim = q_weights.shape[0];
  Matrix out(frames, out_dim);
  for (std::size_t i = 0; i < frames; ++i) {
    for (std::size_t k = 0; k < out_dim; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < inner; ++j) {
        const double a = q_acts.params.scale * (q_acts.data[i * inner + j] - q_acts.params.zero_point);
        const double w = q_weights.params.scale * (q_weights.data[k * inner + j] - q_weights.params.zero_point);
        acc += a * w;
      }
      out.at(i, k) = static_cast<float>(acc);
    }
  }
  return out;
}

QuantizedTensor random_q_tensor(Rng& rng, std::size_t rows, std::size_t cols, const QuantParams& p) {
  QuantizedTensor q;
  q.params = p;
  q.shape = {rows, cols};
  q.data.resize(rows * cols);
  for (auto& v : q.data) v = static_cast<std::int32_t>(rng.next_int(p.q_min(), p.q_max()));
  return q;
}

QuantParams params_with_zero_point(Rng& rng, QuantMode mode, double scale) {
  QuantParams p;
  p.bits = QuantBits::b8;
  p.mode = mode;
  p.scale = scale;
  p.zero_point = mode == QuantMode::symmetric ? 0 : static_cast<std::int32_t>(rng.next_int(0, 127));
  return p;
}

}  // namespace

TEST_CASE("build_plan precomputes column sums and constants") {
  Rng rng(11);
  Matrix w = tdnnq::test::random_matrix(rng, 6, 9);
  const QuantParams wp = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  const QuantParams ap = compute_qparams({0.0, 2.0}, QuantBits::b8, QuantMode::asymmetric);
  const IntConvPlan plan = build_plan(w, wp, ap);

  CHECK(plan.out_dim == 6);
  CHECK(plan.inner_dim == 9);
  // a2 must be recomputable from the quantized weights.
  for (std::size_t k = 0; k < plan.out_dim; ++k) {
    std::int64_t s = 0;
    for (std::size_t j = 0; j < plan.inner_dim; ++j) s += plan.weight_at(k, j);
    CHECK(plan.col_sums_a2[k] == s);
  }
  CHECK(plan.const_nz1z2 == 9LL * ap.zero_point * wp.zero_point);
  CHECK(plan.multiplier_m == doctest::Approx(wp.scale * ap.scale).epsilon(1e-15));
}

TEST_CASE("build_plan on all-zero weights") {
  Matrix w(4, 5, 0.0f);
  const QuantParams p = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  const IntConvPlan plan = build_plan(w, p, p);
  for (auto s : plan.col_sums_a2) CHECK(s == 0);
}

TEST_CASE("build_plan 1x1 multiplier") {
  Matrix w(1, 1);
  w.at(0, 0) = 1.0f;
  const QuantParams p = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  const IntConvPlan plan = build_plan(w, p, p);
  CHECK(plan.multiplier_m == doctest::Approx((2.0 / 254.0) * (2.0 / 254.0)).epsilon(1e-15));
}

TEST_CASE("build_plan rejects inner dimensions that risk int32 overflow") {
  Matrix w(1, 200000, 0.0f);
  const QuantParams p8 = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  CHECK_THROWS_AS(build_plan(w, p8, p8), Error);
  // int16 plans accumulate in 64 bits and accept the same width.
  const QuantParams p16 = compute_qparams({-1.0, 1.0}, QuantBits::b16, QuantMode::symmetric);
  const IntConvPlan plan = build_plan(w, p16, p16);
  CHECK(plan.inner_dim == 200000);
}

TEST_CASE("zero-point decomposition identity holds exactly") {
  // N*Z1*Z2 - Z1*a2 - Z2*a1 + sum q1*q2 == sum (q1-Z1)*(q2-Z2), in exact
  // integer arithmetic, for arbitrary int8 data and zero points.
  Rng rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = static_cast<std::size_t>(rng.next_int(1, 64));
    const std::int64_t z1 = rng.next_int(-127, 127);
    const std::int64_t z2 = rng.next_int(-127, 127);
    std::vector<std::int64_t> q1(n), q2(n);
    for (auto& v : q1) v = rng.next_int(-127, 127);
    for (auto& v : q2) v = rng.next_int(-127, 127);

    std::int64_t a1 = 0, a2 = 0, prod = 0, direct = 0;
    for (std::size_t j = 0; j < n; ++j) {
      a1 += q1[j];
      a2 += q2[j];
      prod += q1[j] * q2[j];
      direct += (q1[j] - z1) * (q2[j] - z2);
    }
    const std::int64_t decomposed = static_cast<std::int64_t>(n) * z1 * z2 - z1 * a2 - z2 * a1 + prod;
    CHECK(decomposed == direct);
  }
}

TEST_CASE("int_matmul_float_out matches the dequantize-then-matmul oracle") {
  Rng rng(456);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t frames = static_cast<std::size_t>(rng.next_int(1, 8));
    const std::size_t inner = static_cast<std::size_t>(rng.next_int(1, 96));
    const std::size_t out_dim = static_cast<std::size_t>(rng.next_int(1, 8));

    const auto mode1 = trial % 2 ? QuantMode::asymmetric : QuantMode::symmetric;
    const auto mode2 = trial % 3 ? QuantMode::symmetric : QuantMode::asymmetric;
    const QuantParams ap = params_with_zero_point(rng, mode1, rng.next_uniform(0.001, 0.1));
    const QuantParams wp = params_with_zero_point(rng, mode2, rng.next_uniform(0.001, 0.1));

    const QuantizedTensor q_acts = random_q_tensor(rng, frames, inner, ap);
    const QuantizedTensor q_w = random_q_tensor(rng, out_dim, inner, wp);

    Matrix w_float(out_dim, inner);
    for (std::size_t i = 0; i < w_float.size(); ++i) w_float.data[i] = dequantize_value(q_w.data[i], wp);

    const IntConvPlan plan = build_plan(w_float, wp, ap);
    const ActRowSums a1 = compute_row_sums(q_acts, inner);
    const Matrix got = int_matmul_float_out(plan, q_acts, a1);
    const Matrix want = oracle_matmul(q_acts, plan.q_weights);

    for (std::size_t i = 0; i < got.size(); ++i) CHECK(near_rel(got.data[i], want.data[i], 1e-5, 1e-9));
  }
}

TEST_CASE("oracle equivalence holds at inner dimension 1024") {
  Rng rng(1024);
  const std::size_t inner = 1024;
  const QuantParams ap = params_with_zero_point(rng, QuantMode::asymmetric, 0.01);
  const QuantParams wp = params_with_zero_point(rng, QuantMode::asymmetric, 0.02);
  const QuantizedTensor q_acts = random_q_tensor(rng, 4, inner, ap);
  const QuantizedTensor q_w = random_q_tensor(rng, 6, inner, wp);
  Matrix w_float(6, inner);
  for (std::size_t i = 0; i < w_float.size(); ++i) w_float.data[i] = dequantize_value(q_w.data[i], wp);

  const IntConvPlan plan = build_plan(w_float, wp, ap);
  const Matrix got = int_matmul_float_out(plan, q_acts, compute_row_sums(q_acts, inner));
  const Matrix want = oracle_matmul(q_acts, plan.q_weights);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(near_rel(got.data[i], want.data[i], 1e-5, 1e-9));
}

TEST_CASE("int_matmul_float_out on zero activations with zero zero-points") {
  Matrix w(3, 4);
  Rng rng(5);
  w = tdnnq::test::random_matrix(rng, 3, 4);
  const QuantParams p = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  const IntConvPlan plan = build_plan(w, p, p);
  QuantizedTensor q;
  q.params = p;
  q.shape = {2, 4};
  q.data.assign(8, 0);
  const Matrix out = int_matmul_float_out(plan, q, compute_row_sums(q, 4));
  for (float v : out.data) CHECK(v == 0.0f);
}

TEST_CASE("zero zero-points reduce the float-output matmul to M * sum q1*q2") {
  Rng rng(777);
  const std::size_t inner = 16;
  const QuantParams p = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  Matrix w = tdnnq::test::random_matrix(rng, 2, inner);
  const IntConvPlan plan = build_plan(w, p, p);
  const QuantizedTensor q_acts = random_q_tensor(rng, 3, inner, p);
  const Matrix out = int_matmul_float_out(plan, q_acts, compute_row_sums(q_acts, inner));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      std::int64_t s = 0;
      for (std::size_t j = 0; j < inner; ++j) s += q_acts.data[i * inner + j] * plan.weight_at(k, j);
      CHECK(out.at(i, k) == static_cast<float>(plan.multiplier_m * static_cast<double>(s)));
    }
  }
}

TEST_CASE("int_matmul_requant requires output params and matches the requantized formula") {
  Rng rng(31337);
  const std::size_t inner = 24;
  const QuantParams ap = params_with_zero_point(rng, QuantMode::asymmetric, 0.02);
  const QuantParams wp = compute_qparams({-0.8, 0.8}, QuantBits::b8, QuantMode::symmetric);
  Matrix w = tdnnq::test::random_matrix(rng, 4, inner, -0.8, 0.8);

  const IntConvPlan no_out = build_plan(w, wp, ap);
  QuantizedTensor q_acts = random_q_tensor(rng, 5, inner, ap);
  const ActRowSums a1 = compute_row_sums(q_acts, inner);
  CHECK_THROWS_AS(int_matmul_requant(no_out, q_acts, a1), Error);

  const QuantParams op = compute_qparams({-2.0, 2.0}, QuantBits::b8, QuantMode::asymmetric);
  const IntConvPlan plan = build_plan(w, wp, ap, op);
  const QuantizedTensor q3 = int_matmul_requant(plan, q_acts, a1);
  q3.validate();

  // Oracle: float product of dequantized operands, requantized. Error is
  // bounded by half an output step plus the multiplier rounding slack.
  const Matrix want = oracle_matmul(q_acts, plan.q_weights);
  for (std::size_t i = 0; i < q3.data.size(); ++i) {
    const double got = op.scale * (q3.data[i] - op.zero_point);
    const double clamped_want = std::clamp(static_cast<double>(want.data[i]), op.real_min(), op.real_max());
    CHECK(std::abs(got - clamped_want) <= op.scale / 2.0 + std::abs(want.data[i]) * 1e-6 + 1e-9);
  }
}

TEST_CASE("int_matmul_requant zero core yields the output zero-point") {
  Matrix w(2, 3, 0.5f);
  const QuantParams p = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  const QuantParams op = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::asymmetric);
  const IntConvPlan plan = build_plan(w, p, p, op);
  QuantizedTensor q;
  q.params = p;
  q.shape = {2, 3};
  q.data.assign(6, 0);
  const QuantizedTensor q3 = int_matmul_requant(plan, q, compute_row_sums(q, 3));
  for (auto v : q3.data) CHECK(v == op.zero_point);
}

TEST_CASE("int_matmul_requant saturates at q_max") {
  Matrix w(1, 2, 1.0f);
  const QuantParams p = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  QuantParams op = compute_qparams({-1e-4, 1e-4}, QuantBits::b8, QuantMode::symmetric);
  const IntConvPlan plan = build_plan(w, p, p, op);
  QuantizedTensor q;
  q.params = p;
  q.shape = {1, 2};
  q.data = {127, 127};
  const QuantizedTensor q3 = int_matmul_requant(plan, q, compute_row_sums(q, 2));
  CHECK(q3.data[0] == op.q_max());
}

TEST_CASE("conv1d_int single-tap identity matches a float convolution oracle") {
  Rng rng(2024);
  const std::size_t dim = 6;
  Matrix w(dim, dim, 0.0f);
  for (std::size_t i = 0; i < dim; ++i) w.at(i, i) = 1.0f;
  const QuantParams p = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  const IntConvPlan plan = build_plan(w, p, p);

  Matrix x = tdnnq::test::random_matrix(rng, 10, dim);
  QuantizedTensor q = quantize(std::span<const float>(x.data), p);
  q.shape = {10, dim};
  const Matrix out = conv1d_int(plan, q);

  // Identity weights snap to the grid exactly, so the convolution must
  // reproduce the dequantized input.
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float want = dequantize_value(q.data[i], p);
    CHECK(near_rel(out.data[i], want, 1e-5, 1e-9));
  }
}

TEST_CASE("conv1d_int with zero input and zero zero-point is zero") {
  Matrix w(3, 6, 0.25f);
  const QuantParams p = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  const IntConvPlan plan = build_plan(w, p, p);
  QuantizedTensor q;
  q.params = p;
  q.shape = {4, 6};
  q.data.assign(24, 0);
  const Matrix out = conv1d_int(plan, q);
  for (float v : out.data) CHECK(v == 0.0f);
}

TEST_CASE("conv1d_int over a 3-frame context matches a hand-spliced matmul") {
  // 2-dim frames, context {-1, 0, 1}: splice by hand, then compare against
  // the float path on dequantized operands.
  Rng rng(99);
  const std::size_t frame_dim = 2, frames = 5, ctx = 3;
  Matrix raw = tdnnq::test::random_matrix(rng, frames, frame_dim);
  Matrix spliced(frames, frame_dim * ctx);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t c = 0; c < ctx; ++c) {
      std::int64_t src = std::clamp<std::int64_t>(static_cast<std::int64_t>(t) + static_cast<std::int64_t>(c) - 1, 0,
                                                  frames - 1);
      for (std::size_t d = 0; d < frame_dim; ++d) spliced.at(t, c * frame_dim + d) = raw.at(static_cast<std::size_t>(src), d);
    }

  Matrix w = tdnnq::test::random_matrix(rng, 4, frame_dim * ctx);
  const QuantParams p = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  const IntConvPlan plan = build_plan(w, p, p);
  QuantizedTensor q = quantize(std::span<const float>(spliced.data), p);
  q.shape = {frames, frame_dim * ctx};
  const Matrix got = conv1d_int(plan, q);
  const Matrix want = oracle_matmul(q, plan.q_weights);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(near_rel(got.data[i], want.data[i], 1e-5, 1e-9));
}

TEST_CASE("int32 accumulation agrees with a 64-bit shadow within the bound") {
  // Every prefix of the int8 product sum stays inside int32; verify against
  // a widened shadow computation on adversarial same-sign data.
  Rng rng(4242);
  for (std::size_t n : {16u, 1024u, 4096u}) {
    std::vector<std::int32_t> q1(n), q2(n);
    for (std::size_t j = 0; j < n; ++j) {
      q1[j] = 127;
      q2[j] = j % 2 ? 127 : -127;
    }
    // Random tail to mix signs.
    for (std::size_t j = 0; j < n / 2; ++j) q2[rng.next_index(n)] = static_cast<std::int32_t>(rng.next_int(-127, 127));

    std::int32_t acc32 = 0;
    std::int64_t acc64 = 0;
    for (std::size_t j = 0; j < n; ++j) {
      acc32 += q1[j] * q2[j];
      acc64 += static_cast<std::int64_t>(q1[j]) * q2[j];
      CHECK(std::abs(acc64) < (1LL << 31));
    }
    CHECK(acc32 == acc64);
  }
}

TEST_CASE("plans are reusable: a2 is input independent") {
  Rng rng(31415);
  Matrix w = tdnnq::test::random_matrix(rng, 3, 8);
  const QuantParams p = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  const IntConvPlan plan = build_plan(w, p, p);
  const auto a2_before = plan.col_sums_a2;
  for (int trial = 0; trial < 5; ++trial) {
    const QuantizedTensor q = random_q_tensor(rng, 4, 8, p);
    (void)conv1d_int(plan, q);
    CHECK(plan.col_sums_a2 == a2_before);
  }
}

TEST_CASE("dimension mismatches are rejected") {
  Rng rng(1);
  Matrix w = tdnnq::test::random_matrix(rng, 3, 8);
  const QuantParams p = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  const IntConvPlan plan = build_plan(w, p, p);
  QuantizedTensor q = random_q_tensor(rng, 2, 7, p);
  CHECK_THROWS_AS(conv1d_int(plan, q), Error);
}
