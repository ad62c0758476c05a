// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "common/error.hpp"

namespace tdnnq {

// Dense row-major float32 matrix. Frames-as-rows throughout the library.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

  std::size_t size() const { return rows * cols; }
  float* row(std::size_t r) { return data.data() + r * cols; }
  const float* row(std::size_t r) const { return data.data() + r * cols; }
  float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  void fill(float v) { data.assign(data.size(), v); }
};

// out[i][k] = sum_j a[i][j] * b[k][j]   (a: m x n, b: p x n -> m x p)
// Row-by-row dot products keep both operands contiguous.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) raise(ErrorKind::dimension, "matmul_nt: inner dimensions differ");
  Matrix out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const float* ai = a.row(i);
    float* oi = out.row(i);
    for (std::size_t k = 0; k < b.rows; ++k) {
      const float* bk = b.row(k);
      float acc = 0.0f;
      for (std::size_t j = 0; j < a.cols; ++j) acc += ai[j] * bk[j];
      oi[k] = acc;
    }
  }
  return out;
}

// out[i][k] = sum_j a[i][j] * b[j][k]   (a: m x n, b: n x p -> m x p)
inline Matrix matmul_nn(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) raise(ErrorKind::dimension, "matmul_nn: inner dimensions differ");
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const float* ai = a.row(i);
    float* oi = out.row(i);
    for (std::size_t j = 0; j < a.cols; ++j) {
      const float aij = ai[j];
      const float* bj = b.row(j);
      for (std::size_t k = 0; k < b.cols; ++k) oi[k] += aij * bj[k];
    }
  }
  return out;
}

// out[j][k] = sum_i a[i][j] * b[i][k]   (a: m x n, b: m x p -> n x p)
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) raise(ErrorKind::dimension, "matmul_tn: leading dimensions differ");
  Matrix out(a.cols, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const float* ai = a.row(i);
    const float* bi = b.row(i);
    for (std::size_t j = 0; j < a.cols; ++j) {
      const float aij = ai[j];
      float* oj = out.row(j);
      for (std::size_t k = 0; k < b.cols; ++k) oj[k] += aij * bi[k];
    }
  }
  return out;
}

}  // namespace tdnnq
