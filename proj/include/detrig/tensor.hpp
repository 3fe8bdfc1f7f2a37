#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace detrig {

// Dense row-major matrix of doubles. Sized for model tensors in the
// hundreds-of-KB range; no BLAS, loops are fast enough at this scale.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y = M x  (rows x cols) * (cols) -> (rows)
inline void matvec(const Matrix& m, const double* x, double* y) {
  for (std::size_t i = 0; i < m.rows; ++i) y[i] = dot(m.row(i), x, m.cols);
}

// y = M^T x  (rows x cols)^T * (rows) -> (cols)
inline void matvec_t(const Matrix& m, const double* x, double* y) {
  for (std::size_t j = 0; j < m.cols; ++j) y[j] = 0.0;
  for (std::size_t i = 0; i < m.rows; ++i) axpy(x[i], m.row(i), y, m.cols);
}

// std::vector conveniences; sizes come from the vector arguments.
inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  assert(a.size() == b.size());
  return dot(a.data(), b.data(), a.size());
}

inline double dot(const std::vector<double>& a, const double* b) {
  return dot(a.data(), b, a.size());
}

inline void axpy(double alpha, const std::vector<double>& x, std::vector<double>& y) {
  assert(x.size() == y.size());
  axpy(alpha, x.data(), y.data(), x.size());
}

inline void axpy(double alpha, const std::vector<double>& x, double* y) {
  axpy(alpha, x.data(), y, x.size());
}

inline void axpy(double alpha, const double* x, std::vector<double>& y) {
  axpy(alpha, x, y.data(), y.size());
}

inline void matvec(const Matrix& m, const std::vector<double>& x, std::vector<double>& y) {
  assert(x.size() == m.cols && y.size() == m.rows);
  matvec(m, x.data(), y.data());
}

inline void matvec_t(const Matrix& m, const std::vector<double>& x, std::vector<double>& y) {
  assert(x.size() == m.rows && y.size() == m.cols);
  matvec_t(m, x.data(), y.data());
}

}  // namespace detrig
