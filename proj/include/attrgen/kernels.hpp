#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace attrgen {

// Dense row-major matrix of doubles. Vectors are 1xN or Nx1 as convenient.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  std::span<double> row_span(int r) { return {row(r), static_cast<std::size_t>(cols)}; }
  std::span<const double> row_span(int r) const {
    return {row(r), static_cast<std::size_t>(cols)};
  }

  std::size_t size() const { return data.size(); }
  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Matrix& o) const {
    return rows == o.rows && cols == o.cols && data == o.data;
  }
};

// Hot numeric kernels. Each has a serial reference implementation and an
// OpenMP variant parallelized over independent output rows, so every output
// element is accumulated in the same order in both paths and results are
// bit-identical regardless of thread count. The undecorated names dispatch
// at runtime.
namespace kernels {

void set_parallel(bool enabled);
bool parallel_enabled();

// C = A * B
void matmul_serial(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_omp(const Matrix& a, const Matrix& b, Matrix& c);
void matmul(const Matrix& a, const Matrix& b, Matrix& c);

// C = A * B^T
void matmul_nt_serial(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_nt_omp(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c);

// C = A^T * B
void matmul_tn_serial(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_tn_omp(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c);

// C += A^T * B (gradient accumulation form)
void matmul_tn_acc_serial(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_tn_acc_omp(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c);

// In-place row-wise softmax. Entries where mask[j] == 0 come out exactly 0
// and are excluded from the max. mask may be empty (all live).
void softmax_rows_serial(Matrix& m, std::span<const unsigned char> mask = {});
void softmax_rows_omp(Matrix& m, std::span<const unsigned char> mask = {});
void softmax_rows(Matrix& m, std::span<const unsigned char> mask = {});

// Causal variant: row i normalizes over columns 0..i+offset, the rest are 0.
// offset > 0 lets a length-q suffix attend over a length-(q+offset) history.
void softmax_rows_causal_serial(Matrix& m, int offset = 0);
void softmax_rows_causal_omp(Matrix& m, int offset = 0);
void softmax_rows_causal(Matrix& m, int offset = 0);

}  // namespace kernels

// Small helpers used throughout the model code (serial; negligible cost).
void add_row_vector(Matrix& m, const Matrix& bias);       // bias is 1 x cols
void add_inplace(Matrix& dst, const Matrix& src);         // dst += src
void scale_inplace(Matrix& m, double s);

}  // namespace attrgen
