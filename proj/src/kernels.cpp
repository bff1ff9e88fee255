#include "attrgen/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace attrgen {
namespace kernels {

namespace {

std::atomic<bool> g_parallel{true};

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelThreshold = 16 * 1024;

bool use_parallel(std::size_t work) {
#ifdef _OPENMP
  if (!g_parallel.load(std::memory_order_relaxed)) return false;
  if (omp_in_parallel()) return false;  // avoid nested teams
  return work >= kParallelThreshold;
#else
  (void)work;
  return false;
#endif
}

inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& c, int i) {
  double* crow = c.row(i);
  std::memset(crow, 0, sizeof(double) * static_cast<std::size_t>(c.cols));
  for (int k = 0; k < a.cols; ++k) {
    const double av = a.at(i, k);
    const double* brow = b.row(k);
    for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
  }
}

inline void matmul_nt_row(const Matrix& a, const Matrix& b, Matrix& c, int i) {
  const double* arow = a.row(i);
  double* crow = c.row(i);
  for (int j = 0; j < b.rows; ++j) {
    const double* brow = b.row(j);
    double acc = 0.0;
    for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
    crow[j] = acc;
  }
}

// Row i of C = A^T B accumulates column i of A against rows of B.
inline void matmul_tn_row(const Matrix& a, const Matrix& b, Matrix& c, int i,
                          bool accumulate) {
  double* crow = c.row(i);
  if (!accumulate) {
    std::memset(crow, 0, sizeof(double) * static_cast<std::size_t>(c.cols));
  }
  for (int k = 0; k < a.rows; ++k) {
    const double av = a.at(k, i);
    const double* brow = b.row(k);
    for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
  }
}

inline void softmax_row(Matrix& m, int i, std::span<const unsigned char> mask) {
  double* row = m.row(i);
  const int n = m.cols;
  double mx = -1e308;
  for (int j = 0; j < n; ++j) {
    if (!mask.empty() && !mask[j]) continue;
    if (row[j] > mx) mx = row[j];
  }
  double sum = 0.0;
  for (int j = 0; j < n; ++j) {
    if (!mask.empty() && !mask[j]) {
      row[j] = 0.0;
      continue;
    }
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const double inv = 1.0 / sum;
  for (int j = 0; j < n; ++j) row[j] *= inv;
}

inline void softmax_row_causal(Matrix& m, int i, int offset) {
  double* row = m.row(i);
  const int live = std::min(m.cols, i + offset + 1);
  double mx = -1e308;
  for (int j = 0; j < live; ++j) {
    if (row[j] > mx) mx = row[j];
  }
  double sum = 0.0;
  for (int j = 0; j < live; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const double inv = 1.0 / sum;
  for (int j = 0; j < live; ++j) row[j] *= inv;
  for (int j = live; j < m.cols; ++j) row[j] = 0.0;
}

}  // namespace

void set_parallel(bool enabled) { g_parallel.store(enabled, std::memory_order_relaxed); }
bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

void matmul_serial(const Matrix& a, const Matrix& b, Matrix& c) {
  assert(a.cols == b.rows && c.rows == a.rows && c.cols == b.cols);
  for (int i = 0; i < a.rows; ++i) matmul_row(a, b, c, i);
}

void matmul_omp(const Matrix& a, const Matrix& b, Matrix& c) {
  assert(a.cols == b.rows && c.rows == a.rows && c.cols == b.cols);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < a.rows; ++i) matmul_row(a, b, c, i);
}

void matmul(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t work =
      static_cast<std::size_t>(a.rows) * a.cols * static_cast<std::size_t>(b.cols);
  if (use_parallel(work)) {
    matmul_omp(a, b, c);
  } else {
    matmul_serial(a, b, c);
  }
}

void matmul_nt_serial(const Matrix& a, const Matrix& b, Matrix& c) {
  assert(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows);
  for (int i = 0; i < a.rows; ++i) matmul_nt_row(a, b, c, i);
}

void matmul_nt_omp(const Matrix& a, const Matrix& b, Matrix& c) {
  assert(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < a.rows; ++i) matmul_nt_row(a, b, c, i);
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t work =
      static_cast<std::size_t>(a.rows) * a.cols * static_cast<std::size_t>(b.rows);
  if (use_parallel(work)) {
    matmul_nt_omp(a, b, c);
  } else {
    matmul_nt_serial(a, b, c);
  }
}

void matmul_tn_serial(const Matrix& a, const Matrix& b, Matrix& c) {
  assert(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols);
  for (int i = 0; i < a.cols; ++i) matmul_tn_row(a, b, c, i, false);
}

void matmul_tn_omp(const Matrix& a, const Matrix& b, Matrix& c) {
  assert(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < a.cols; ++i) matmul_tn_row(a, b, c, i, false);
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t work =
      static_cast<std::size_t>(a.rows) * a.cols * static_cast<std::size_t>(b.cols);
  if (use_parallel(work)) {
    matmul_tn_omp(a, b, c);
  } else {
    matmul_tn_serial(a, b, c);
  }
}

void matmul_tn_acc_serial(const Matrix& a, const Matrix& b, Matrix& c) {
  assert(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols);
  for (int i = 0; i < a.cols; ++i) matmul_tn_row(a, b, c, i, true);
}

void matmul_tn_acc_omp(const Matrix& a, const Matrix& b, Matrix& c) {
  assert(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < a.cols; ++i) matmul_tn_row(a, b, c, i, true);
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t work =
      static_cast<std::size_t>(a.rows) * a.cols * static_cast<std::size_t>(b.cols);
  if (use_parallel(work)) {
    matmul_tn_acc_omp(a, b, c);
  } else {
    matmul_tn_acc_serial(a, b, c);
  }
}

void softmax_rows_serial(Matrix& m, std::span<const unsigned char> mask) {
  assert(mask.empty() || static_cast<int>(mask.size()) == m.cols);
  for (int i = 0; i < m.rows; ++i) softmax_row(m, i, mask);
}

void softmax_rows_omp(Matrix& m, std::span<const unsigned char> mask) {
  assert(mask.empty() || static_cast<int>(mask.size()) == m.cols);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m.rows; ++i) softmax_row(m, i, mask);
}

void softmax_rows(Matrix& m, std::span<const unsigned char> mask) {
  const std::size_t work = m.size() * 4;
  if (use_parallel(work)) {
    softmax_rows_omp(m, mask);
  } else {
    softmax_rows_serial(m, mask);
  }
}

void softmax_rows_causal_serial(Matrix& m, int offset) {
  for (int i = 0; i < m.rows; ++i) softmax_row_causal(m, i, offset);
}

void softmax_rows_causal_omp(Matrix& m, int offset) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m.rows; ++i) softmax_row_causal(m, i, offset);
}

void softmax_rows_causal(Matrix& m, int offset) {
  const std::size_t work = m.size() * 4;
  if (use_parallel(work)) {
    softmax_rows_causal_omp(m, offset);
  } else {
    softmax_rows_causal_serial(m, offset);
  }
}

}  // namespace kernels

void add_row_vector(Matrix& m, const Matrix& bias) {
  assert(bias.rows == 1 && bias.cols == m.cols);
  for (int i = 0; i < m.rows; ++i) {
    double* row = m.row(i);
    const double* b = bias.row(0);
    for (int j = 0; j < m.cols; ++j) row[j] += b[j];
  }
}

void add_inplace(Matrix& dst, const Matrix& src) {
  assert(dst.same_shape(src));
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

void scale_inplace(Matrix& m, double s) {
  for (double& v : m.data) v *= s;
}

}  // namespace attrgen
