// Benchmark comparing the serial reference kernels against their OpenMP
// variants.  Prints one row per (kernel, shape): timings, speedup, and a
// bitwise-equality check of the two results.

#include <array>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#include <omp.h>

#include "attrgen/kernels.hpp"
#include "attrgen/rng.hpp"

using attrgen::Matrix;
using attrgen::Rng;

namespace {

Matrix random_matrix(int rows, int cols, Rng& rng) {
  Matrix m(rows, cols);
  for (auto& x : m.data) x = rng.next_normal();
  return m;
}

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm-up
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto stop = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(stop - start).count() / reps;
}

struct Case {
  std::string name;
  std::function<void(const Matrix&, const Matrix&, Matrix&)> serial;
  std::function<void(const Matrix&, const Matrix&, Matrix&)> omp;
  bool transpose_b;  // shapes B as (cols x inner) instead of (inner x cols)
};

}  // namespace

int main(int argc, char** argv) {
  int reps = 5;
  if (argc > 1) reps = std::atoi(argv[1]);

  const std::vector<std::array<int, 3>> shapes = {
      {64, 64, 64}, {128, 128, 128}, {256, 256, 256}, {384, 96, 384}};

  const std::vector<Case> cases = {
      {"matmul", attrgen::kernels::matmul_serial, attrgen::kernels::matmul_omp, false},
      {"matmul_nt", attrgen::kernels::matmul_nt_serial, attrgen::kernels::matmul_nt_omp, true},
      {"matmul_tn", attrgen::kernels::matmul_tn_serial, attrgen::kernels::matmul_tn_omp, false},
  };

  std::printf("threads: %d\n", omp_get_max_threads());
  std::printf("%-10s %-16s %12s %12s %9s %8s\n", "kernel", "shape", "serial(ms)", "omp(ms)",
              "speedup", "equal");

  Rng rng(7);
  bool all_equal = true;
  for (const auto& c : cases) {
    for (const auto& s : shapes) {
      const int m = s[0], k = s[1], n = s[2];
      // matmul_tn computes C = A^T B, so A is stored (k x m).
      const bool ta = c.name == "matmul_tn";
      Matrix a = random_matrix(ta ? k : m, ta ? m : k, rng);
      Matrix b = random_matrix(c.transpose_b ? n : k, c.transpose_b ? k : n, rng);
      Matrix out_serial(m, n), out_omp(m, n);

      const double t_serial = time_ms([&] { c.serial(a, b, out_serial); }, reps);
      const double t_omp = time_ms([&] { c.omp(a, b, out_omp); }, reps);
      const bool equal = out_serial == out_omp;
      all_equal = all_equal && equal;

      char shape[32];
      std::snprintf(shape, sizeof(shape), "%dx%dx%d", m, k, n);
      std::printf("%-10s %-16s %12.3f %12.3f %8.2fx %8s\n", c.name.c_str(), shape, t_serial,
                  t_omp, t_serial / t_omp, equal ? "yes" : "NO");
    }
  }

  // Softmax has no second operand; bench it separately.
  for (const int rows : {256, 1024}) {
    Matrix base = random_matrix(rows, 128, rng);
    Matrix m_serial = base, m_omp = base;
    const double t_serial = time_ms(
        [&] {
          m_serial = base;
          attrgen::kernels::softmax_rows_serial(m_serial);
        },
        reps);
    const double t_omp = time_ms(
        [&] {
          m_omp = base;
          attrgen::kernels::softmax_rows_omp(m_omp);
        },
        reps);
    const bool equal = m_serial == m_omp;
    all_equal = all_equal && equal;
    char shape[32];
    std::snprintf(shape, sizeof(shape), "%dx128", rows);
    std::printf("%-10s %-16s %12.3f %12.3f %8.2fx %8s\n", "softmax", shape, t_serial, t_omp,
                t_serial / t_omp, equal ? "yes" : "NO");
  }

  if (!all_equal) {
    std::printf("FAIL: OpenMP kernels diverged from the serial reference\n");
    return 1;
  }
  return 0;
}
