#include "pblab/kernels.hpp"

#include <cmath>

// Reference kernels. Loop orders here define the numeric contract: the AVX2
// variants must replay the exact same per-element operation sequence.

namespace pblab::kernels {
namespace {

void gemm_acc_f32_scalar(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* ai = a + static_cast<std::size_t>(i) * k;
    float* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float ap = ai[p];
      const float* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) {
        ci[j] += ap * bp[j];
      }
    }
  }
}

void gemm_acc_f64_scalar(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double ap = ai[p];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) {
        ci[j] += ap * bp[j];
      }
    }
  }
}

void add_f32_scalar(float* y, const float* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += x[i];
}

void add_f64_scalar(double* y, const double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += x[i];
}

void axpy_f32_scalar(float s, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += s * x[i];
}

void axpy_f64_scalar(double s, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += s * x[i];
}

void colsum_acc_f32_scalar(const float* g, float* out, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    const float* gi = g + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) out[j] += gi[j];
  }
}

void colsum_acc_f64_scalar(const double* g, double* out, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    const double* gi = g + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) out[j] += gi[j];
  }
}

void adamw_f32_scalar(float* p, const float* g, float* m, float* v, std::size_t n,
                      float lr, float beta1, float beta2, float eps, float wd,
                      float c1, float c2) {
  const float omb1 = 1.0f - beta1;
  const float omb2 = 1.0f - beta2;
  for (std::size_t i = 0; i < n; ++i) {
    const float gi = g[i];
    const float mi = beta1 * m[i] + omb1 * gi;
    const float vi = beta2 * v[i] + omb2 * (gi * gi);
    m[i] = mi;
    v[i] = vi;
    const float num = mi * c1;
    const float den = std::sqrt(vi * c2) + eps;
    p[i] = p[i] - lr * (num / den + wd * p[i]);
  }
}

}  // namespace

const Table& scalar_table() {
  static const Table t{
      gemm_acc_f32_scalar, gemm_acc_f64_scalar,
      add_f32_scalar,      add_f64_scalar,
      axpy_f32_scalar,     axpy_f64_scalar,
      colsum_acc_f32_scalar, colsum_acc_f64_scalar,
      adamw_f32_scalar,
  };
  return t;
}

}  // namespace pblab::kernels
