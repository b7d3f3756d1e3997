#include "pblab/kernels.hpp"

#if defined(PBLAB_HAVE_AVX2)

#include <immintrin.h>

#include <cmath>

// AVX2 variants. Each kernel walks the data in the same order as the scalar
// reference and uses separate mul/add (no FMA), div, and sqrt only, so every
// produced bit matches the reference. Ragged tails fall back to the scalar
// expression inside the same loop iteration.

namespace pblab::kernels {
namespace {

void gemm_acc_f32_avx2(const float* a, const float* b, float* c, int m, int k, int n) {
  const int n8 = n & ~7;
  for (int i = 0; i < m; ++i) {
    const float* ai = a + static_cast<std::size_t>(i) * k;
    float* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float ap = ai[p];
      const __m256 av = _mm256_set1_ps(ap);
      const float* bp = b + static_cast<std::size_t>(p) * n;
      int j = 0;
      for (; j < n8; j += 8) {
        const __m256 prod = _mm256_mul_ps(av, _mm256_loadu_ps(bp + j));
        _mm256_storeu_ps(ci + j, _mm256_add_ps(_mm256_loadu_ps(ci + j), prod));
      }
      for (; j < n; ++j) {
        ci[j] += ap * bp[j];
      }
    }
  }
}

void gemm_acc_f64_avx2(const double* a, const double* b, double* c, int m, int k, int n) {
  const int n4 = n & ~3;
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double ap = ai[p];
      const __m256d av = _mm256_set1_pd(ap);
      const double* bp = b + static_cast<std::size_t>(p) * n;
      int j = 0;
      for (; j < n4; j += 4) {
        const __m256d prod = _mm256_mul_pd(av, _mm256_loadu_pd(bp + j));
        _mm256_storeu_pd(ci + j, _mm256_add_pd(_mm256_loadu_pd(ci + j), prod));
      }
      for (; j < n; ++j) {
        ci[j] += ap * bp[j];
      }
    }
  }
}

void add_f32_avx2(float* y, const float* x, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), _mm256_loadu_ps(x + i)));
  }
  for (; i < n; ++i) y[i] += x[i];
}

void add_f64_avx2(double* y, const double* x, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) y[i] += x[i];
}

void axpy_f32_avx2(float s, const float* x, float* y, std::size_t n) {
  const __m256 sv = _mm256_set1_ps(s);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 prod = _mm256_mul_ps(sv, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i) y[i] += s * x[i];
}

void axpy_f64_avx2(double s, const double* x, double* y, std::size_t n) {
  const __m256d sv = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(sv, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += s * x[i];
}

void colsum_acc_f32_avx2(const float* g, float* out, int rows, int cols) {
  const int c8 = cols & ~7;
  for (int i = 0; i < rows; ++i) {
    const float* gi = g + static_cast<std::size_t>(i) * cols;
    int j = 0;
    for (; j < c8; j += 8) {
      _mm256_storeu_ps(out + j, _mm256_add_ps(_mm256_loadu_ps(out + j), _mm256_loadu_ps(gi + j)));
    }
    for (; j < cols; ++j) out[j] += gi[j];
  }
}

void colsum_acc_f64_avx2(const double* g, double* out, int rows, int cols) {
  const int c4 = cols & ~3;
  for (int i = 0; i < rows; ++i) {
    const double* gi = g + static_cast<std::size_t>(i) * cols;
    int j = 0;
    for (; j < c4; j += 4) {
      _mm256_storeu_pd(out + j, _mm256_add_pd(_mm256_loadu_pd(out + j), _mm256_loadu_pd(gi + j)));
    }
    for (; j < cols; ++j) out[j] += gi[j];
  }
}

void adamw_f32_avx2(float* p, const float* g, float* m, float* v, std::size_t n,
                    float lr, float beta1, float beta2, float eps, float wd,
                    float c1, float c2) {
  const float omb1 = 1.0f - beta1;
  const float omb2 = 1.0f - beta2;
  const __m256 b1v = _mm256_set1_ps(beta1);
  const __m256 b2v = _mm256_set1_ps(beta2);
  const __m256 o1v = _mm256_set1_ps(omb1);
  const __m256 o2v = _mm256_set1_ps(omb2);
  const __m256 c1v = _mm256_set1_ps(c1);
  const __m256 c2v = _mm256_set1_ps(c2);
  const __m256 epsv = _mm256_set1_ps(eps);
  const __m256 lrv = _mm256_set1_ps(lr);
  const __m256 wdv = _mm256_set1_ps(wd);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 gi = _mm256_loadu_ps(g + i);
    const __m256 mi = _mm256_add_ps(_mm256_mul_ps(b1v, _mm256_loadu_ps(m + i)),
                                    _mm256_mul_ps(o1v, gi));
    const __m256 vi = _mm256_add_ps(_mm256_mul_ps(b2v, _mm256_loadu_ps(v + i)),
                                    _mm256_mul_ps(o2v, _mm256_mul_ps(gi, gi)));
    _mm256_storeu_ps(m + i, mi);
    _mm256_storeu_ps(v + i, vi);
    const __m256 num = _mm256_mul_ps(mi, c1v);
    const __m256 den = _mm256_add_ps(_mm256_sqrt_ps(_mm256_mul_ps(vi, c2v)), epsv);
    const __m256 pi = _mm256_loadu_ps(p + i);
    const __m256 upd = _mm256_add_ps(_mm256_div_ps(num, den), _mm256_mul_ps(wdv, pi));
    _mm256_storeu_ps(p + i, _mm256_sub_ps(pi, _mm256_mul_ps(lrv, upd)));
  }
  for (; i < n; ++i) {
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

const Table* avx2_table() {
  static const Table t{
      gemm_acc_f32_avx2, gemm_acc_f64_avx2,
      add_f32_avx2,      add_f64_avx2,
      axpy_f32_avx2,     axpy_f64_avx2,
      colsum_acc_f32_avx2, colsum_acc_f64_avx2,
      adamw_f32_avx2,
  };
  return &t;
}

}  // namespace pblab::kernels

#else

namespace pblab::kernels {
const Table* avx2_table() { return nullptr; }
}  // namespace pblab::kernels

#endif  // PBLAB_HAVE_AVX2
