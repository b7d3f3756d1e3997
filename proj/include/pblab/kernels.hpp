#pragma once

#include <cstddef>
#include <string>

namespace pblab::kernels {

// Row-major numeric building blocks behind the tensor ops. Every entry point
// has a scalar reference implementation and, on x86-64 hosts with AVX2, a
// vector implementation selected at runtime. The two paths are bitwise
// equivalent: the vector kernels keep the reference accumulation order and
// use only correctly-rounded instructions (mul, add, div, sqrt; no FMA), so
// switching backends never changes results.

enum class Backend { scalar, avx2 };

struct Table {
  // c (m x n) += a (m x k) * b (k x n)
  void (*gemm_acc_f32)(const float* a, const float* b, float* c, int m, int k, int n);
  void (*gemm_acc_f64)(const double* a, const double* b, double* c, int m, int k, int n);
  // y += x
  void (*add_f32)(float* y, const float* x, std::size_t n);
  void (*add_f64)(double* y, const double* x, std::size_t n);
  // y += s * x
  void (*axpy_f32)(float s, const float* x, float* y, std::size_t n);
  void (*axpy_f64)(double s, const double* x, double* y, std::size_t n);
  // out[j] += sum_i g[i * cols + j]
  void (*colsum_acc_f32)(const float* g, float* out, int rows, int cols);
  void (*colsum_acc_f64)(const double* g, double* out, int rows, int cols);
  // Decoupled-weight-decay Adam step over one parameter buffer.
  // c1 = 1/(1 - beta1^t), c2 = 1/(1 - beta2^t).
  void (*adamw_f32)(float* p, const float* g, float* m, float* v, std::size_t n,
                    float lr, float beta1, float beta2, float eps, float wd,
                    float c1, float c2);
};

const Table& active();
Backend active_backend();
void set_backend(Backend b);  // throws std::runtime_error if unsupported here
bool avx2_supported();
std::string backend_name(Backend b);

const Table& scalar_table();
const Table* avx2_table();  // nullptr when not compiled in

}  // namespace pblab::kernels
