#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <vector>

#include "pblab/kernels.hpp"
#include "pblab/rng.hpp"

using namespace pblab;

namespace {

template <typename T>
std::vector<T> random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.normal() * scale);
  return v;
}

template <typename T>
bool bitwise_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace

TEST_CASE("gemm matches a double-accumulated reference") {
  Rng rng(11);
  const int m = 13, k = 29, n = 17;
  const auto a = random_vec<float>(rng, static_cast<std::size_t>(m) * k);
  const auto b = random_vec<float>(rng, static_cast<std::size_t>(k) * n);
  std::vector<float> c(static_cast<std::size_t>(m) * n, 0.0f);
  kernels::scalar_table().gemm_acc_f32(a.data(), b.data(), c.data(), m, k, n);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += static_cast<double>(a[i * k + p]) * b[p * n + j];
      CHECK(c[i * n + j] == doctest::Approx(acc).epsilon(1e-4));
    }
  }
}

TEST_CASE("avx2 kernels are bitwise equal to the scalar reference") {
  if (!kernels::avx2_supported()) return;  // nothing to compare on this host
  const auto& s = kernels::scalar_table();
  const auto& v = *kernels::avx2_table();
  Rng rng(42);

  // Ragged sizes on purpose: tails must take the same scalar path.
  for (int m : {1, 3, 8}) {
    for (int k : {1, 7, 32}) {
      for (int n : {1, 5, 8, 13, 64, 70}) {
        const auto a32 = random_vec<float>(rng, static_cast<std::size_t>(m) * k);
        const auto b32 = random_vec<float>(rng, static_cast<std::size_t>(k) * n);
        auto c1 = random_vec<float>(rng, static_cast<std::size_t>(m) * n);
        auto c2 = c1;
        s.gemm_acc_f32(a32.data(), b32.data(), c1.data(), m, k, n);
        v.gemm_acc_f32(a32.data(), b32.data(), c2.data(), m, k, n);
        CHECK(bitwise_equal(c1, c2));

        const auto a64 = random_vec<double>(rng, static_cast<std::size_t>(m) * k);
        const auto b64 = random_vec<double>(rng, static_cast<std::size_t>(k) * n);
        auto d1 = random_vec<double>(rng, static_cast<std::size_t>(m) * n);
        auto d2 = d1;
        s.gemm_acc_f64(a64.data(), b64.data(), d1.data(), m, k, n);
        v.gemm_acc_f64(a64.data(), b64.data(), d2.data(), m, k, n);
        CHECK(bitwise_equal(d1, d2));
      }
    }
  }

  for (std::size_t n : {1u, 7u, 8u, 9u, 31u, 64u, 100u}) {
    const auto x32 = random_vec<float>(rng, n);
    auto y1 = random_vec<float>(rng, n);
    auto y2 = y1;
    s.add_f32(y1.data(), x32.data(), n);
    v.add_f32(y2.data(), x32.data(), n);
    CHECK(bitwise_equal(y1, y2));

    auto z1 = random_vec<float>(rng, n);
    auto z2 = z1;
    s.axpy_f32(1.7f, x32.data(), z1.data(), n);
    v.axpy_f32(1.7f, x32.data(), z2.data(), n);
    CHECK(bitwise_equal(z1, z2));

    const auto x64 = random_vec<double>(rng, n);
    auto w1 = random_vec<double>(rng, n);
    auto w2 = w1;
    s.add_f64(w1.data(), x64.data(), n);
    v.add_f64(w2.data(), x64.data(), n);
    CHECK(bitwise_equal(w1, w2));
    s.axpy_f64(-0.3, x64.data(), w1.data(), n);
    v.axpy_f64(-0.3, x64.data(), w2.data(), n);
    CHECK(bitwise_equal(w1, w2));
  }

  for (int rows : {1, 4, 9}) {
    for (int cols : {1, 8, 13, 40}) {
      const auto g = random_vec<float>(rng, static_cast<std::size_t>(rows) * cols);
      auto o1 = random_vec<float>(rng, static_cast<std::size_t>(cols));
      auto o2 = o1;
      s.colsum_acc_f32(g.data(), o1.data(), rows, cols);
      v.colsum_acc_f32(g.data(), o2.data(), rows, cols);
      CHECK(bitwise_equal(o1, o2));
    }
  }

  for (std::size_t n : {1u, 8u, 21u, 100u}) {
    const auto g = random_vec<float>(rng, n, 0.1);
    auto p1 = random_vec<float>(rng, n);
    auto p2 = p1;
    auto m1 = random_vec<float>(rng, n, 0.01);
    auto m2 = m1;
    auto vv1 = random_vec<float>(rng, n, 0.0001);
    for (auto& x : vv1) x = x * x;  // second moment must be nonnegative
    auto vv2 = vv1;
    const float c1 = 1.0f / (1.0f - 0.9f);
    const float c2 = 1.0f / (1.0f - 0.999f);
    s.adamw_f32(p1.data(), g.data(), m1.data(), vv1.data(), n, 2e-4f, 0.9f, 0.999f, 1e-8f, 0.01f, c1, c2);
    v.adamw_f32(p2.data(), g.data(), m2.data(), vv2.data(), n, 2e-4f, 0.9f, 0.999f, 1e-8f, 0.01f, c1, c2);
    CHECK(bitwise_equal(p1, p2));
    CHECK(bitwise_equal(m1, m2));
    CHECK(bitwise_equal(vv1, vv2));
  }
}

TEST_CASE("backend selection") {
  const auto original = kernels::active_backend();
  kernels::set_backend(kernels::Backend::scalar);
  CHECK(kernels::active_backend() == kernels::Backend::scalar);
  CHECK(kernels::backend_name(kernels::Backend::scalar) == "scalar");
  if (kernels::avx2_supported()) {
    kernels::set_backend(kernels::Backend::avx2);
    CHECK(kernels::active_backend() == kernels::Backend::avx2);
  } else {
    CHECK_THROWS(kernels::set_backend(kernels::Backend::avx2));
  }
  kernels::set_backend(original);
}
