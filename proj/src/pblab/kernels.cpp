#include "pblab/kernels.hpp"

#include <cstdlib>
#include <stdexcept>

namespace pblab::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(PBLAB_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

Backend pick_initial() {
  if (const char* env = std::getenv("PBLAB_KERNELS")) {
    const std::string v(env);
    if (v == "scalar") return Backend::scalar;
    if (v == "avx2") {
      if (!cpu_has_avx2() || avx2_table() == nullptr) {
        throw std::runtime_error("PBLAB_KERNELS=avx2 requested but AVX2 is unavailable");
      }
      return Backend::avx2;
    }
    throw std::runtime_error("unknown PBLAB_KERNELS value: " + v);
  }
  return (cpu_has_avx2() && avx2_table() != nullptr) ? Backend::avx2 : Backend::scalar;
}

Backend& current() {
  static Backend b = pick_initial();
  return b;
}

}  // namespace

bool avx2_supported() { return cpu_has_avx2() && avx2_table() != nullptr; }

Backend active_backend() { return current(); }

void set_backend(Backend b) {
  if (b == Backend::avx2 && !avx2_supported()) {
    throw std::runtime_error("AVX2 backend unavailable on this host");
  }
  current() = b;
}

const Table& active() {
  return current() == Backend::avx2 ? *avx2_table() : scalar_table();
}

std::string backend_name(Backend b) {
  return b == Backend::avx2 ? "avx2" : "scalar";
}

}  // namespace pblab::kernels
