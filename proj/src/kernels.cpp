#include "flowe/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <string>

#include "flowe/error.hpp"

namespace flowe::kernels {

namespace scalar {

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aik = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void axpby(std::size_t n, T alpha, const T* x, T beta, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = alpha * x[i] + beta * y[i];
}

template <typename T>
T dot(std::size_t n, const T* x, const T* y) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

template void gemm<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
template void axpy<float>(std::size_t, float, const float*, float*);
template void axpy<double>(std::size_t, double, const double*, double*);
template void axpby<float>(std::size_t, float, const float*, float, float*);
template void axpby<double>(std::size_t, double, const double*, double, double*);
template float dot<float>(std::size_t, const float*, const float*);
template double dot<double>(std::size_t, const double*, const double*);

}  // namespace scalar

namespace {

bool cpu_has_avx2() noexcept {
#if defined(FLOWE_HAVE_AVX2_TU) && (defined(__GNUC__) || defined(__clang__))
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

Isa detect() noexcept {
  if (const char* env = std::getenv("FLOWE_SIMD"); env && std::strcmp(env, "scalar") == 0) return Isa::scalar;
  return cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

const char* isa_name(Isa isa) noexcept { return isa == Isa::avx2 ? "avx2" : "scalar"; }

bool isa_available(Isa isa) noexcept { return isa == Isa::scalar || cpu_has_avx2(); }

Isa active_isa() noexcept { return current().load(std::memory_order_relaxed); }

void force_isa(Isa isa) {
  if (!isa_available(isa)) throw Error(std::string("ISA not available on this CPU: ") + isa_name(isa));
  current().store(isa, std::memory_order_relaxed);
}

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const T> a, std::span<const T> b, std::span<T> c) {
  if (a.size() < m * k || b.size() < k * n || c.size() < m * n) throw DimensionError("gemm: operand spans too small");
  if (active_isa() == Isa::avx2)
    avx2::gemm(m, n, k, a.data(), b.data(), c.data());
  else
    scalar::gemm(m, n, k, a.data(), b.data(), c.data());
}

template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> y) {
  if (x.size() != y.size()) throw DimensionError("axpy: length mismatch");
  if (active_isa() == Isa::avx2)
    avx2::axpy(x.size(), alpha, x.data(), y.data());
  else
    scalar::axpy(x.size(), alpha, x.data(), y.data());
}

template <typename T>
void axpby(T alpha, std::span<const T> x, T beta, std::span<T> y) {
  if (x.size() != y.size()) throw DimensionError("axpby: length mismatch");
  if (active_isa() == Isa::avx2)
    avx2::axpby(x.size(), alpha, x.data(), beta, y.data());
  else
    scalar::axpby(x.size(), alpha, x.data(), beta, y.data());
}

template <typename T>
T dot(std::span<const T> x, std::span<const T> y) {
  if (x.size() != y.size()) throw DimensionError("dot: length mismatch");
  if (active_isa() == Isa::avx2) return avx2::dot(x.size(), x.data(), y.data());
  return scalar::dot(x.size(), x.data(), y.data());
}

template void gemm<float>(std::size_t, std::size_t, std::size_t, std::span<const float>, std::span<const float>,
                          std::span<float>);
template void gemm<double>(std::size_t, std::size_t, std::size_t, std::span<const double>, std::span<const double>,
                           std::span<double>);
template void axpy<float>(float, std::span<const float>, std::span<float>);
template void axpy<double>(double, std::span<const double>, std::span<double>);
template void axpby<float>(float, std::span<const float>, float, std::span<float>);
template void axpby<double>(double, std::span<const double>, double, std::span<double>);
template float dot<float>(std::span<const float>, std::span<const float>);
template double dot<double>(std::span<const double>, std::span<const double>);

}  // namespace flowe::kernels
