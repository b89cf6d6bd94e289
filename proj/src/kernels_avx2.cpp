// AVX2 variants of the kernels in kernels.hpp. Built with -mavx2; only called
// after the runtime CPUID check. Multiplies and adds are kept separate so the
// results match the scalar reference bit for bit.

#include "flowe/kernels.hpp"

#if defined(__AVX2__)
#include <immintrin.h>
#endif

namespace flowe::kernels::avx2 {

#if defined(__AVX2__)

namespace {

struct F64 {
  using reg = __m256d;
  static constexpr std::size_t lanes = 4;
  static reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
  static reg set1(double v) { return _mm256_set1_pd(v); }
  static reg zero() { return _mm256_setzero_pd(); }
  static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
  static reg mul(reg a, reg b) { return _mm256_mul_pd(a, b); }
  static double hsum(reg v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
  }
};

struct F32 {
  using reg = __m256;
  static constexpr std::size_t lanes = 8;
  static reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
  static reg set1(float v) { return _mm256_set1_ps(v); }
  static reg zero() { return _mm256_setzero_ps(); }
  static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
  static reg mul(reg a, reg b) { return _mm256_mul_ps(a, b); }
  static float hsum(reg v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
    return _mm_cvtss_f32(_mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 0x55)));
  }
};

template <typename T>
struct Traits;
template <>
struct Traits<double> : F64 {};
template <>
struct Traits<float> : F32 {};

template <typename T>
void gemm_impl(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  using V = Traits<T>;
  constexpr std::size_t L = V::lanes;
  constexpr std::size_t block = 4 * L;
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    std::size_t j = 0;
    for (; j + block <= n; j += block) {
      auto c0 = V::load(crow + j);
      auto c1 = V::load(crow + j + L);
      auto c2 = V::load(crow + j + 2 * L);
      auto c3 = V::load(crow + j + 3 * L);
      for (std::size_t p = 0; p < k; ++p) {
        const auto av = V::set1(arow[p]);
        const T* brow = b + p * n + j;
        c0 = V::add(c0, V::mul(av, V::load(brow)));
        c1 = V::add(c1, V::mul(av, V::load(brow + L)));
        c2 = V::add(c2, V::mul(av, V::load(brow + 2 * L)));
        c3 = V::add(c3, V::mul(av, V::load(brow + 3 * L)));
      }
      V::store(crow + j, c0);
      V::store(crow + j + L, c1);
      V::store(crow + j + 2 * L, c2);
      V::store(crow + j + 3 * L, c3);
    }
    for (; j + L <= n; j += L) {
      auto c0 = V::load(crow + j);
      for (std::size_t p = 0; p < k; ++p) c0 = V::add(c0, V::mul(V::set1(arow[p]), V::load(b + p * n + j)));
      V::store(crow + j, c0);
    }
    for (; j < n; ++j) {
      T acc = crow[j];
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * b[p * n + j];
      crow[j] = acc;
    }
  }
}

template <typename T>
void axpy_impl(std::size_t n, T alpha, const T* x, T* y) {
  using V = Traits<T>;
  const auto av = V::set1(alpha);
  std::size_t i = 0;
  for (; i + V::lanes <= n; i += V::lanes) V::store(y + i, V::add(V::load(y + i), V::mul(av, V::load(x + i))));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void axpby_impl(std::size_t n, T alpha, const T* x, T beta, T* y) {
  using V = Traits<T>;
  const auto av = V::set1(alpha);
  const auto bv = V::set1(beta);
  std::size_t i = 0;
  for (; i + V::lanes <= n; i += V::lanes)
    V::store(y + i, V::add(V::mul(av, V::load(x + i)), V::mul(bv, V::load(y + i))));
  for (; i < n; ++i) y[i] = alpha * x[i] + beta * y[i];
}

template <typename T>
T dot_impl(std::size_t n, const T* x, const T* y) {
  using V = Traits<T>;
  auto s0 = V::zero();
  auto s1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * V::lanes <= n; i += 2 * V::lanes) {
    s0 = V::add(s0, V::mul(V::load(x + i), V::load(y + i)));
    s1 = V::add(s1, V::mul(V::load(x + i + V::lanes), V::load(y + i + V::lanes)));
  }
  T s = V::hsum(V::add(s0, s1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

}  // namespace

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  gemm_impl(m, n, k, a, b, c);
}
template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  axpy_impl(n, alpha, x, y);
}
template <typename T>
void axpby(std::size_t n, T alpha, const T* x, T beta, T* y) {
  axpby_impl(n, alpha, x, beta, y);
}
template <typename T>
T dot(std::size_t n, const T* x, const T* y) {
  return dot_impl(n, x, y);
}

#else  // no AVX2 in this translation unit: the dispatcher never selects it

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  scalar::gemm(m, n, k, a, b, c);
}
template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  scalar::axpy(n, alpha, x, y);
}
template <typename T>
void axpby(std::size_t n, T alpha, const T* x, T beta, T* y) {
  scalar::axpby(n, alpha, x, beta, y);
}
template <typename T>
T dot(std::size_t n, const T* x, const T* y) {
  return scalar::dot(n, x, y);
}

#endif

template void gemm<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
template void axpy<float>(std::size_t, float, const float*, float*);
template void axpy<double>(std::size_t, double, const double*, double*);
template void axpby<float>(std::size_t, float, const float*, float, float*);
template void axpby<double>(std::size_t, double, const double*, double, double*);
template float dot<float>(std::size_t, const float*, const float*);
template double dot<double>(std::size_t, const double*, const double*);

}  // namespace flowe::kernels::avx2
