#pragma once

// Data-parallel inner loops used by convolution, optimizers and EMA.
//
// Every kernel has a portable scalar reference and an AVX2 variant. The active
// variant is chosen once at runtime from CPUID (override with FLOWE_SIMD=scalar).
// gemm, axpy and axpby round identically on both paths: each output element
// sees the same sequence of multiplies and adds, and the build disables FMA
// contraction. dot reassociates across lanes and only agrees to rounding.

#include <cstddef>
#include <span>

namespace flowe::kernels {

enum class Isa { scalar, avx2 };

const char* isa_name(Isa isa) noexcept;
bool isa_available(Isa isa) noexcept;
Isa active_isa() noexcept;
/// Pins the dispatch target; throws if the ISA is not available on this CPU.
void force_isa(Isa isa);

/// c[m x n] += a[m x k] * b[k x n], all row-major and densely packed.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const T> a, std::span<const T> b, std::span<T> c);
/// y += alpha * x
template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> y);
/// y = alpha * x + beta * y
template <typename T>
void axpby(T alpha, std::span<const T> x, T beta, std::span<T> y);
template <typename T>
T dot(std::span<const T> x, std::span<const T> y);

namespace scalar {
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y);
template <typename T>
void axpby(std::size_t n, T alpha, const T* x, T beta, T* y);
template <typename T>
T dot(std::size_t n, const T* x, const T* y);
}  // namespace scalar

namespace avx2 {
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y);
template <typename T>
void axpby(std::size_t n, T alpha, const T* x, T beta, T* y);
template <typename T>
T dot(std::size_t n, const T* x, const T* y);
}  // namespace avx2

}  // namespace flowe::kernels
