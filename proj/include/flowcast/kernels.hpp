#pragma once

#include <cstddef>

namespace flowcast::kernels {

/// Double-precision inner-loop kernels. The scalar table is the reference
/// implementation; the AVX2 table must agree with it (bit-exactly for
/// elementwise ops, to tight tolerance for reductions, see tests).
///
/// Matmul kernels accumulate into C; callers zero C when they want a plain
/// product. Layouts are row-major and dense.
struct Kernels {
    const char* name;

    void (*add)(const double* a, const double* b, double* out, std::size_t n);
    void (*sub)(const double* a, const double* b, double* out, std::size_t n);
    void (*mul)(const double* a, const double* b, double* out, std::size_t n);
    void (*scale)(const double* a, double s, double* out, std::size_t n);
    // y += a * x
    void (*axpy)(double a, const double* x, double* y, std::size_t n);
    double (*dot)(const double* a, const double* b, std::size_t n);
    void (*relu)(const double* x, double* out, std::size_t n);
    // acc += g where x > 0 (subgradient 0 at 0)
    void (*relu_backward)(const double* x, const double* g, double* acc, std::size_t n);
    double (*reduce_max)(const double* x, std::size_t n);
    double (*reduce_sum)(const double* x, std::size_t n);
    // C += A(m×k) · B(k×n)
    void (*matmul_nn)(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
    // C += A(m×k) · B(n×k)ᵀ
    void (*matmul_nt)(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
    // C += A(k×m)ᵀ · B(k×n)
    void (*matmul_tn)(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
};

enum class Backend { Auto, Scalar, Avx2 };

const Kernels& scalar_kernels();
const Kernels& avx2_kernels();
bool avx2_supported();

/// The active kernel table. Resolved once: FLOWCAST_KERNELS=scalar|avx2
/// overrides, otherwise AVX2 when the CPU supports it.
const Kernels& active();

/// Force a backend (tests use this to compare implementations).
/// Backend::Auto restores the default resolution.
void force_backend(Backend b);
Backend active_backend();

} // namespace flowcast::kernels
