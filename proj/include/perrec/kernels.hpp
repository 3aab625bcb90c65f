#pragma once

#include <cstddef>
#include <string_view>

namespace perrec::kernels {

enum class Isa { Scalar, Avx2, Neon };

// Inner-loop kernel table. One scalar reference implementation plus SIMD
// variants selected once at runtime. Elementwise kernels (axpy, add, sub,
// mul, scale) are bit-identical across implementations (no FMA contraction);
// reductions (dot, sum) may differ by accumulation order and are
// equivalence-tested against the scalar reference under a tolerance.
struct Kernels {
    const char* name;
    double (*dot)(const double* a, const double* b, size_t n);
    double (*sum)(const double* a, size_t n);
    void (*axpy)(double* y, double alpha, const double* x, size_t n);  // y += alpha * x
    void (*add)(double* out, const double* a, const double* b, size_t n);
    void (*sub)(double* out, const double* a, const double* b, size_t n);
    void (*mul)(double* out, const double* a, const double* b, size_t n);
    void (*scale)(double* out, const double* a, double s, size_t n);
};

const Kernels& scalar_kernels();
const Kernels* avx2_kernels();  // nullptr when not compiled in
const Kernels* neon_kernels();  // nullptr when not compiled in

// Active table. Selection order: PERREC_KERNELS env override
// ("scalar"|"avx2"|"neon"), else the best variant this CPU supports.
const Kernels& active();
Isa active_isa();

// Force a specific implementation (tests). Returns false if unavailable.
bool select(Isa isa);

// Row-major GEMM built on the kernel table, accumulate-into semantics.
// gemm_nn: C[m×n] += A[m×k]   · B[k×n]
// gemm_nt: C[m×n] += A[m×k]   · B[n×k]ᵀ
// gemm_tn: C[m×n] += A[k×m]ᵀ · B[k×n]
void gemm_nn(double* c, const double* a, const double* b, size_t m, size_t k, size_t n);
void gemm_nt(double* c, const double* a, const double* b, size_t m, size_t k, size_t n);
void gemm_tn(double* c, const double* a, const double* b, size_t m, size_t k, size_t n);

}  // namespace perrec::kernels
