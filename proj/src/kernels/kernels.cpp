#include "perrec/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace perrec::kernels {
namespace {

const Kernels* g_active = nullptr;
Isa g_isa = Isa::Scalar;

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

void init_from_env_or_cpu() {
    if (const char* env = std::getenv("PERREC_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) {
            g_active = &scalar_kernels();
            g_isa = Isa::Scalar;
            return;
        }
        if (std::strcmp(env, "avx2") == 0 && avx2_kernels() && cpu_has_avx2()) {
            g_active = avx2_kernels();
            g_isa = Isa::Avx2;
            return;
        }
        if (std::strcmp(env, "neon") == 0 && neon_kernels()) {
            g_active = neon_kernels();
            g_isa = Isa::Neon;
            return;
        }
        // Unknown or unavailable override: fall through to auto-detection.
    }
    if (avx2_kernels() && cpu_has_avx2()) {
        g_active = avx2_kernels();
        g_isa = Isa::Avx2;
    } else if (neon_kernels()) {
        g_active = neon_kernels();
        g_isa = Isa::Neon;
    } else {
        g_active = &scalar_kernels();
        g_isa = Isa::Scalar;
    }
}

}  // namespace

const Kernels& active() {
    if (!g_active) init_from_env_or_cpu();
    return *g_active;
}

Isa active_isa() {
    active();
    return g_isa;
}

bool select(Isa isa) {
    switch (isa) {
        case Isa::Scalar:
            g_active = &scalar_kernels();
            g_isa = Isa::Scalar;
            return true;
        case Isa::Avx2:
            if (!avx2_kernels() || !cpu_has_avx2()) return false;
            g_active = avx2_kernels();
            g_isa = Isa::Avx2;
            return true;
        case Isa::Neon:
            if (!neon_kernels()) return false;
            g_active = neon_kernels();
            g_isa = Isa::Neon;
            return true;
    }
    return false;
}

// Loop orders keep the innermost access contiguous so the kernel table does
// the work: nn/tn stream rows of B via axpy, nt reduces rows via dot.

void gemm_nn(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
    const Kernels& kk = active();
    for (size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (size_t p = 0; p < k; ++p) {
            if (arow[p] != 0.0) kk.axpy(crow, arow[p], b + p * n, n);
        }
    }
}

void gemm_nt(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
    const Kernels& kk = active();
    for (size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (size_t j = 0; j < n; ++j) crow[j] += kk.dot(arow, b + j * k, k);
    }
}

void gemm_tn(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
    const Kernels& kk = active();
    for (size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (size_t i = 0; i < m; ++i) {
            if (arow[i] != 0.0) kk.axpy(c + i * n, arow[i], brow, n);
        }
    }
}

}  // namespace perrec::kernels
