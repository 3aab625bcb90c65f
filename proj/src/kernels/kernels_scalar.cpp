#include "perrec/kernels.hpp"

// Reference kernels. Plain loops, no std::fma: the SIMD elementwise variants
// mirror the mul-then-add rounding so results stay bit-identical across ISAs.

namespace perrec::kernels {
namespace {

double dot_scalar(const double* a, const double* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double sum_scalar(const double* a, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += a[i];
    return acc;
}

void axpy_scalar(double* y, double alpha, const double* x, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void add_scalar(double* out, const double* a, const double* b, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_scalar(double* out, const double* a, const double* b, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_scalar(double* out, const double* a, const double* b, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_scalar(double* out, const double* a, double s, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] * s;
}

}  // namespace

const Kernels& scalar_kernels() {
    static const Kernels k = {
        "scalar", dot_scalar, sum_scalar, axpy_scalar,
        add_scalar, sub_scalar, mul_scalar, scale_scalar,
    };
    return k;
}

}  // namespace perrec::kernels
