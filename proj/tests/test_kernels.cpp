#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "perrec/kernels.hpp"
#include "perrec/rng.hpp"

using namespace perrec;
namespace kn = perrec::kernels;

namespace {

std::vector<double> random_vec(Rng& rng, size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal() * scale;
    return v;
}

const std::vector<size_t> kSizes = {0, 1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 17, 31, 33, 64, 100, 257, 1000, 4096};

// Naive triple-loop matrix product, the oracle for the gemm helpers.
std::vector<double> naive_gemm(const std::vector<double>& a, const std::vector<double>& b,
                               size_t m, size_t k, size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (size_t i = 0; i < m; ++i)
        for (size_t p = 0; p < k; ++p)
            for (size_t j = 0; j < n; ++j) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

}  // namespace

TEST_CASE("simd variants match the scalar reference") {
    const kn::Kernels& ref = kn::scalar_kernels();
    std::vector<const kn::Kernels*> variants;
    if (kn::avx2_kernels() && kn::select(kn::Isa::Avx2)) variants.push_back(kn::avx2_kernels());
    if (kn::neon_kernels() && kn::select(kn::Isa::Neon)) variants.push_back(kn::neon_kernels());
    kn::select(kn::Isa::Scalar);
    if (variants.empty()) {
        MESSAGE("no SIMD variant available on this host; scalar-only");
        return;
    }

    Rng rng(42);
    for (const kn::Kernels* simd : variants) {
        CAPTURE(simd->name);
        for (size_t n : kSizes) {
            auto a = random_vec(rng, n);
            auto b = random_vec(rng, n);

            // Reductions: accumulation order differs, compare under tolerance.
            const double d_ref = ref.dot(a.data(), b.data(), n);
            const double d_simd = simd->dot(a.data(), b.data(), n);
            CHECK(std::abs(d_ref - d_simd) <=
                  1e-12 * std::max({1.0, std::abs(d_ref), std::abs(d_simd)}));
            const double s_ref = ref.sum(a.data(), n);
            const double s_simd = simd->sum(a.data(), n);
            CHECK(std::abs(s_ref - s_simd) <=
                  1e-12 * std::max({1.0, std::abs(s_ref), std::abs(s_simd)}));

            // Elementwise: bit-identical by contract.
            std::vector<double> r1(n), r2(n);
            ref.add(r1.data(), a.data(), b.data(), n);
            simd->add(r2.data(), a.data(), b.data(), n);
            CHECK(std::memcmp(r1.data(), r2.data(), n * sizeof(double)) == 0);
            ref.sub(r1.data(), a.data(), b.data(), n);
            simd->sub(r2.data(), a.data(), b.data(), n);
            CHECK(std::memcmp(r1.data(), r2.data(), n * sizeof(double)) == 0);
            ref.mul(r1.data(), a.data(), b.data(), n);
            simd->mul(r2.data(), a.data(), b.data(), n);
            CHECK(std::memcmp(r1.data(), r2.data(), n * sizeof(double)) == 0);
            ref.scale(r1.data(), a.data(), 1.7, n);
            simd->scale(r2.data(), a.data(), 1.7, n);
            CHECK(std::memcmp(r1.data(), r2.data(), n * sizeof(double)) == 0);

            std::vector<double> y1 = b, y2 = b;
            ref.axpy(y1.data(), -0.37, a.data(), n);
            simd->axpy(y2.data(), -0.37, a.data(), n);
            CHECK(std::memcmp(y1.data(), y2.data(), n * sizeof(double)) == 0);
        }
    }
}

TEST_CASE("gemm helpers match the naive triple loop") {
    Rng rng(7);
    for (auto [m, k, n] : std::vector<std::array<size_t, 3>>{
             {1, 1, 1}, {2, 3, 4}, {5, 7, 3}, {8, 8, 8}, {13, 5, 9}, {16, 32, 16}}) {
        auto a = random_vec(rng, m * k);
        auto b = random_vec(rng, k * n);
        auto expect = naive_gemm(a, b, m, k, n);

        std::vector<double> c(m * n, 0.0);
        kn::gemm_nn(c.data(), a.data(), b.data(), m, k, n);
        for (size_t i = 0; i < c.size(); ++i)
            CHECK(std::abs(c[i] - expect[i]) <= 1e-12 * std::max(1.0, std::abs(expect[i])));

        // A stored transposed: gemm_tn(Aᵀ) must equal A·B.
        std::vector<double> at(k * m);
        for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
        std::fill(c.begin(), c.end(), 0.0);
        kn::gemm_tn(c.data(), at.data(), b.data(), m, k, n);
        for (size_t i = 0; i < c.size(); ++i)
            CHECK(std::abs(c[i] - expect[i]) <= 1e-12 * std::max(1.0, std::abs(expect[i])));

        // B stored transposed: gemm_nt(Bᵀ) must equal A·B.
        std::vector<double> bt(n * k);
        for (size_t p = 0; p < k; ++p)
            for (size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
        std::fill(c.begin(), c.end(), 0.0);
        kn::gemm_nt(c.data(), a.data(), bt.data(), m, k, n);
        for (size_t i = 0; i < c.size(); ++i)
            CHECK(std::abs(c[i] - expect[i]) <= 1e-12 * std::max(1.0, std::abs(expect[i])));
    }
}

TEST_CASE("gemm accumulates into the output") {
    std::vector<double> a = {1.0, 2.0};      // [1x2]
    std::vector<double> b = {3.0, 4.0};      // [2x1]
    std::vector<double> c = {10.0};
    kn::gemm_nn(c.data(), a.data(), b.data(), 1, 2, 1);
    CHECK(c[0] == doctest::Approx(21.0));
}

TEST_CASE("runtime dispatch reports a usable table") {
    const kn::Kernels& k = kn::active();
    std::vector<double> a = {1.0, 2.0, 3.0};
    CHECK(k.sum(a.data(), 3) == doctest::Approx(6.0));
    CHECK(kn::select(kn::Isa::Scalar));
    CHECK(kn::active_isa() == kn::Isa::Scalar);
    // Restore auto-detected best variant for the remaining suites.
    if (!kn::select(kn::Isa::Avx2)) kn::select(kn::Isa::Neon);
}
