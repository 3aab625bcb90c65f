#include "perrec/ops.hpp"

#include <cmath>

#include "perrec/kernels.hpp"

namespace perrec {
namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

bool want(Tape* tape, bool need) { return tape && (need || tape->record_all); }

void check_same_rank2(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
}

enum class Bcast { Same, Row, Scalar };

Bcast bcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (b.numel() == 1 && b.rank() <= 1) return Bcast::Scalar;
    if (a.shape() == b.shape()) return Bcast::Same;
    if (b.rank() == 1 && a.rank() >= 1 && a.dim(a.rank() - 1) == b.dim(0)) return Bcast::Row;
    throw ContractError(std::string(op) + ": shapes not broadcast-compatible " +
                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class Fwd, class Deriv>
Tensor unary_op(Tape* tape, const Tensor& a, const char* name, Fwd fwd, Deriv deriv) {
    Tensor out = Tensor::zeros(a.shape());
    const double* x = a.data();
    double* y = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = fwd(x[i]);
    const bool need = a.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push(name, [a, out, deriv]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* go = out.grad().data();
            const double* x = a.data();
            const double* y = out.data();
            double* da = a.grad_accum();
            const int64_t n = a.numel();
            for (int64_t i = 0; i < n; ++i) da[i] += go[i] * deriv(x[i], y[i]);
        });
    }
    return out;
}

double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_stable(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

}  // namespace

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ContractError("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                            shape_str(b.shape()));
    const size_t m = static_cast<size_t>(a.dim(0));
    const size_t k = static_cast<size_t>(a.dim(1));
    const size_t n = static_cast<size_t>(b.dim(1));
    Tensor out = Tensor::zeros({a.dim(0), b.dim(1)});
    kernels::gemm_nn(out.data(), a.data(), b.data(), m, k, n);
    const bool need = a.requires_grad() || b.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("matmul", [a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.grad().data();
            if (a.requires_grad()) kernels::gemm_nt(a.grad_accum(), go, b.data(), m, n, k);
            if (b.requires_grad()) kernels::gemm_tn(b.grad_accum(), a.data(), go, k, m, n);
        });
    }
    return out;
}

Tensor vecmat(Tape* tape, const Tensor& v, const Tensor& w) {
    if (v.rank() != 1 || w.rank() != 2 || v.dim(0) != w.dim(0))
        throw ContractError("vecmat: shape mismatch " + shape_str(v.shape()) + " x " +
                            shape_str(w.shape()));
    const size_t k = static_cast<size_t>(v.dim(0));
    const size_t n = static_cast<size_t>(w.dim(1));
    Tensor out = Tensor::zeros({w.dim(1)});
    const auto& kk = kernels::active();
    for (size_t p = 0; p < k; ++p) {
        if (v.data()[p] != 0.0) kk.axpy(out.data(), v.data()[p], w.data() + p * n, n);
    }
    const bool need = v.requires_grad() || w.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("vecmat", [v, w, out, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.grad().data();
            const auto& kk = kernels::active();
            if (v.requires_grad()) {
                double* dv = v.grad_accum();
                for (size_t p = 0; p < k; ++p) dv[p] += kk.dot(go, w.data() + p * n, n);
            }
            if (w.requires_grad()) {
                double* dw = w.grad_accum();
                for (size_t p = 0; p < k; ++p) {
                    if (v.data()[p] != 0.0) kk.axpy(dw + p * n, v.data()[p], go, n);
                }
            }
        });
    }
    return out;
}

Tensor dot(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel())
        throw ContractError("dot: shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    const size_t n = static_cast<size_t>(a.numel());
    Tensor out = Tensor::scalar(kernels::active().dot(a.data(), b.data(), n));
    const bool need = a.requires_grad() || b.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("dot", [a, b, out, n]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0];
            const auto& kk = kernels::active();
            if (a.requires_grad()) kk.axpy(a.grad_accum(), g, b.data(), n);
            if (b.requires_grad()) kk.axpy(b.grad_accum(), g, a.data(), n);
        });
    }
    return out;
}

namespace {

// Shared core for add/sub: sign = +1 or -1 on b.
Tensor addsub(Tape* tape, const Tensor& a, const Tensor& b, double sign, const char* name) {
    const Bcast bc = bcast_kind(a, b, name);
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = static_cast<size_t>(a.numel());
    const size_t bn = static_cast<size_t>(b.numel());
    const auto& kk = kernels::active();
    if (bc == Bcast::Same) {
        if (sign > 0) kk.add(out.data(), a.data(), b.data(), n);
        else kk.sub(out.data(), a.data(), b.data(), n);
    } else if (bc == Bcast::Row) {
        const size_t rows = n / bn;
        for (size_t r = 0; r < rows; ++r) {
            if (sign > 0) kk.add(out.data() + r * bn, a.data() + r * bn, b.data(), bn);
            else kk.sub(out.data() + r * bn, a.data() + r * bn, b.data(), bn);
        }
    } else {
        const double bv = sign * b.data()[0];
        for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + bv;
    }
    const bool need = a.requires_grad() || b.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push(name, [a, b, out, bc, sign, n, bn]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.grad().data();
            const auto& kk = kernels::active();
            if (a.requires_grad()) kk.axpy(a.grad_accum(), 1.0, go, n);
            if (b.requires_grad()) {
                double* db = b.grad_accum();
                if (bc == Bcast::Same) {
                    kk.axpy(db, sign, go, n);
                } else if (bc == Bcast::Row) {
                    const size_t rows = n / bn;
                    for (size_t r = 0; r < rows; ++r) kk.axpy(db, sign, go + r * bn, bn);
                } else {
                    db[0] += sign * kk.sum(go, n);
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) { return addsub(tape, a, b, 1.0, "add"); }
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) { return addsub(tape, a, b, -1.0, "sub"); }

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    const Bcast bc = bcast_kind(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = static_cast<size_t>(a.numel());
    const size_t bn = static_cast<size_t>(b.numel());
    const auto& kk = kernels::active();
    if (bc == Bcast::Same) {
        kk.mul(out.data(), a.data(), b.data(), n);
    } else if (bc == Bcast::Row) {
        const size_t rows = n / bn;
        for (size_t r = 0; r < rows; ++r) kk.mul(out.data() + r * bn, a.data() + r * bn, b.data(), bn);
    } else {
        kk.scale(out.data(), a.data(), b.data()[0], n);
    }
    const bool need = a.requires_grad() || b.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("mul", [a, b, out, bc, n, bn]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.grad().data();
            const auto& kk = kernels::active();
            if (a.requires_grad()) {
                double* da = a.grad_accum();
                if (bc == Bcast::Same) {
                    for (size_t i = 0; i < n; ++i) da[i] += go[i] * b.data()[i];
                } else if (bc == Bcast::Row) {
                    const size_t rows = n / bn;
                    for (size_t r = 0; r < rows; ++r)
                        for (size_t j = 0; j < bn; ++j) da[r * bn + j] += go[r * bn + j] * b.data()[j];
                } else {
                    kk.axpy(da, b.data()[0], go, n);
                }
            }
            if (b.requires_grad()) {
                double* db = b.grad_accum();
                if (bc == Bcast::Same) {
                    for (size_t i = 0; i < n; ++i) db[i] += go[i] * a.data()[i];
                } else if (bc == Bcast::Row) {
                    const size_t rows = n / bn;
                    for (size_t r = 0; r < rows; ++r)
                        for (size_t j = 0; j < bn; ++j) db[j] += go[r * bn + j] * a.data()[r * bn + j];
                } else {
                    db[0] += kk.dot(go, a.data(), n);
                }
            }
        });
    }
    return out;
}

Tensor scale(Tape* tape, const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    kernels::active().scale(out.data(), a.data(), s, static_cast<size_t>(a.numel()));
    const bool need = a.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("scale", [a, out, s]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            kernels::active().axpy(a.grad_accum(), s, out.grad().data(),
                                   static_cast<size_t>(a.numel()));
        });
    }
    return out;
}

Tensor log_op(Tape* tape, const Tensor& a) {
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a.data()[i] <= 0.0)
            throw DataError("log: non-positive input " + std::to_string(a.data()[i]));
    return unary_op(tape, a, "log", [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(Tape* tape, const Tensor& a) {
    return unary_op(tape, a, "sigmoid", sigmoid_stable,
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(Tape* tape, const Tensor& a) {
    return unary_op(tape, a, "log_sigmoid", [](double x) { return -softplus_stable(-x); },
                    [](double x, double) { return sigmoid_stable(-x); });
}

Tensor softplus(Tape* tape, const Tensor& a) {
    return unary_op(tape, a, "softplus", softplus_stable,
                    [](double x, double) { return sigmoid_stable(x); });
}

Tensor relu(Tape* tape, const Tensor& a) {
    return unary_op(tape, a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(Tape* tape, const Tensor& a) {
    return unary_op(
        tape, a, "gelu",
        [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        });
}

Tensor concat(Tape* tape, const Tensor& a, const Tensor& b) {
    Tensor out;
    int64_t an = 0, bn = 0, rows = 1;
    if (a.rank() == 1 && b.rank() == 1) {
        an = a.dim(0);
        bn = b.dim(0);
        out = Tensor::zeros({an + bn});
    } else if (a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0)) {
        rows = a.dim(0);
        an = a.dim(1);
        bn = b.dim(1);
        out = Tensor::zeros({rows, an + bn});
    } else {
        throw ContractError("concat: shapes not concatenable " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    }
    for (int64_t r = 0; r < rows; ++r) {
        double* o = out.data() + r * (an + bn);
        std::copy(a.data() + r * an, a.data() + (r + 1) * an, o);
        std::copy(b.data() + r * bn, b.data() + (r + 1) * bn, o + an);
    }
    const bool need = a.requires_grad() || b.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("concat", [a, b, out, rows, an, bn]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.grad().data();
            const auto& kk = kernels::active();
            for (int64_t r = 0; r < rows; ++r) {
                const double* g = go + r * (an + bn);
                if (a.requires_grad())
                    kk.axpy(a.grad_accum() + r * an, 1.0, g, static_cast<size_t>(an));
                if (b.requires_grad())
                    kk.axpy(b.grad_accum() + r * bn, 1.0, g + an, static_cast<size_t>(bn));
            }
        });
    }
    return out;
}

Tensor sum_all(Tape* tape, const Tensor& a) {
    Tensor out = Tensor::scalar(kernels::active().sum(a.data(), static_cast<size_t>(a.numel())));
    const bool need = a.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("sum", [a, out]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double g = out.grad()[0];
            double* da = a.grad_accum();
            for (int64_t i = 0; i < a.numel(); ++i) da[i] += g;
        });
    }
    return out;
}

Tensor mean_all(Tape* tape, const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    Tensor out =
        Tensor::scalar(kernels::active().sum(a.data(), static_cast<size_t>(a.numel())) * inv);
    const bool need = a.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("mean", [a, out, inv]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double g = out.grad()[0] * inv;
            double* da = a.grad_accum();
            for (int64_t i = 0; i < a.numel(); ++i) da[i] += g;
        });
    }
    return out;
}

Tensor mean_rows(Tape* tape, const Tensor& a) {
    if (a.rank() != 2) throw ContractError("mean_rows: expected rank-2, got " + shape_str(a.shape()));
    const int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n});
    const auto& kk = kernels::active();
    const double inv = 1.0 / static_cast<double>(m);
    for (int64_t r = 0; r < m; ++r)
        kk.axpy(out.data(), inv, a.data() + r * n, static_cast<size_t>(n));
    const bool need = a.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("mean_rows", [a, out, m, n, inv]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* go = out.grad().data();
            double* da = a.grad_accum();
            const auto& kk = kernels::active();
            for (int64_t r = 0; r < m; ++r)
                kk.axpy(da + r * n, inv, go, static_cast<size_t>(n));
        });
    }
    return out;
}

Tensor row(Tape* tape, const Tensor& a, int64_t i) {
    if (a.rank() != 2 || i < 0 || i >= a.dim(0))
        throw ContractError("row: index " + std::to_string(i) + " out of range for " +
                            shape_str(a.shape()));
    const int64_t n = a.dim(1);
    Tensor out = Tensor::from({n}, std::vector<double>(a.data() + i * n, a.data() + (i + 1) * n));
    const bool need = a.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("row", [a, out, i, n]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            kernels::active().axpy(a.grad_accum() + i * n, 1.0, out.grad().data(),
                                   static_cast<size_t>(n));
        });
    }
    return out;
}

Tensor gather_rows(Tape* tape, const Tensor& a, std::vector<int64_t> idx) {
    if (a.rank() != 2) throw ContractError("gather_rows: expected rank-2, got " + shape_str(a.shape()));
    const int64_t n = a.dim(1);
    const int64_t k = static_cast<int64_t>(idx.size());
    Tensor out = Tensor::zeros({k, n});
    for (int64_t t = 0; t < k; ++t) {
        const int64_t i = idx[static_cast<size_t>(t)];
        if (i < 0 || i >= a.dim(0))
            throw ContractError("gather_rows: index " + std::to_string(i) + " out of range for " +
                                shape_str(a.shape()));
        std::copy(a.data() + i * n, a.data() + (i + 1) * n, out.data() + t * n);
    }
    const bool need = a.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("gather_rows", [a, out, idx = std::move(idx), n]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* go = out.grad().data();
            double* da = a.grad_accum();
            const auto& kk = kernels::active();
            for (size_t t = 0; t < idx.size(); ++t)
                kk.axpy(da + idx[t] * n, 1.0, go + static_cast<int64_t>(t) * n,
                        static_cast<size_t>(n));
        });
    }
    return out;
}

Tensor stack_rows(Tape* tape, const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ContractError("stack_rows: empty input");
    const int64_t n = rows.front().numel();
    for (const auto& r : rows)
        if (r.rank() != 1 || r.numel() != n)
            throw ContractError("stack_rows: inconsistent row shape " + shape_str(r.shape()));
    const int64_t k = static_cast<int64_t>(rows.size());
    Tensor out = Tensor::zeros({k, n});
    bool need = false;
    for (int64_t t = 0; t < k; ++t) {
        std::copy(rows[static_cast<size_t>(t)].data(), rows[static_cast<size_t>(t)].data() + n,
                  out.data() + t * n);
        need = need || rows[static_cast<size_t>(t)].requires_grad();
    }
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("stack_rows", [rows, out, n]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.grad().data();
            const auto& kk = kernels::active();
            for (size_t t = 0; t < rows.size(); ++t) {
                if (!rows[t].requires_grad()) continue;
                kk.axpy(rows[t].grad_accum(), 1.0, go + static_cast<int64_t>(t) * n,
                        static_cast<size_t>(n));
            }
        });
    }
    return out;
}

Tensor dropout(Tape* tape, const Tensor& a, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ContractError("dropout: rate must be in [0,1), got " + std::to_string(rate));
    Tensor out = Tensor::zeros(a.shape());
    const int64_t n = a.numel();
    std::vector<double> mask(static_cast<size_t>(n), 1.0);
    if (rate > 0.0) {
        const double keep_scale = 1.0 / (1.0 - rate);
        for (int64_t i = 0; i < n; ++i) mask[static_cast<size_t>(i)] = rng.uniform() >= rate ? keep_scale : 0.0;
    }
    kernels::active().mul(out.data(), a.data(), mask.data(), static_cast<size_t>(n));
    const bool need = a.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("dropout", [a, out, mask = std::move(mask)]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* go = out.grad().data();
            double* da = a.grad_accum();
            for (size_t i = 0; i < mask.size(); ++i) da[i] += go[i] * mask[i];
        });
    }
    return out;
}

Tensor layer_norm(Tape* tape, const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
    const int64_t n = a.rank() == 1 ? a.dim(0) : a.dim(a.rank() - 1);
    const int64_t m = a.numel() / n;
    if (n < 1) throw ContractError("layer_norm: empty last axis");
    if (gamma.numel() != n || beta.numel() != n)
        throw ContractError("layer_norm: gamma/beta shape mismatch " + shape_str(gamma.shape()) +
                            ", " + shape_str(beta.shape()) + " for " + shape_str(a.shape()));
    Tensor out = Tensor::zeros(a.shape());
    // xhat and 1/std per row are needed by the backward pass.
    std::vector<double> xhat(static_cast<size_t>(a.numel()));
    std::vector<double> inv_std(static_cast<size_t>(m));
    const auto& kk = kernels::active();
    for (int64_t r = 0; r < m; ++r) {
        const double* x = a.data() + r * n;
        const double mu = kk.sum(x, static_cast<size_t>(n)) / static_cast<double>(n);
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = is;
        double* xh = xhat.data() + r * n;
        double* y = out.data() + r * n;
        for (int64_t j = 0; j < n; ++j) {
            xh[j] = (x[j] - mu) * is;
            y[j] = gamma.data()[j] * xh[j] + beta.data()[j];
        }
    }
    const bool need = a.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("layer_norm",
                   [a, gamma, beta, out, m, n, xhat = std::move(xhat),
                    inv_std = std::move(inv_std)]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.grad().data();
            for (int64_t r = 0; r < m; ++r) {
                const double* g = go + r * n;
                const double* xh = xhat.data() + r * n;
                if (gamma.requires_grad()) {
                    double* dg = gamma.grad_accum();
                    for (int64_t j = 0; j < n; ++j) dg[j] += g[j] * xh[j];
                }
                if (beta.requires_grad()) {
                    double* db = beta.grad_accum();
                    for (int64_t j = 0; j < n; ++j) db[j] += g[j];
                }
                if (a.requires_grad()) {
                    // dx = (h - mean(h) - xhat * mean(h*xhat)) / std, h = gamma*dy.
                    double mean_h = 0.0, mean_hx = 0.0;
                    for (int64_t j = 0; j < n; ++j) {
                        const double h = gamma.data()[j] * g[j];
                        mean_h += h;
                        mean_hx += h * xh[j];
                    }
                    mean_h /= static_cast<double>(n);
                    mean_hx /= static_cast<double>(n);
                    double* da = a.grad_accum() + r * n;
                    const double is = inv_std[static_cast<size_t>(r)];
                    for (int64_t j = 0; j < n; ++j) {
                        const double h = gamma.data()[j] * g[j];
                        da[j] += (h - mean_h - xh[j] * mean_hx) * is;
                    }
                }
            }
        });
    }
    return out;
}

AttentionResult attention(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v,
                          int n_heads, bool causal) {
    check_same_rank2(q, k, "attention");
    check_same_rank2(q, v, "attention");
    if (q.rank() != 2) throw ContractError("attention: expected [T×d], got " + shape_str(q.shape()));
    const int64_t t_len = q.dim(0);
    const int64_t d = q.dim(1);
    if (n_heads < 1 || d % n_heads != 0)
        throw ContractError("attention: dim " + std::to_string(d) + " not divisible by " +
                            std::to_string(n_heads) + " heads");
    const int64_t dh = d / n_heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor out = Tensor::zeros({t_len, d});
    Tensor weights = Tensor::zeros({n_heads, t_len, t_len});  // detached snapshot
    const auto& kk = kernels::active();
    for (int64_t h = 0; h < n_heads; ++h) {
        const int64_t off = h * dh;
        for (int64_t i = 0; i < t_len; ++i) {
            const int64_t limit = causal ? i + 1 : t_len;
            double* wrow = weights.data() + (h * t_len + i) * t_len;
            double max_s = -1e300;
            for (int64_t j = 0; j < limit; ++j) {
                const double s =
                    kk.dot(q.data() + i * d + off, k.data() + j * d + off, static_cast<size_t>(dh)) *
                    inv_scale;
                wrow[j] = s;
                if (s > max_s) max_s = s;
            }
            double z = 0.0;
            for (int64_t j = 0; j < limit; ++j) {
                wrow[j] = std::exp(wrow[j] - max_s);
                z += wrow[j];
            }
            double* orow = out.data() + i * d + off;
            for (int64_t j = 0; j < limit; ++j) {
                wrow[j] /= z;
                kk.axpy(orow, wrow[j], v.data() + j * d + off, static_cast<size_t>(dh));
            }
        }
    }

    const bool need = q.requires_grad() || k.requires_grad() || v.requires_grad();
    if (want(tape, need)) {
        out.set_requires_grad(need);
        tape->push("attention",
                   [q, k, v, out, weights, n_heads, causal, t_len, d, dh, inv_scale]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.grad().data();
            const auto& kk = kernels::active();
            std::vector<double> dscore(static_cast<size_t>(t_len));
            for (int64_t h = 0; h < n_heads; ++h) {
                const int64_t off = h * dh;
                for (int64_t i = 0; i < t_len; ++i) {
                    const int64_t limit = causal ? i + 1 : t_len;
                    const double* wrow = weights.data() + (h * t_len + i) * t_len;
                    const double* grow = go + i * d + off;
                    if (v.requires_grad()) {
                        double* dv = v.grad_accum();
                        for (int64_t j = 0; j < limit; ++j)
                            kk.axpy(dv + j * d + off, wrow[j], grow, static_cast<size_t>(dh));
                    }
                    if (!q.requires_grad() && !k.requires_grad()) continue;
                    // dW[j] = go·v_j ; dS = W ∘ (dW - Σ dW∘W).
                    double acc = 0.0;
                    for (int64_t j = 0; j < limit; ++j) {
                        dscore[static_cast<size_t>(j)] =
                            kk.dot(grow, v.data() + j * d + off, static_cast<size_t>(dh));
                        acc += dscore[static_cast<size_t>(j)] * wrow[j];
                    }
                    for (int64_t j = 0; j < limit; ++j) {
                        const double ds =
                            wrow[j] * (dscore[static_cast<size_t>(j)] - acc) * inv_scale;
                        if (ds == 0.0) continue;
                        if (q.requires_grad())
                            kk.axpy(q.grad_accum() + i * d + off, ds, k.data() + j * d + off,
                                    static_cast<size_t>(dh));
                        if (k.requires_grad())
                            kk.axpy(k.grad_accum() + j * d + off, ds, q.data() + i * d + off,
                                    static_cast<size_t>(dh));
                    }
                }
            }
        });
    }
    return {out, weights};
}

}  // namespace perrec
