#pragma once

// Central finite-difference gradient oracle, independent of the reverse-mode
// path it checks. `forward` must rebuild the graph from the leaves' current
// values and return the scalar loss value.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "perrec/tensor.hpp"

namespace gradcheck {

struct Failure {
    std::string where;
    double analytic;
    double numeric;
};

struct Result {
    bool ok = true;
    double max_rel_err = 0.0;
    std::vector<Failure> failures;
};

inline Result check(const std::vector<perrec::Tensor>& leaves,
                    const std::function<double()>& forward,
                    const std::function<perrec::Tensor(perrec::Tape&)>& build,
                    double step = 1e-5, double tol = 1e-4) {
    using perrec::Tape;
    using perrec::Tensor;

    for (auto& l : leaves) const_cast<Tensor&>(l).clear_grad();
    Tape tape;
    Tensor loss = build(tape);
    perrec::backward(tape, loss);

    Result res;
    for (size_t li = 0; li < leaves.size(); ++li) {
        Tensor leaf = leaves[li];
        if (!leaf.requires_grad()) continue;
        const std::vector<double> analytic =
            leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.numel(), 0.0);
        for (int64_t i = 0; i < leaf.numel(); ++i) {
            const double orig = leaf.data()[i];
            leaf.data()[i] = orig + step;
            const double fp = forward();
            leaf.data()[i] = orig - step;
            const double fm = forward();
            leaf.data()[i] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[static_cast<size_t>(i)];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-4});
            const double rel = std::abs(a - numeric) / denom;
            res.max_rel_err = std::max(res.max_rel_err, rel);
            if (rel > tol) {
                res.ok = false;
                res.failures.push_back({"leaf " + std::to_string(li) + " idx " + std::to_string(i),
                                        a, numeric});
            }
        }
    }
    return res;
}

}  // namespace gradcheck
