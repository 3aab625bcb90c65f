#include "perrec/optimizer.hpp"

#include <cmath>

namespace perrec {

void AdamW::step(const std::vector<Tensor>& params) {
    for (const Tensor& p : params) {
        State& s = state_[p.impl()];
        const size_t n = static_cast<size_t>(p.numel());
        if (s.m.empty()) {
            s.m.assign(n, 0.0);
            s.v.assign(n, 0.0);
        }
        ++s.t;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
        const double* g = p.has_grad() ? p.grad().data() : nullptr;
        double* w = p.data();
        for (size_t i = 0; i < n; ++i) {
            const double gi = g ? g[i] : 0.0;
            s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
            s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
        }
    }
}

void AdamW::zero_grad(const std::vector<Tensor>& params) {
    for (const Tensor& p : params) p.clear_grad();
}

}  // namespace perrec
