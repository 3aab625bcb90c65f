#pragma once

#include <unordered_map>
#include <vector>

#include "perrec/tensor.hpp"

namespace perrec {

// Decoupled weight decay with first/second-moment estimates. Per-tensor state
// is keyed by storage identity, so stepping a subset of parameters (only the
// batch group's module plus the shared components) leaves every other
// tensor's values and moments untouched.
struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    // Missing gradient buffers count as zero gradient.
    void step(const std::vector<Tensor>& params);
    static void zero_grad(const std::vector<Tensor>& params);

    const AdamWConfig& config() const { return cfg_; }

private:
    struct State {
        std::vector<double> m, v;
        int64_t t = 0;
    };
    AdamWConfig cfg_;
    std::unordered_map<TensorImpl*, State> state_;
};

}  // namespace perrec
