#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "perrec/common.hpp"
#include "perrec/rng.hpp"

namespace perrec {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until backward touches it
    bool requires_grad = false;
};

// Shared-ownership handle to a dense row-major float64 tensor. Copying a
// Tensor aliases the same storage; ops capture handles by value in their
// backward closures.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    int rank() const { return static_cast<int>(p_->shape.size()); }
    int64_t dim(int i) const { return p_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(p_->value.size()); }

    // Tensor is a handle: const applies to the handle, not the storage,
    // mirroring shared_ptr. Backward closures capture const copies and still
    // accumulate gradients through them.
    double* data() const { return p_->value.data(); }
    std::vector<double>& values() const { return p_->value; }
    double item() const;  // scalar tensors only

    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool b) const { p_->requires_grad = b; }

    bool has_grad() const { return !p_->grad.empty(); }
    const std::vector<double>& grad() const { return p_->grad; }
    // Zero-initialized gradient buffer, allocated on first use.
    double* grad_accum() const;
    // Releases the gradient buffer (absent again, not merely zeroed).
    void clear_grad() const { p_->grad.clear(); p_->grad.shrink_to_fit(); }

    uint64_t checksum() const {
        return fnv1a(p_->value.data(), p_->value.size() * sizeof(double));
    }
    Tensor clone() const;  // deep copy of values; grad not copied

    TensorImpl* impl() const { return p_.get(); }
    bool same_storage(const Tensor& other) const { return p_ == other.p_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> p) : p_(std::move(p)) {}
    std::shared_ptr<TensorImpl> p_;
};

// Dynamic graph: ops append nodes in execution order; backward replays the
// closures in reverse. Nodes are only recorded when a gradient can flow
// (some input requires grad) unless record_all is set, which is used by
// structural tests that inspect the op mix of a forward pass.
class Tape {
public:
    struct Node {
        const char* op;
        std::function<void()> backward;
    };

    bool record_all = false;

    void push(const char* op, std::function<void()> fn) {
        nodes_.push_back(Node{op, std::move(fn)});
    }
    size_t size() const { return nodes_.size(); }
    size_t count(std::string_view op) const;
    void clear() { nodes_.clear(); }
    const std::vector<Node>& nodes() const { return nodes_; }

private:
    std::vector<Node> nodes_;
};

// Reverse-mode sweep from a scalar loss. Seeds d(loss)/d(loss) = 1 and runs
// every recorded node's backward in reverse order. Throws ContractError if
// the loss is not a scalar.
void backward(Tape& tape, Tensor loss);

}  // namespace perrec
