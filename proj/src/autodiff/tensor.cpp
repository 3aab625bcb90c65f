#include "perrec/tensor.hpp"

#include <sstream>

namespace perrec {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.values()) x = v;
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ContractError("Tensor::from: shape " + shape_str(shape) +
                            " does not match data length " + std::to_string(data.size()));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.values()) x = rng.normal() * stddev;
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("Tensor::item: tensor is not scalar, shape " + shape_str(shape()));
    return p_->value[0];
}

double* Tensor::grad_accum() const {
    if (p_->grad.empty()) p_->grad.assign(p_->value.size(), 0.0);
    return p_->grad.data();
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = p_->shape;
    impl->value = p_->value;
    impl->requires_grad = p_->requires_grad;
    return Tensor(std::move(impl));
}

size_t Tape::count(std::string_view op) const {
    size_t c = 0;
    for (const auto& n : nodes_)
        if (op == n.op) ++c;
    return c;
}

void backward(Tape& tape, Tensor loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    loss.grad_accum()[0] += 1.0;
    const auto& nodes = tape.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) it->backward();
}

}  // namespace perrec
