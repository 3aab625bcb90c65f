#pragma once

#include <span>

#include "perrec/tensor.hpp"

namespace perrec {

// Forward ops over the tape. `tape == nullptr` means evaluation mode: compute
// the forward value and record nothing. Gradients are recorded only when some
// input requires grad (or tape->record_all for structural inspection).
//
// Broadcasting (add / sub / mul): b may have the same shape as a, be a
// rank-1 vector matching a's last dimension (applied per row), or be scalar.

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);  // [m×k]·[k×n]
Tensor vecmat(Tape* tape, const Tensor& v, const Tensor& w);  // [k]·[k×n] -> [n]
Tensor dot(Tape* tape, const Tensor& a, const Tensor& b);     // [n]·[n] -> scalar

Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);     // Hadamard
Tensor scale(Tape* tape, const Tensor& a, double s);

Tensor log_op(Tape* tape, const Tensor& a);  // domain error on x <= 0
Tensor sigmoid(Tape* tape, const Tensor& a);
Tensor log_sigmoid(Tape* tape, const Tensor& a);  // stable: -softplus(-x)
Tensor softplus(Tape* tape, const Tensor& a);
Tensor relu(Tape* tape, const Tensor& a);
Tensor gelu(Tape* tape, const Tensor& a);  // exact erf form

Tensor concat(Tape* tape, const Tensor& a, const Tensor& b);  // last axis

Tensor sum_all(Tape* tape, const Tensor& a);
Tensor mean_all(Tape* tape, const Tensor& a);
Tensor mean_rows(Tape* tape, const Tensor& a);  // [m×n] -> [n]

Tensor row(Tape* tape, const Tensor& a, int64_t i);                       // [m×n] -> [n]
Tensor gather_rows(Tape* tape, const Tensor& a, std::vector<int64_t> idx);  // -> [k×n]
Tensor stack_rows(Tape* tape, const std::vector<Tensor>& rows);           // k×[n] -> [k×n]

// Explicit seeded mask; scales kept entries by 1/(1-rate). Callers skip the
// op entirely in evaluation mode. rate == 0 is the identity.
Tensor dropout(Tape* tape, const Tensor& a, double rate, Rng& rng);

// Per-row normalization over the last axis, then affine with gamma/beta [n].
Tensor layer_norm(Tape* tape, const Tensor& a, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

struct AttentionResult {
    Tensor out;      // [T×d]
    Tensor weights;  // [h×T×T], detached snapshot (analysis only)
};

// Multi-head scaled dot-product attention over a [T×d] sequence. Rows of the
// weight tensor are stochastic; causal=true masks strictly-future positions.
AttentionResult attention(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v,
                          int n_heads, bool causal);

}  // namespace perrec
