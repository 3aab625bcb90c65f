#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "perrec/encoder.hpp"
#include "perrec/tensor.hpp"

namespace perrec {

// Two-layer MLP projecting the concatenated tower outputs [2*d_prime] to the
// recommender dimension d.
struct ProjectorConfig {
    int in_dim = 128;
    int hidden = 64;
    int out_dim = 32;
};

struct Projector {
    ProjectorConfig cfg;
    Tensor w1, b1, w2, b2;

    Tensor forward(Tape* tape, const Tensor& xy) const;
    std::vector<std::pair<std::string, Tensor>> parameters(const std::string& prefix) const;
    int64_t parameter_count() const;
    uint64_t checksum() const;
};

Projector make_projector(const ProjectorConfig& cfg, uint64_t seed);
Projector clone_projector(const Projector& src);

// Causal self-attention sequential recommender.
struct SasrecConfig {
    int d = 32;
    int n_blocks = 2;
    int n_heads = 4;
    int max_len = 10;
    double dropout = 0.3;
};

struct Sasrec {
    SasrecConfig cfg;
    Tensor pos;
    std::vector<EncoderLayer> blocks;  // ffn dim = d
    Tensor lnf_g, lnf_b;

    // z_seq: [m×d], 1 <= m <= max_len (callers truncate to the most recent
    // items). Returns one predictive vector per position, strictly causal.
    // dropout_rng must be non-null when train is true.
    Tensor forward(Tape* tape, const Tensor& z_seq, bool train, Rng* dropout_rng) const;

    std::vector<std::pair<std::string, Tensor>> parameters(const std::string& prefix) const;
    int64_t parameter_count() const;
    uint64_t checksum() const;
};

Sasrec make_sasrec(const SasrecConfig& cfg, uint64_t seed);

// Free learnable vector per item id, shared across groups.
Tensor make_transductive(int64_t n_items, int d, uint64_t seed);

// Sequence loss over n-1 steps. The literal form
//   sum_p log sigma(neg_p · pred_p) - sum_p log sigma(pos_p · pred_p)
// is printed in the training objective; standard binary cross-entropy
//   sum_p [ -log sigma(pos_p · pred_p) - log sigma(-neg_p · pred_p) ]
// is the bounded default used for training.
enum class LossMode { StandardBce, Literal };

const char* loss_mode_name(LossMode m);
LossMode loss_mode_from(const std::string& name);

Tensor sequence_loss(Tape* tape, const std::vector<Tensor>& pos, const std::vector<Tensor>& neg,
                     const std::vector<Tensor>& pred, LossMode mode);

// --- ranking -------------------------------------------------------------

// Rank of the target among non-excluded candidates: 1 + the number of
// candidates with a higher score, ties broken by ascending item id. The
// target itself is never excluded.
int64_t rank_of_target(std::span<const double> scores, std::span<const int64_t> ids,
                       int64_t target_idx, const std::vector<char>& excluded);

// Full descending ranking (score desc, id asc), exclusions filtered out.
std::vector<int64_t> rank_all(std::span<const double> scores, std::span<const int64_t> ids,
                              const std::vector<char>& excluded);

struct Metrics {
    std::map<int, double> hit;   // K -> Hit-Ratio@K
    std::map<int, double> ndcg;  // K -> NDCG@K
    std::vector<int64_t> ranks;  // per-user 1-based rank of the held-out target
    int64_t n_users = 0;

    std::string to_json_string() const;  // {"hit": {...}, "ndcg": {...}, "n_users": n}
};

// Hit@K = fraction of users with rank <= K; NDCG@K = mean of 1/log2(rank+1)
// for rank <= K, else 0.
Metrics metrics_from_ranks(std::vector<int64_t> ranks, const std::vector<int>& ks);

}  // namespace perrec
