#include "perrec/recsys.hpp"

#include <algorithm>

#include "perrec/ops.hpp"

namespace perrec {

Tensor Projector::forward(Tape* tape, const Tensor& xy) const {
    if (xy.numel() != cfg.in_dim)
        throw ContractError("projector: expected input width " + std::to_string(cfg.in_dim) +
                            ", got " + shape_str(xy.shape()));
    Tensor h = relu(tape, add(tape, vecmat(tape, xy, w1), b1));
    return add(tape, vecmat(tape, h, w2), b2);
}

std::vector<std::pair<std::string, Tensor>> Projector::parameters(const std::string& prefix) const {
    return {{prefix + "/w1", w1}, {prefix + "/b1", b1}, {prefix + "/w2", w2}, {prefix + "/b2", b2}};
}

int64_t Projector::parameter_count() const {
    return w1.numel() + b1.numel() + w2.numel() + b2.numel();
}

uint64_t Projector::checksum() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& [name, t] : parameters("p")) {
        h = fnv1a(name, h);
        h = fnv1a(t.data(), static_cast<size_t>(t.numel()) * sizeof(double), h);
    }
    return h;
}

Projector make_projector(const ProjectorConfig& cfg, uint64_t seed) {
    if (cfg.in_dim < 1 || cfg.hidden < 1 || cfg.out_dim < 1)
        throw ConfigError("projector dims must be positive");
    Rng rng = Rng::stream(seed, "projector");
    Projector p;
    p.cfg = cfg;
    p.w1 = Tensor::randn({cfg.in_dim, cfg.hidden}, rng,
                         std::sqrt(2.0 / static_cast<double>(cfg.in_dim)), true);
    p.b1 = Tensor::zeros({cfg.hidden}, true);
    p.w2 = Tensor::randn({cfg.hidden, cfg.out_dim}, rng,
                         std::sqrt(2.0 / static_cast<double>(cfg.hidden)), true);
    p.b2 = Tensor::zeros({cfg.out_dim}, true);
    return p;
}

Projector clone_projector(const Projector& src) {
    Projector p;
    p.cfg = src.cfg;
    p.w1 = src.w1.clone();
    p.b1 = src.b1.clone();
    p.w2 = src.w2.clone();
    p.b2 = src.b2.clone();
    return p;
}

namespace {

EncoderLayer make_block(int d, Rng& rng) {
    const double ws = 1.0 / std::sqrt(static_cast<double>(d));
    EncoderLayer l;
    l.wq = Tensor::randn({d, d}, rng, ws, true);
    l.bq = Tensor::zeros({d}, true);
    l.wk = Tensor::randn({d, d}, rng, ws, true);
    l.bk = Tensor::zeros({d}, true);
    l.wv = Tensor::randn({d, d}, rng, ws, true);
    l.bv = Tensor::zeros({d}, true);
    l.wo = Tensor::randn({d, d}, rng, ws, true);
    l.bo = Tensor::zeros({d}, true);
    l.ln1_g = Tensor::full({d}, 1.0, true);
    l.ln1_b = Tensor::zeros({d}, true);
    l.ln2_g = Tensor::full({d}, 1.0, true);
    l.ln2_b = Tensor::zeros({d}, true);
    l.w_ff1 = Tensor::randn({d, d}, rng, ws, true);
    l.b_ff1 = Tensor::zeros({d}, true);
    l.w_ff2 = Tensor::randn({d, d}, rng, ws, true);
    l.b_ff2 = Tensor::zeros({d}, true);
    return l;
}

}  // namespace

Sasrec make_sasrec(const SasrecConfig& cfg, uint64_t seed) {
    if (cfg.d < 1 || cfg.n_blocks < 1 || cfg.n_heads < 1 || cfg.max_len < 1)
        throw ConfigError("sasrec dims must be positive");
    if (cfg.d % cfg.n_heads != 0)
        throw ConfigError("sasrec: d " + std::to_string(cfg.d) + " not divisible by heads " +
                          std::to_string(cfg.n_heads));
    Rng rng = Rng::stream(seed, "sasrec");
    Sasrec s;
    s.cfg = cfg;
    s.pos = Tensor::randn({cfg.max_len, cfg.d}, rng, 0.02, true);
    for (int i = 0; i < cfg.n_blocks; ++i) s.blocks.push_back(make_block(cfg.d, rng));
    s.lnf_g = Tensor::full({cfg.d}, 1.0, true);
    s.lnf_b = Tensor::zeros({cfg.d}, true);
    return s;
}

Tensor Sasrec::forward(Tape* tape, const Tensor& z_seq, bool train, Rng* dropout_rng) const {
    if (z_seq.rank() != 2 || z_seq.dim(1) != cfg.d)
        throw ContractError("sasrec: expected [m×" + std::to_string(cfg.d) + "], got " +
                            shape_str(z_seq.shape()));
    const int64_t m = z_seq.dim(0);
    if (m < 1 || m > cfg.max_len)
        throw ContractError("sasrec: sequence length " + std::to_string(m) +
                            " outside [1, " + std::to_string(cfg.max_len) + "] (truncate upstream)");
    if (train && dropout_rng == nullptr)
        throw ContractError("sasrec: training forward needs a dropout stream");

    std::vector<int64_t> posv(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) posv[static_cast<size_t>(i)] = i;
    Tensor x = add(tape, z_seq, gather_rows(tape, pos, posv));
    if (train && cfg.dropout > 0.0) x = dropout(tape, x, cfg.dropout, *dropout_rng);

    for (const EncoderLayer& l : blocks) {
        Tensor a = layer_norm(tape, x, l.ln1_g, l.ln1_b);
        Tensor q = add(tape, matmul(tape, a, l.wq), l.bq);
        Tensor k = add(tape, matmul(tape, a, l.wk), l.bk);
        Tensor v = add(tape, matmul(tape, a, l.wv), l.bv);
        Tensor att = attention(tape, q, k, v, cfg.n_heads, /*causal=*/true).out;
        Tensor att_o = add(tape, matmul(tape, att, l.wo), l.bo);
        if (train && cfg.dropout > 0.0) att_o = dropout(tape, att_o, cfg.dropout, *dropout_rng);
        x = add(tape, x, att_o);

        Tensor f = layer_norm(tape, x, l.ln2_g, l.ln2_b);
        Tensor h = relu(tape, add(tape, matmul(tape, f, l.w_ff1), l.b_ff1));
        Tensor ff_o = add(tape, matmul(tape, h, l.w_ff2), l.b_ff2);
        if (train && cfg.dropout > 0.0) ff_o = dropout(tape, ff_o, cfg.dropout, *dropout_rng);
        x = add(tape, x, ff_o);
    }
    return layer_norm(tape, x, lnf_g, lnf_b);
}

std::vector<std::pair<std::string, Tensor>> Sasrec::parameters(const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back(prefix + "/pos", pos);
    for (size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = prefix + "/block" + std::to_string(i) + "/";
        const EncoderLayer& l = blocks[i];
        out.emplace_back(p + "wq", l.wq);
        out.emplace_back(p + "bq", l.bq);
        out.emplace_back(p + "wk", l.wk);
        out.emplace_back(p + "bk", l.bk);
        out.emplace_back(p + "wv", l.wv);
        out.emplace_back(p + "bv", l.bv);
        out.emplace_back(p + "wo", l.wo);
        out.emplace_back(p + "bo", l.bo);
        out.emplace_back(p + "ln1_g", l.ln1_g);
        out.emplace_back(p + "ln1_b", l.ln1_b);
        out.emplace_back(p + "ln2_g", l.ln2_g);
        out.emplace_back(p + "ln2_b", l.ln2_b);
        out.emplace_back(p + "w_ff1", l.w_ff1);
        out.emplace_back(p + "b_ff1", l.b_ff1);
        out.emplace_back(p + "w_ff2", l.w_ff2);
        out.emplace_back(p + "b_ff2", l.b_ff2);
    }
    out.emplace_back(prefix + "/lnf_g", lnf_g);
    out.emplace_back(prefix + "/lnf_b", lnf_b);
    return out;
}

int64_t Sasrec::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : parameters("s")) n += t.numel();
    return n;
}

uint64_t Sasrec::checksum() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& [name, t] : parameters("s")) {
        h = fnv1a(name, h);
        h = fnv1a(t.data(), static_cast<size_t>(t.numel()) * sizeof(double), h);
    }
    return h;
}

Tensor make_transductive(int64_t n_items, int d, uint64_t seed) {
    if (n_items < 1 || d < 1) throw ConfigError("transductive table dims must be positive");
    Rng rng = Rng::stream(seed, "transductive");
    return Tensor::randn({n_items, d}, rng, 0.02, true);
}

const char* loss_mode_name(LossMode m) {
    return m == LossMode::StandardBce ? "standard_bce" : "literal";
}

LossMode loss_mode_from(const std::string& name) {
    if (name == "standard_bce") return LossMode::StandardBce;
    if (name == "literal") return LossMode::Literal;
    throw ConfigError("unknown loss mode '" + name + "' (expected standard_bce|literal)");
}

Tensor sequence_loss(Tape* tape, const std::vector<Tensor>& pos, const std::vector<Tensor>& neg,
                     const std::vector<Tensor>& pred, LossMode mode) {
    if (pos.size() != neg.size() || pos.size() != pred.size())
        throw ContractError("sequence_loss: length mismatch pos=" + std::to_string(pos.size()) +
                            " neg=" + std::to_string(neg.size()) +
                            " pred=" + std::to_string(pred.size()));
    Tensor loss = Tensor::scalar(0.0);
    for (size_t p = 0; p < pos.size(); ++p) {
        Tensor s_pos = dot(tape, pred[p], pos[p]);
        Tensor s_neg = dot(tape, pred[p], neg[p]);
        Tensor term;
        if (mode == LossMode::Literal) {
            term = sub(tape, log_sigmoid(tape, s_neg), log_sigmoid(tape, s_pos));
        } else {
            term = scale(tape,
                         add(tape, log_sigmoid(tape, s_pos),
                             log_sigmoid(tape, scale(tape, s_neg, -1.0))),
                         -1.0);
        }
        loss = add(tape, loss, term);
    }
    return loss;
}

int64_t rank_of_target(std::span<const double> scores, std::span<const int64_t> ids,
                       int64_t target_idx, const std::vector<char>& excluded) {
    const double ts = scores[static_cast<size_t>(target_idx)];
    const int64_t tid = ids[static_cast<size_t>(target_idx)];
    int64_t rank = 1;
    for (size_t j = 0; j < scores.size(); ++j) {
        if (static_cast<int64_t>(j) == target_idx) continue;
        if (!excluded.empty() && excluded[j]) continue;
        if (scores[j] > ts || (scores[j] == ts && ids[j] < tid)) ++rank;
    }
    return rank;
}

std::vector<int64_t> rank_all(std::span<const double> scores, std::span<const int64_t> ids,
                              const std::vector<char>& excluded) {
    std::vector<size_t> order;
    order.reserve(scores.size());
    for (size_t j = 0; j < scores.size(); ++j)
        if (excluded.empty() || !excluded[j]) order.push_back(j);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return ids[a] < ids[b];
    });
    std::vector<int64_t> ranked;
    ranked.reserve(order.size());
    for (size_t j : order) ranked.push_back(ids[j]);
    return ranked;
}

Metrics metrics_from_ranks(std::vector<int64_t> ranks, const std::vector<int>& ks) {
    Metrics m;
    m.n_users = static_cast<int64_t>(ranks.size());
    for (int k : ks) {
        double hit = 0.0, ndcg = 0.0;
        for (int64_t r : ranks) {
            if (r <= k) {
                hit += 1.0;
                ndcg += 1.0 / std::log2(static_cast<double>(r) + 1.0);
            }
        }
        const double n = m.n_users > 0 ? static_cast<double>(m.n_users) : 1.0;
        m.hit[k] = hit / n;
        m.ndcg[k] = ndcg / n;
    }
    m.ranks = std::move(ranks);
    return m;
}

}  // namespace perrec
