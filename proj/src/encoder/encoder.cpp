#include "perrec/encoder.hpp"

#include <numeric>

#include "perrec/peft.hpp"

namespace perrec {

void EncoderConfig::validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_prime <= 0 || vocab_size < 2 ||
        max_text_len < 2 || n_patches <= 0 || patch_dim <= 0)
        throw ConfigError("encoder config: all dimensions must be positive (vocab >= 2, text len >= 2)");
    if (d_model % n_heads != 0)
        throw ConfigError("encoder config: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
}

namespace {

EncoderLayer make_layer(const EncoderConfig& cfg, Rng& rng) {
    const int d = cfg.d_model;
    const int f = cfg.ffn_dim();
    const double ws = 1.0 / std::sqrt(static_cast<double>(d));
    EncoderLayer l;
    l.wq = Tensor::randn({d, d}, rng, ws);
    l.bq = Tensor::zeros({d});
    l.wk = Tensor::randn({d, d}, rng, ws);
    l.bk = Tensor::zeros({d});
    l.wv = Tensor::randn({d, d}, rng, ws);
    l.bv = Tensor::zeros({d});
    l.wo = Tensor::randn({d, d}, rng, ws);
    l.bo = Tensor::zeros({d});
    l.ln1_g = Tensor::full({d}, 1.0);
    l.ln1_b = Tensor::zeros({d});
    l.ln2_g = Tensor::full({d}, 1.0);
    l.ln2_b = Tensor::zeros({d});
    l.w_ff1 = Tensor::randn({d, f}, rng, ws);
    l.b_ff1 = Tensor::zeros({f});
    l.w_ff2 = Tensor::randn({f, d}, rng, 1.0 / std::sqrt(static_cast<double>(f)));
    l.b_ff2 = Tensor::zeros({d});
    return l;
}

void finish_tower(EncoderTower& t, const EncoderConfig& cfg, Rng& rng) {
    const int d = cfg.d_model;
    for (int i = 0; i < cfg.n_layers; ++i) t.layers.push_back(make_layer(cfg, rng));
    t.lnf_g = Tensor::full({d}, 1.0);
    t.lnf_b = Tensor::zeros({d});
    t.head_w = Tensor::randn({d, cfg.d_prime}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    t.head_b = Tensor::zeros({cfg.d_prime});
}

void layer_params(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                  const EncoderLayer& l, int idx) {
    const std::string p = prefix + "/layer" + std::to_string(idx) + "/";
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

void tower_params(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                  const EncoderTower& t) {
    out.emplace_back(prefix + "/embed", t.embed);
    if (t.embed_bias.defined()) out.emplace_back(prefix + "/embed_bias", t.embed_bias);
    out.emplace_back(prefix + "/pos", t.pos);
    for (size_t i = 0; i < t.layers.size(); ++i)
        layer_params(out, prefix, t.layers[i], static_cast<int>(i));
    out.emplace_back(prefix + "/lnf_g", t.lnf_g);
    out.emplace_back(prefix + "/lnf_b", t.lnf_b);
    out.emplace_back(prefix + "/head_w", t.head_w);
    out.emplace_back(prefix + "/head_b", t.head_b);
}

}  // namespace

EncoderModel build_encoder(const EncoderConfig& cfg) {
    cfg.validate();
    EncoderModel m;
    m.cfg = cfg;
    Rng rng = Rng::stream(cfg.seed, "encoder");

    m.text.embed = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.02);
    m.text.pos = Tensor::randn({cfg.max_text_len, cfg.d_model}, rng, 0.02);
    finish_tower(m.text, cfg, rng);

    m.vision.embed = Tensor::randn({cfg.patch_dim, cfg.d_model}, rng,
                                   1.0 / std::sqrt(static_cast<double>(cfg.patch_dim)));
    m.vision.embed_bias = Tensor::zeros({cfg.d_model});
    m.vision.pos = Tensor::randn({cfg.n_patches, cfg.d_model}, rng, 0.02);
    finish_tower(m.vision, cfg, rng);

    // Frozen: requires_grad stays false on every tensor.
    return m;
}

std::vector<std::pair<std::string, Tensor>> EncoderModel::parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    tower_params(out, "encoder/text", text);
    tower_params(out, "encoder/vision", vision);
    return out;
}

int64_t EncoderModel::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
}

uint64_t EncoderModel::checksum() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& [name, t] : parameters()) {
        h = fnv1a(name, h);
        h = fnv1a(t.data(), static_cast<size_t>(t.numel()) * sizeof(double), h);
    }
    return h;
}

namespace {

struct TowerHooks {
    const LoraTower* lora = nullptr;
    const Ia3Tower* ia3 = nullptr;
};

Tensor linear_rows(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b,
                   const LoraSite* lora) {
    Tensor out = matmul(tape, x, w);
    if (lora) out = add(tape, out, matmul(tape, matmul(tape, x, lora->a), lora->b));
    return add(tape, out, b);
}

struct TowerRun {
    Tensor pooled;  // final-LN'd pooled state [d_model]
    Tensor attn;    // last layer [h×T×T]
    std::vector<Tensor> layer_pooled;
};

// pool_row < 0 means mean over positions, otherwise take that row.
TowerRun run_tower(Tape* tape, const EncoderTower& tw, const EncoderConfig& cfg, Tensor e,
                   int pool_row, const TowerHooks& hooks, bool want_pooled) {
    auto pool = [&](const Tensor& m) {
        return pool_row < 0 ? mean_rows(tape, m) : row(tape, m, pool_row);
    };
    TowerRun run;
    for (size_t li = 0; li < tw.layers.size(); ++li) {
        const EncoderLayer& l = tw.layers[li];
        Tensor a = layer_norm(tape, e, l.ln1_g, l.ln1_b);
        Tensor q = linear_rows(tape, a, l.wq, l.bq, hooks.lora ? &hooks.lora->q[li] : nullptr);
        Tensor k = linear_rows(tape, a, l.wk, l.bk, nullptr);
        Tensor v = linear_rows(tape, a, l.wv, l.bv, hooks.lora ? &hooks.lora->v[li] : nullptr);
        if (hooks.ia3) {
            k = mul(tape, k, hooks.ia3->k[li]);
            v = mul(tape, v, hooks.ia3->v[li]);
        }
        auto att = attention(tape, q, k, v, cfg.n_heads, /*causal=*/false);
        if (li + 1 == tw.layers.size()) run.attn = att.weights;
        e = add(tape, e, linear_rows(tape, att.out, l.wo, l.bo, nullptr));

        Tensor f = layer_norm(tape, e, l.ln2_g, l.ln2_b);
        Tensor h1 = gelu(tape, add(tape, matmul(tape, f, l.w_ff1), l.b_ff1));
        if (hooks.ia3) h1 = mul(tape, h1, hooks.ia3->ff[li]);
        e = add(tape, e, add(tape, matmul(tape, h1, l.w_ff2), l.b_ff2));
        if (want_pooled) run.layer_pooled.push_back(pool(e));
    }
    run.pooled = layer_norm(tape, pool(e), tw.lnf_g, tw.lnf_b);
    return run;
}

Tensor tower_head(Tape* tape, const EncoderTower& tw, const Tensor& pooled) {
    return add(tape, vecmat(tape, pooled, tw.head_w), tw.head_b);
}

Tensor side_forward(Tape* tape, const SideTower& st, const std::vector<Tensor>& pooled) {
    const int64_t hidden = st.up_w.dim(0);
    Tensor one = Tensor::scalar(1.0);
    Tensor s = Tensor::zeros({hidden});
    for (size_t i = 0; i < pooled.size(); ++i) {
        Tensor d = relu(tape, add(tape, vecmat(tape, pooled[i], st.down_w[i]), st.down_b[i]));
        Tensor g = sigmoid(tape, st.gate[i]);
        s = add(tape, mul(tape, s, g), mul(tape, d, sub(tape, one, g)));
    }
    return add(tape, vecmat(tape, s, st.up_w), st.up_b);
}

std::vector<int> title_tokens(const EncoderConfig& cfg, const ItemRecord& item) {
    std::vector<int> title;
    for (int tok : item.text_tokens) {
        if (tok == EncoderConfig::pad_token) break;  // ids beyond the title are never read
        if (tok < 0 || tok >= cfg.vocab_size)
            throw DataError("item " + std::to_string(item.item_id) + ": token " +
                            std::to_string(tok) + " outside vocabulary of " +
                            std::to_string(cfg.vocab_size));
        title.push_back(tok);
        if (static_cast<int>(title.size()) == cfg.max_text_len - 1) break;
    }
    return title;
}

Tensor text_input(Tape* tape, const EncoderModel& m, const std::vector<int>& ids) {
    std::vector<int64_t> rows(ids.begin(), ids.end());
    std::vector<int64_t> posv(ids.size());
    std::iota(posv.begin(), posv.end(), 0);
    return add(tape, gather_rows(tape, m.text.embed, rows), gather_rows(tape, m.text.pos, posv));
}

Tensor vision_input(Tape* tape, const EncoderModel& m, const ItemRecord& item) {
    const EncoderConfig& cfg = m.cfg;
    if (static_cast<int>(item.patches.size()) != cfg.n_patches)
        throw DataError("item " + std::to_string(item.item_id) + ": expected " +
                        std::to_string(cfg.n_patches) + " patches, got " +
                        std::to_string(item.patches.size()));
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(cfg.n_patches) * cfg.patch_dim);
    for (const auto& p : item.patches) {
        if (static_cast<int>(p.size()) != cfg.patch_dim)
            throw DataError("item " + std::to_string(item.item_id) + ": patch dim " +
                            std::to_string(p.size()) + " != " + std::to_string(cfg.patch_dim));
        flat.insert(flat.end(), p.begin(), p.end());
    }
    Tensor patches = Tensor::from({cfg.n_patches, cfg.patch_dim}, std::move(flat));
    std::vector<int64_t> posv(static_cast<size_t>(cfg.n_patches));
    std::iota(posv.begin(), posv.end(), 0);
    Tensor e = add(tape, matmul(tape, patches, m.vision.embed), m.vision.embed_bias);
    return add(tape, e, gather_rows(tape, m.vision.pos, posv));
}

}  // namespace

EncodeResult encode(Tape* tape, const EncoderModel& model, const PeftAttachment* peft,
                    const ItemRecord& item) {
    const EncoderConfig& cfg = model.cfg;
    const std::vector<int> title = title_tokens(cfg, item);
    std::vector<int> ids = title;
    ids.push_back(cfg.eos_token());
    const int eos_pos = static_cast<int>(title.size());

    EncodeResult res;
    res.trace.eos_pos = eos_pos;
    res.trace.n_title = static_cast<int>(title.size());

    const bool side = peft && peft->kind == PeftKind::SideNet;
    if (side) {
        // Base pass off-tape: the frozen intermediates are constants to the
        // side network, so backward never traverses the towers.
        std::vector<Tensor> text_pooled, vision_pooled;
        Tensor x_base, y_base;
        SideCacheEntry* hit = nullptr;
        if (peft->cache_enabled && peft->cache) {
            auto it = peft->cache->find(item.item_id);
            if (it != peft->cache->end()) hit = &it->second;
        }
        if (hit) {
            for (const auto& v : hit->text_pooled)
                text_pooled.push_back(Tensor::from({cfg.d_model}, v));
            for (const auto& v : hit->vision_pooled)
                vision_pooled.push_back(Tensor::from({cfg.d_model}, v));
            x_base = Tensor::from({cfg.d_prime}, hit->x);
            y_base = Tensor::from({cfg.d_prime}, hit->y);
        } else {
            TowerRun tr = run_tower(nullptr, model.text, cfg, text_input(nullptr, model, ids),
                                    eos_pos, {}, /*want_pooled=*/true);
            TowerRun vr = run_tower(nullptr, model.vision, cfg, vision_input(nullptr, model, item),
                                    -1, {}, /*want_pooled=*/true);
            y_base = tower_head(nullptr, model.text, tr.pooled);
            x_base = tower_head(nullptr, model.vision, vr.pooled);
            text_pooled = tr.layer_pooled;
            vision_pooled = vr.layer_pooled;
            res.trace.text_attention = tr.attn;
            res.trace.vision_attention = vr.attn;
            if (peft->cache_enabled && peft->cache) {
                SideCacheEntry e;
                for (const auto& t : text_pooled) e.text_pooled.push_back(t.values());
                for (const auto& t : vision_pooled) e.vision_pooled.push_back(t.values());
                e.x = x_base.values();
                e.y = y_base.values();
                (*peft->cache)[item.item_id] = std::move(e);
            }
        }
        res.trace.text_pooled = text_pooled;
        res.trace.vision_pooled = vision_pooled;
        res.y = add(tape, y_base, side_forward(tape, peft->side_text, text_pooled));
        res.x = add(tape, x_base, side_forward(tape, peft->side_vision, vision_pooled));
        return res;
    }

    const bool want_pooled = tape == nullptr;
    TowerHooks text_hooks, vision_hooks;
    if (peft && peft->kind == PeftKind::Lora) {
        text_hooks.lora = &peft->lora_text;
        vision_hooks.lora = &peft->lora_vision;
    } else if (peft && peft->kind == PeftKind::Ia3) {
        text_hooks.ia3 = &peft->ia3_text;
        vision_hooks.ia3 = &peft->ia3_vision;
    }
    TowerRun tr =
        run_tower(tape, model.text, cfg, text_input(tape, model, ids), eos_pos, text_hooks, want_pooled);
    TowerRun vr = run_tower(tape, model.vision, cfg, vision_input(tape, model, item), -1,
                            vision_hooks, want_pooled);
    res.y = tower_head(tape, model.text, tr.pooled);
    res.x = tower_head(tape, model.vision, vr.pooled);
    res.trace.text_attention = tr.attn;
    res.trace.vision_attention = vr.attn;
    res.trace.text_pooled = tr.layer_pooled;
    res.trace.vision_pooled = vr.layer_pooled;
    return res;
}

std::vector<double> eos_attention(const EncoderTrace& trace) {
    if (!trace.text_attention.defined() || trace.eos_pos < 0)
        throw ContractError("eos_attention: trace has no text attention weights");
    if (trace.n_title < 1)
        throw ContractError("eos_attention: item has no title tokens");
    const Tensor& w = trace.text_attention;  // [h×T×T]
    const int64_t heads = w.dim(0);
    const int64_t t_len = w.dim(1);
    std::vector<double> dist(static_cast<size_t>(trace.n_title), 0.0);
    for (int64_t h = 0; h < heads; ++h) {
        const double* row = w.data() + (h * t_len + trace.eos_pos) * t_len;
        for (int j = 0; j < trace.n_title; ++j) dist[static_cast<size_t>(j)] += row[j];
    }
    double z = 0.0;
    for (double v : dist) z += v;
    for (double& v : dist) v /= z;
    return dist;
}

}  // namespace perrec
