#include "perrec/peft.hpp"

namespace perrec {

const char* peft_kind_name(PeftKind k) {
    switch (k) {
        case PeftKind::Lora: return "lora";
        case PeftKind::Ia3: return "ia3";
        case PeftKind::SideNet: return "sidenet";
    }
    return "?";
}

PeftKind peft_kind_from(const std::string& name) {
    if (name == "lora") return PeftKind::Lora;
    if (name == "ia3") return PeftKind::Ia3;
    if (name == "sidenet") return PeftKind::SideNet;
    throw ConfigError("unknown PEFT kind '" + name + "' (expected lora|ia3|sidenet)");
}

namespace {

LoraTower make_lora_tower(const EncoderConfig& cfg, int rank, Rng& rng) {
    LoraTower t;
    const int d = cfg.d_model;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    for (int i = 0; i < cfg.n_layers; ++i) {
        // A random, B zero: the initial delta AB is exactly zero.
        t.q.push_back({Tensor::randn({d, rank}, rng, sd, true), Tensor::zeros({rank, d}, true)});
        t.v.push_back({Tensor::randn({d, rank}, rng, sd, true), Tensor::zeros({rank, d}, true)});
    }
    return t;
}

Ia3Tower make_ia3_tower(const EncoderConfig& cfg) {
    Ia3Tower t;
    for (int i = 0; i < cfg.n_layers; ++i) {
        t.k.push_back(Tensor::full({cfg.d_model}, 1.0, true));
        t.v.push_back(Tensor::full({cfg.d_model}, 1.0, true));
        t.ff.push_back(Tensor::full({cfg.ffn_dim()}, 1.0, true));
    }
    return t;
}

SideTower make_side_tower(const EncoderConfig& cfg, int hidden, Rng& rng) {
    SideTower t;
    const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    for (int i = 0; i < cfg.n_layers; ++i) {
        t.down_w.push_back(Tensor::randn({cfg.d_model, hidden}, rng, sd, true));
        t.down_b.push_back(Tensor::zeros({hidden}, true));
        t.gate.push_back(Tensor::zeros({1}, true));  // sigmoid(0) = 0.5
    }
    // Zero-initialized up-projection: the side contribution starts at zero.
    t.up_w = Tensor::zeros({hidden, cfg.d_prime}, true);
    t.up_b = Tensor::zeros({cfg.d_prime}, true);
    return t;
}

void lora_params(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                 const LoraTower& t) {
    for (size_t i = 0; i < t.q.size(); ++i) {
        const std::string l = prefix + "/layer" + std::to_string(i);
        out.emplace_back(l + ".q/A", t.q[i].a);
        out.emplace_back(l + ".q/B", t.q[i].b);
        out.emplace_back(l + ".v/A", t.v[i].a);
        out.emplace_back(l + ".v/B", t.v[i].b);
    }
}

void ia3_params(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                const Ia3Tower& t) {
    for (size_t i = 0; i < t.k.size(); ++i) {
        const std::string l = prefix + "/layer" + std::to_string(i);
        out.emplace_back(l + ".k/l", t.k[i]);
        out.emplace_back(l + ".v/l", t.v[i]);
        out.emplace_back(l + ".ff/l", t.ff[i]);
    }
}

void side_params(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                 const SideTower& t) {
    for (size_t i = 0; i < t.down_w.size(); ++i) {
        const std::string l = prefix + "/layer" + std::to_string(i);
        out.emplace_back(l + "/down_w", t.down_w[i]);
        out.emplace_back(l + "/down_b", t.down_b[i]);
        out.emplace_back(l + "/gate", t.gate[i]);
    }
    out.emplace_back(prefix + "/up_w", t.up_w);
    out.emplace_back(prefix + "/up_b", t.up_b);
}

LoraTower clone_lora(const LoraTower& src) {
    LoraTower t;
    for (const auto& s : src.q) t.q.push_back({s.a.clone(), s.b.clone()});
    for (const auto& s : src.v) t.v.push_back({s.a.clone(), s.b.clone()});
    return t;
}

Ia3Tower clone_ia3(const Ia3Tower& src) {
    Ia3Tower t;
    for (const auto& s : src.k) t.k.push_back(s.clone());
    for (const auto& s : src.v) t.v.push_back(s.clone());
    for (const auto& s : src.ff) t.ff.push_back(s.clone());
    return t;
}

SideTower clone_side(const SideTower& src) {
    SideTower t;
    for (const auto& s : src.down_w) t.down_w.push_back(s.clone());
    for (const auto& s : src.down_b) t.down_b.push_back(s.clone());
    for (const auto& s : src.gate) t.gate.push_back(s.clone());
    t.up_w = src.up_w.clone();
    t.up_b = src.up_b.clone();
    return t;
}

}  // namespace

PeftAttachment attach(const EncoderModel& model, PeftKind kind, uint64_t seed,
                      const AttachOptions& opts) {
    PeftAttachment a;
    a.kind = kind;
    a.rank = opts.rank;
    a.side_hidden = opts.side_hidden;
    Rng rng = Rng::stream(seed, "peft");
    switch (kind) {
        case PeftKind::Lora:
            if (opts.rank < 1) throw ConfigError("lora rank must be >= 1");
            a.lora_text = make_lora_tower(model.cfg, opts.rank, rng);
            a.lora_vision = make_lora_tower(model.cfg, opts.rank, rng);
            break;
        case PeftKind::Ia3:
            a.ia3_text = make_ia3_tower(model.cfg);
            a.ia3_vision = make_ia3_tower(model.cfg);
            break;
        case PeftKind::SideNet:
            if (opts.side_hidden < 1) throw ConfigError("side hidden dim must be >= 1");
            a.side_text = make_side_tower(model.cfg, opts.side_hidden, rng);
            a.side_vision = make_side_tower(model.cfg, opts.side_hidden, rng);
            a.cache = std::make_shared<SideCache>();
            break;
    }
    return a;
}

PeftAttachment clone_attachment(const PeftAttachment& src) {
    PeftAttachment a;
    a.kind = src.kind;
    a.rank = src.rank;
    a.side_hidden = src.side_hidden;
    a.cache_enabled = src.cache_enabled;
    a.cache = src.cache;  // frozen-model values; safe to share
    switch (src.kind) {
        case PeftKind::Lora:
            a.lora_text = clone_lora(src.lora_text);
            a.lora_vision = clone_lora(src.lora_vision);
            break;
        case PeftKind::Ia3:
            a.ia3_text = clone_ia3(src.ia3_text);
            a.ia3_vision = clone_ia3(src.ia3_vision);
            break;
        case PeftKind::SideNet:
            a.side_text = clone_side(src.side_text);
            a.side_vision = clone_side(src.side_vision);
            break;
    }
    return a;
}

std::vector<std::pair<std::string, Tensor>> PeftAttachment::parameters(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    switch (kind) {
        case PeftKind::Lora:
            lora_params(out, prefix + "/text", lora_text);
            lora_params(out, prefix + "/vision", lora_vision);
            break;
        case PeftKind::Ia3:
            ia3_params(out, prefix + "/text", ia3_text);
            ia3_params(out, prefix + "/vision", ia3_vision);
            break;
        case PeftKind::SideNet:
            side_params(out, prefix + "/text", side_text);
            side_params(out, prefix + "/vision", side_vision);
            break;
    }
    return out;
}

int64_t PeftAttachment::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : parameters("peft")) n += t.numel();
    return n;
}

uint64_t PeftAttachment::checksum() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& [name, t] : parameters("peft")) {
        h = fnv1a(name, h);
        h = fnv1a(t.data(), static_cast<size_t>(t.numel()) * sizeof(double), h);
    }
    return h;
}

ParameterReport count_parameters(int64_t peft, int64_t projector, int64_t sasrec,
                                 int64_t transductive, int groups, int64_t foundation) {
    if (peft < 0 || projector < 0 || sasrec < 0 || transductive < 0 || groups < 1)
        throw ContractError("count_parameters: counts must be non-negative, groups >= 1");
    ParameterReport r;
    r.peft = peft;
    r.projector = projector;
    r.sasrec = sasrec;
    r.transductive = transductive;
    r.groups = groups;
    r.foundation = foundation;
    return r;
}

}  // namespace perrec
