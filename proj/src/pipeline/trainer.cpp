#include "perrec/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>
#include <unordered_set>

#include <json.hpp>

#include "perrec/kernels.hpp"
#include "perrec/ops.hpp"

namespace perrec {

using nlohmann::json;

namespace {

struct MethodInfo {
    Method m;
    const char* name;
    bool grouped;       // C group-specific modules
    bool global_init;   // initialized from a Global-PEFT checkpoint
    bool assignment;    // consumes a group assignment
};

constexpr MethodInfo kMethods[] = {
    {Method::WoMultimodal, "wo-mm", false, false, false},
    {Method::FrozenMultimodal, "frozen-mm", false, false, false},
    {Method::GlobalPeft, "global-peft", false, false, false},
    {Method::UserSeq, "user-level-1", false, false, false},
    {Method::UserConcat, "user-level-2", false, false, false},
    {Method::GroupSeq, "group-level-1", false, false, true},
    {Method::GroupConcat, "group-level-2", false, false, true},
    {Method::Personalized, "perpeft", true, true, true},
    {Method::NoText, "v1-no-text", true, true, true},
    {Method::NoVision, "v2-no-vision", true, true, true},
    {Method::FullPoolNegatives, "v3-full-negatives", true, true, true},
    {Method::LargeGlobal, "v4-large-global", false, false, false},
    {Method::RandomGroups, "v5-random-groups", true, true, false},
};

const MethodInfo& info(Method m) {
    for (const auto& mi : kMethods)
        if (mi.m == m) return mi;
    throw ContractError("unknown method enum");
}

}  // namespace

const char* method_name(Method m) { return info(m).name; }

Method method_from(const std::string& name) {
    for (const auto& mi : kMethods)
        if (name == mi.name) return mi.m;
    throw ConfigError("unknown method '" + name + "'");
}

bool method_grouped(Method m) { return info(m).grouped; }
bool method_needs_global_init(Method m) { return info(m).global_init; }
bool method_needs_assignment(Method m) { return info(m).assignment; }

int RunConfig::effective_epochs() const {
    if (epochs > 0) return epochs;
    return method_grouped(method) ? 20 : 30;
}

void RunConfig::validate() const {
    if (effective_epochs() <= 0) throw ConfigError("epochs must be positive");
    if (lr < 0.0) throw ConfigError("learning rate must be non-negative");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (d < 1 || d % sasrec_heads != 0)
        throw ConfigError("d must be positive and divisible by sasrec heads");
    if (max_seq_len < 2) throw ConfigError("max sequence length must be >= 2");
    if (method_grouped(method) || method_needs_assignment(method)) {
        if (groups < 1) throw ConfigError("grouped method needs --groups >= 1");
    }
    if (eval_ks.empty()) throw ConfigError("at least one evaluation K required");
    if (eval_threads < 1) throw ConfigError("eval threads must be >= 1");
}

std::string RunConfig::to_json_string() const {
    json j;
    j["method"] = method_name(method);
    j["peft"] = peft_kind_name(peft);
    j["groups"] = groups;
    j["epochs"] = epochs;
    j["lr"] = lr;
    j["weight_decay"] = weight_decay;
    j["loss_mode"] = loss_mode_name(loss_mode);
    j["seed"] = seed;
    j["batch_size"] = batch_size;
    j["lora_rank"] = lora_rank;
    j["side_hidden"] = side_hidden;
    j["d"] = d;
    j["sasrec_blocks"] = sasrec_blocks;
    j["sasrec_heads"] = sasrec_heads;
    j["max_seq_len"] = max_seq_len;
    j["dropout"] = dropout;
    j["projector_hidden"] = projector_hidden;
    j["exclude_seen"] = exclude_seen;
    j["eval_ks"] = eval_ks;
    j["encoder"] = {{"d_model", encoder.d_model},   {"n_layers", encoder.n_layers},
                    {"n_heads", encoder.n_heads},   {"vocab_size", encoder.vocab_size},
                    {"max_text_len", encoder.max_text_len}, {"n_patches", encoder.n_patches},
                    {"patch_dim", encoder.patch_dim}, {"d_prime", encoder.d_prime},
                    {"seed", encoder.seed}};
    return j.dump();
}

RunConfig RunConfig::from_json_string(const std::string& s) {
    json j = json::parse(s, nullptr, false);
    if (j.is_discarded()) throw DataError("run config: malformed JSON");
    RunConfig c;
    try {
        c.method = method_from(j.at("method").get<std::string>());
        c.peft = peft_kind_from(j.at("peft").get<std::string>());
        c.groups = j.at("groups").get<int>();
        c.epochs = j.at("epochs").get<int>();
        c.lr = j.at("lr").get<double>();
        c.weight_decay = j.at("weight_decay").get<double>();
        c.loss_mode = loss_mode_from(j.at("loss_mode").get<std::string>());
        c.seed = j.at("seed").get<uint64_t>();
        c.batch_size = j.at("batch_size").get<int>();
        c.lora_rank = j.at("lora_rank").get<int>();
        c.side_hidden = j.at("side_hidden").get<int>();
        c.d = j.at("d").get<int>();
        c.sasrec_blocks = j.at("sasrec_blocks").get<int>();
        c.sasrec_heads = j.at("sasrec_heads").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.dropout = j.at("dropout").get<double>();
        c.projector_hidden = j.at("projector_hidden").get<int>();
        c.exclude_seen = j.at("exclude_seen").get<bool>();
        c.eval_ks = j.at("eval_ks").get<std::vector<int>>();
        const json& e = j.at("encoder");
        c.encoder.d_model = e.at("d_model").get<int>();
        c.encoder.n_layers = e.at("n_layers").get<int>();
        c.encoder.n_heads = e.at("n_heads").get<int>();
        c.encoder.vocab_size = e.at("vocab_size").get<int>();
        c.encoder.max_text_len = e.at("max_text_len").get<int>();
        c.encoder.n_patches = e.at("n_patches").get<int>();
        c.encoder.patch_dim = e.at("patch_dim").get<int>();
        c.encoder.d_prime = e.at("d_prime").get<int>();
        c.encoder.seed = e.at("seed").get<uint64_t>();
    } catch (const json::exception& ex) {
        throw DataError(std::string("run config: ") + ex.what());
    }
    return c;
}

namespace {

EncoderConfig resolve_encoder(const RunConfig& cfg, const Dataset& data) {
    EncoderConfig e = cfg.encoder;
    if (e.vocab_size == 0) e.vocab_size = data.max_token() + 2;
    if (e.n_patches == 0) e.n_patches = data.n_patches();
    if (e.patch_dim == 0) e.patch_dim = data.patch_dim();
    if (e.seed == 0) e.seed = cfg.seed ^ 0x5eedc0dedull;
    return e;
}

bool uses_encoder(Method m) { return m != Method::WoMultimodal; }
bool uses_peft(Method m) { return uses_encoder(m) && m != Method::FrozenMultimodal; }

int64_t projector_param_count(int d_prime, int hidden, int d) {
    return static_cast<int64_t>(2 * d_prime) * hidden + hidden +
           static_cast<int64_t>(hidden) * d + d;
}

int64_t peft_param_count(PeftKind kind, const EncoderConfig& e, int rank, int side_hidden) {
    const int64_t d = e.d_model, L = e.n_layers;
    switch (kind) {
        case PeftKind::Lora:
            // q and v per layer per tower, square targets: k(d + d) each.
            return 2 * L * 2 * static_cast<int64_t>(rank) * (d + d);
        case PeftKind::Ia3:
            // k, v gates of d plus ffn gate of 4d, per layer per tower.
            return 2 * L * (d + d + 4 * d);
        case PeftKind::SideNet:
            // per tower: L down-projections + gates, one up-projection.
            return 2 * (L * (d * static_cast<int64_t>(side_hidden) + side_hidden + 1) +
                        static_cast<int64_t>(side_hidden) * e.d_prime + e.d_prime);
    }
    return 0;
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> ModelBundle::shared_named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("transductive/h", transductive);
    auto s = sasrec.parameters("sasrec");
    out.insert(out.end(), s.begin(), s.end());
    if (user_emb.defined()) out.emplace_back("user_emb/e", user_emb);
    if (group_emb.defined()) out.emplace_back("group_emb/e", group_emb);
    if (concat_w.defined()) {
        out.emplace_back("concat/w", concat_w);
        out.emplace_back("concat/b", concat_b);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> ModelBundle::group_named(int c) const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (c < static_cast<int>(peft.size())) {
        auto p = peft[static_cast<size_t>(c)].parameters("peft/" + std::to_string(c));
        out.insert(out.end(), p.begin(), p.end());
    }
    if (c < static_cast<int>(projector.size())) {
        auto p = projector[static_cast<size_t>(c)].parameters("projector/" + std::to_string(c));
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> ModelBundle::trainable_named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (int c = 0; c < module_count(); ++c) {
        auto g = group_named(c);
        out.insert(out.end(), g.begin(), g.end());
    }
    auto s = shared_named();
    out.insert(out.end(), s.begin(), s.end());
    return out;
}

Checkpoint ModelBundle::capture() const {
    Checkpoint ck;
    ck.put_all(trainable_named());
    return ck;
}

void ModelBundle::restore(const Checkpoint& ck) { ck.copy_all_into(trainable_named()); }

ModelBundle build_bundle(const RunConfig& cfg, const Dataset& data) {
    cfg.validate();
    ModelBundle b;
    b.cfg = cfg;
    b.cfg.encoder = resolve_encoder(cfg, data);

    const Method m = cfg.method;
    const bool grouped = method_grouped(m);

    std::optional<Checkpoint> init;
    if (method_needs_global_init(m)) {
        if (cfg.init_ckpt.empty())
            throw ConfigError("state: method " + std::string(method_name(m)) +
                              " requires --init-from <global checkpoint>");
        init = Checkpoint::load(cfg.init_ckpt);
        // Architecture shapes come from the global run the modules are cloned
        // from; only training knobs are taken from this config.
        RunConfig gcfg = RunConfig::from_json_string(json::parse(init->meta_json).at("config").dump());
        b.cfg.encoder = gcfg.encoder;
        b.cfg.peft = gcfg.peft;
        b.cfg.lora_rank = gcfg.lora_rank;
        b.cfg.side_hidden = gcfg.side_hidden;
        b.cfg.d = gcfg.d;
        b.cfg.sasrec_blocks = gcfg.sasrec_blocks;
        b.cfg.sasrec_heads = gcfg.sasrec_heads;
        b.cfg.max_seq_len = gcfg.max_seq_len;
        b.cfg.projector_hidden = gcfg.projector_hidden;
    }

    // Assignment.
    if (m == Method::RandomGroups) {
        b.assign = random_assignment(data, cfg.groups, cfg.seed);
    } else if (method_needs_assignment(m)) {
        if (cfg.assign_path.empty())
            throw ConfigError("state: method " + std::string(method_name(m)) +
                              " requires --assign <assignment file>");
        b.assign = GroupAssignment::load(cfg.assign_path);
        if (b.assign.C != cfg.groups)
            throw ConfigError("assignment has C=" + std::to_string(b.assign.C) +
                              " but --groups is " + std::to_string(cfg.groups));
    } else {
        b.assign = trivial_assignment(data);
    }
    b.assign.validate(data);

    b.encoder = build_encoder(b.cfg.encoder);

    const int module_groups = grouped ? cfg.groups : 1;
    int rank = b.cfg.lora_rank, side_hidden = b.cfg.side_hidden, proj_hidden = b.cfg.projector_hidden;
    if (m == Method::LargeGlobal) {
        LargeGlobalSizing sz = size_large_global(cfg, data);
        rank = sz.knob > 0 ? sz.knob : rank;
        side_hidden = sz.knob > 0 ? sz.knob : side_hidden;
        proj_hidden = sz.projector_hidden;
    }

    ProjectorConfig pc{2 * b.cfg.encoder.d_prime, proj_hidden, b.cfg.d};
    if (init) {
        // Clone the trained global module/projector into every group.
        PeftAttachment g0 = attach(b.encoder, b.cfg.peft, cfg.seed, {rank, side_hidden});
        init->copy_all_into(g0.parameters("peft/0"));
        Projector p0 = make_projector(pc, cfg.seed);
        init->copy_all_into(p0.parameters("projector/0"));
        for (int c = 0; c < module_groups; ++c) {
            b.peft.push_back(clone_attachment(g0));
            b.projector.push_back(clone_projector(p0));
        }
    } else {
        for (int c = 0; c < module_groups; ++c) {
            if (uses_peft(m))
                b.peft.push_back(attach(b.encoder, b.cfg.peft,
                                        Rng::stream(cfg.seed, "peft-seed", {static_cast<uint64_t>(c)})
                                            .next_u64(),
                                        {rank, side_hidden}));
            if (uses_encoder(m)) b.projector.push_back(make_projector(pc, cfg.seed + static_cast<uint64_t>(c)));
        }
    }

    b.transductive = make_transductive(data.n_items(), b.cfg.d, cfg.seed);
    SasrecConfig sc{b.cfg.d, b.cfg.sasrec_blocks, b.cfg.sasrec_heads, b.cfg.max_seq_len, cfg.dropout};
    b.sasrec = make_sasrec(sc, cfg.seed);
    if (init) {
        init->copy_into("transductive/h", b.transductive);
        init->copy_all_into(b.sasrec.parameters("sasrec"));
    }

    Rng extra = Rng::stream(cfg.seed, "method-embeddings");
    if (m == Method::UserSeq || m == Method::UserConcat)
        b.user_emb = Tensor::randn({data.n_users(), b.cfg.d}, extra, 0.02, true);
    if (m == Method::GroupSeq || m == Method::GroupConcat)
        b.group_emb = Tensor::randn({cfg.groups, b.cfg.d}, extra, 0.02, true);
    if (m == Method::UserConcat || m == Method::GroupConcat) {
        b.concat_w = Tensor::randn({2 * b.cfg.d, b.cfg.d}, extra,
                                   1.0 / std::sqrt(2.0 * b.cfg.d), true);
        b.concat_b = Tensor::zeros({b.cfg.d}, true);
    }
    return b;
}

ModelBundle bundle_from_checkpoint(const Checkpoint& ck, const Dataset& data) {
    json meta = json::parse(ck.meta_json, nullptr, false);
    if (meta.is_discarded() || !meta.contains("config"))
        throw DataError("checkpoint meta lacks a config echo");
    RunConfig cfg = RunConfig::from_json_string(meta.at("config").dump());
    cfg.init_ckpt.clear();
    cfg.assign_path.clear();

    ModelBundle b;
    b.cfg = cfg;
    b.encoder = build_encoder(cfg.encoder);
    if (meta.contains("assign") && !meta.at("assign").is_null())
        b.assign = GroupAssignment::from_json_string(meta.at("assign").dump());
    else
        b.assign = trivial_assignment(data);
    b.assign.validate(data);

    const int module_groups = method_grouped(cfg.method) ? cfg.groups : 1;
    int rank = cfg.lora_rank, side_hidden = cfg.side_hidden, proj_hidden = cfg.projector_hidden;
    if (cfg.method == Method::LargeGlobal) {
        LargeGlobalSizing sz = size_large_global(cfg, data);
        rank = sz.knob > 0 ? sz.knob : rank;
        side_hidden = sz.knob > 0 ? sz.knob : side_hidden;
        proj_hidden = sz.projector_hidden;
    }
    ProjectorConfig pc{2 * cfg.encoder.d_prime, proj_hidden, cfg.d};
    for (int c = 0; c < module_groups; ++c) {
        if (uses_peft(cfg.method))
            b.peft.push_back(attach(b.encoder, cfg.peft, 0, {rank, side_hidden}));
        if (uses_encoder(cfg.method)) b.projector.push_back(make_projector(pc, 0));
    }
    b.transductive = make_transductive(data.n_items(), cfg.d, 0);
    SasrecConfig sc{cfg.d, cfg.sasrec_blocks, cfg.sasrec_heads, cfg.max_seq_len, cfg.dropout};
    b.sasrec = make_sasrec(sc, 0);
    Rng extra(0);
    if (cfg.method == Method::UserSeq || cfg.method == Method::UserConcat)
        b.user_emb = Tensor::zeros({data.n_users(), cfg.d}, true);
    if (cfg.method == Method::GroupSeq || cfg.method == Method::GroupConcat)
        b.group_emb = Tensor::zeros({cfg.groups, cfg.d}, true);
    if (cfg.method == Method::UserConcat || cfg.method == Method::GroupConcat) {
        b.concat_w = Tensor::zeros({2 * cfg.d, cfg.d}, true);
        b.concat_b = Tensor::zeros({cfg.d}, true);
    }
    b.restore(ck);
    return b;
}

namespace {

using FrozenCache = std::unordered_map<int64_t, std::pair<std::vector<double>, std::vector<double>>>;

// z for one item under group c's components. Frozen tower outputs are cached
// across the run for the frozen baseline (they never change).
Tensor compose_item(Tape* tape, const ModelBundle& b, const Dataset& data, int c, int64_t item_id,
                    FrozenCache* frozen) {
    const int64_t row_idx = data.item_row(item_id);
    if (b.cfg.method == Method::WoMultimodal) return row(tape, b.transductive, row_idx);

    Tensor x, y;
    if (b.cfg.method == Method::FrozenMultimodal && frozen) {
        auto it = frozen->find(item_id);
        if (it == frozen->end()) {
            EncodeResult r = encode(nullptr, b.encoder, nullptr, data.item_by_id(item_id));
            it = frozen->emplace(item_id, std::make_pair(r.x.values(), r.y.values())).first;
        }
        x = Tensor::from({b.cfg.encoder.d_prime}, it->second.first);
        y = Tensor::from({b.cfg.encoder.d_prime}, it->second.second);
    } else {
        const PeftAttachment* att =
            b.peft.empty() ? nullptr : &b.peft[static_cast<size_t>(c % static_cast<int>(b.peft.size()))];
        EncodeResult r = encode(tape, b.encoder, att, data.item_by_id(item_id));
        x = r.x;
        y = r.y;
    }
    if (b.cfg.method == Method::NoText) y = Tensor::zeros({b.cfg.encoder.d_prime});
    if (b.cfg.method == Method::NoVision) x = Tensor::zeros({b.cfg.encoder.d_prime});
    Tensor mvec = b.projector[static_cast<size_t>(c % static_cast<int>(b.projector.size()))]
                      .forward(tape, concat(tape, x, y));
    return add(tape, mvec, row(tape, b.transductive, row_idx));
}

bool is_seq_token(Method m) { return m == Method::UserSeq || m == Method::GroupSeq; }
bool is_concat(Method m) { return m == Method::UserConcat || m == Method::GroupConcat; }

Tensor token_embedding(Tape* tape, const ModelBundle& b, const Dataset& data, int64_t user_id) {
    if (b.cfg.method == Method::UserSeq || b.cfg.method == Method::UserConcat)
        return row(tape, b.user_emb, data.user_row(user_id));
    return row(tape, b.group_emb, b.assign.group_for(user_id));
}

Tensor concat_transform(Tape* tape, const ModelBundle& b, const Tensor& z, const Tensor& e) {
    return add(tape, vecmat(tape, concat(tape, z, e), b.concat_w), b.concat_b);
}

std::vector<int64_t> window_of(std::span<const int64_t> seq, int max_items) {
    const size_t keep = std::min(seq.size(), static_cast<size_t>(max_items));
    return {seq.end() - static_cast<long>(keep), seq.end()};
}

struct StepResult {
    double loss_sum = 0.0;
    int users_counted = 0;
    std::vector<int64_t> unique_ids;
};

}  // namespace

int eval_input_rows(Method m, int window, int max_len) {
    if (is_seq_token(m)) return std::min(window, max_len - 1) + 1;
    return std::min(window, max_len);
}

LargeGlobalSizing size_large_global(const RunConfig& cfg, const Dataset& data) {
    const EncoderConfig enc = resolve_encoder(cfg, data);
    const int64_t proj_unit = static_cast<int64_t>(2 * enc.d_prime) + 1 + cfg.d;  // per hidden unit
    const int64_t target =
        static_cast<int64_t>(cfg.groups) *
        (peft_param_count(cfg.peft, enc, cfg.lora_rank, cfg.side_hidden) +
         projector_param_count(enc.d_prime, cfg.projector_hidden, cfg.d));

    LargeGlobalSizing best;
    best.target = target;
    best.delta = INT64_MAX;
    const int max_knob = cfg.peft == PeftKind::Ia3 ? 1 : 4096;
    for (int knob = 1; knob <= max_knob; ++knob) {
        const int64_t p = peft_param_count(cfg.peft, enc, knob, knob);
        const int64_t remainder = target - p - cfg.d;
        for (int64_t h : {remainder / proj_unit, remainder / proj_unit + 1}) {
            if (h < 1) continue;
            const int64_t total = p + projector_param_count(enc.d_prime, static_cast<int>(h), cfg.d);
            const int64_t delta = std::llabs(total - target);
            if (delta < best.delta) {
                best.delta = delta;
                best.knob = cfg.peft == PeftKind::Ia3 ? 0 : knob;
                best.projector_hidden = static_cast<int>(h);
                best.params = total;
            }
        }
        if (best.delta == 0) break;
        if (p > target && knob > 1) break;  // growing the module only moves away
    }
    return best;
}

namespace {

StepResult train_step(Tape& tape, ModelBundle& b, const Dataset& data, const Batch& batch,
                      const std::vector<int64_t>& pool, int epoch, int64_t batch_idx,
                      FrozenCache* frozen, TrainAudit& audit,
                      const std::unordered_set<int64_t>& pool_set) {
    const RunConfig& cfg = b.cfg;
    const Method m = cfg.method;
    Rng neg_rng = Rng::stream(cfg.seed, "negatives",
                              {static_cast<uint64_t>(epoch), static_cast<uint64_t>(batch_idx)});

    // Per-user windows, positives and negative draws.
    struct UserPlan {
        int64_t user_id;
        std::vector<int64_t> window;
        std::vector<int64_t> positives;
        std::vector<int64_t> negatives;
    };
    std::vector<UserPlan> plans;
    std::vector<int64_t> unique_ids;
    {
        std::unordered_set<int64_t> seen;
        for (int64_t uid : batch.users) {
            const UserRecord& u = data.user_by_id(uid);
            UserPlan p;
            p.user_id = uid;
            p.window = window_of(data.train_seq(u), cfg.max_seq_len);
            const size_t mlen = p.window.size();
            for (size_t i = 1; i < mlen; ++i) p.positives.push_back(p.window[i]);
            if (is_seq_token(m)) p.positives.push_back(p.window[mlen - 1]);
            if (!p.positives.empty()) {
                p.negatives = sample_negatives(pool, p.positives, neg_rng);
                audit.negative_draws += static_cast<int64_t>(p.negatives.size());
                for (int64_t a : p.negatives)
                    if (pool_set.count(a)) ++audit.negatives_in_pool;
            }
            for (int64_t it : p.window)
                if (seen.insert(it).second) unique_ids.push_back(it);
            for (int64_t it : p.negatives)
                if (seen.insert(it).second) unique_ids.push_back(it);
            plans.push_back(std::move(p));
        }
    }
    std::sort(unique_ids.begin(), unique_ids.end());

    std::unordered_map<int64_t, Tensor> z;
    z.reserve(unique_ids.size());
    for (int64_t id : unique_ids) z[id] = compose_item(&tape, b, data, batch.group, id, frozen);

    Tensor loss = Tensor::scalar(0.0);
    int counted = 0;
    for (const UserPlan& p : plans) {
        if (p.positives.empty()) continue;
        Tensor e_tok;
        if (is_seq_token(m) || is_concat(m)) e_tok = token_embedding(&tape, b, data, p.user_id);

        auto item_z = [&](int64_t id) {
            Tensor base = z.at(id);
            return is_concat(m) ? concat_transform(&tape, b, base, e_tok) : base;
        };

        // Input rows: window without its last item, plus the token row for the
        // sequence-token variants.
        std::vector<Tensor> rows_v;
        const size_t mlen = p.window.size();
        for (size_t i = 0; i + 1 < mlen; ++i) rows_v.push_back(item_z(p.window[i]));
        if (is_seq_token(m)) rows_v.push_back(e_tok);
        if (rows_v.empty()) continue;

        Rng drop_rng = Rng::stream(cfg.seed, "dropout",
                                   {static_cast<uint64_t>(epoch), static_cast<uint64_t>(batch_idx),
                                    static_cast<uint64_t>(p.user_id)});
        Tensor x = stack_rows(&tape, rows_v);
        Tensor preds = b.sasrec.forward(&tape, x, /*train=*/true, &drop_rng);

        std::vector<Tensor> pos_v, neg_v, pred_v;
        for (size_t s = 0; s < p.positives.size(); ++s) {
            pos_v.push_back(item_z(p.positives[s]));
            neg_v.push_back(item_z(p.negatives[s]));
            pred_v.push_back(row(&tape, preds, static_cast<int64_t>(s)));
        }
        loss = add(&tape, loss, sequence_loss(&tape, pos_v, neg_v, pred_v, cfg.loss_mode));
        ++counted;
    }

    StepResult res;
    res.users_counted = counted;
    res.unique_ids = unique_ids;
    if (counted == 0) return res;
    loss = scale(&tape, loss, 1.0 / static_cast<double>(counted));
    res.loss_sum = loss.item();
    if (!std::isfinite(res.loss_sum))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(batch_idx) + " (method " + method_name(m) + ")");
    backward(tape, loss);
    return res;
}

// Raw per-group item embedding matrices for evaluation.
std::vector<std::vector<double>> eval_item_matrix(const ModelBundle& b, const Dataset& data,
                                                  FrozenCache* frozen) {
    const int groups = method_grouped(b.cfg.method) ? b.cfg.groups : 1;
    std::vector<std::vector<double>> zs(static_cast<size_t>(groups));
    for (int c = 0; c < groups; ++c) {
        auto& m = zs[static_cast<size_t>(c)];
        m.resize(static_cast<size_t>(data.n_items()) * b.cfg.d);
        for (int64_t r = 0; r < data.n_items(); ++r) {
            Tensor zt = compose_item(nullptr, b, data, c, data.item_id_of_row(r), frozen);
            std::copy(zt.data(), zt.data() + b.cfg.d, m.begin() + r * b.cfg.d);
        }
    }
    return zs;
}

}  // namespace

Metrics evaluate(const ModelBundle& bundle, const Dataset& data, const std::vector<int>& ks,
                 bool test_split) {
    const RunConfig& cfg = bundle.cfg;
    const Method m = cfg.method;
    FrozenCache frozen;
    const auto zs = eval_item_matrix(bundle, data, &frozen);
    const int d = cfg.d;

    // Concat variants: per-user scoring uses z'_j = Wtopᵀ z_j + (Wbotᵀ e + b).
    std::vector<std::vector<double>> z_top;  // per group: [n_items × d]
    if (is_concat(m)) {
        z_top.resize(zs.size());
        for (size_t c = 0; c < zs.size(); ++c) {
            z_top[c].assign(static_cast<size_t>(data.n_items()) * d, 0.0);
            kernels::gemm_nn(z_top[c].data(), zs[c].data(), bundle.concat_w.data(),
                             static_cast<size_t>(data.n_items()), static_cast<size_t>(d),
                             static_cast<size_t>(d));
        }
    }

    std::vector<int64_t> ids(static_cast<size_t>(data.n_items()));
    for (int64_t r = 0; r < data.n_items(); ++r) ids[static_cast<size_t>(r)] = data.item_id_of_row(r);

    std::vector<int64_t> ranks(data.users.size(), 0);
    auto eval_user = [&](size_t ui) {
        const UserRecord& u = data.users[ui];
        const int g = method_grouped(m) ? bundle.assign.group_for(u.user_id) : 0;
        const auto& z_mat = zs[static_cast<size_t>(g)];

        std::vector<int64_t> input(data.train_seq(u).begin(), data.train_seq(u).end());
        if (test_split) input.push_back(data.valid_item(u));
        const int64_t target = test_split ? data.test_item(u) : data.valid_item(u);

        const int max_items = is_seq_token(m) ? cfg.max_seq_len - 1 : cfg.max_seq_len;
        std::vector<int64_t> window = window_of(std::span<const int64_t>(input), max_items);

        Tensor e_tok;
        if (is_seq_token(m) || is_concat(m)) e_tok = token_embedding(nullptr, bundle, data, u.user_id);

        std::vector<Tensor> rows_v;
        for (int64_t it : window) {
            const int64_t r = data.item_row(it);
            Tensor zrow = Tensor::from({d}, std::vector<double>(z_mat.begin() + r * d,
                                                                z_mat.begin() + (r + 1) * d));
            rows_v.push_back(is_concat(m) ? concat_transform(nullptr, bundle, zrow, e_tok) : zrow);
        }
        if (is_seq_token(m)) rows_v.push_back(e_tok);
        Tensor x = stack_rows(nullptr, rows_v);
        Tensor preds = bundle.sasrec.forward(nullptr, x, false, nullptr);
        const double* uvec = preds.data() + (preds.dim(0) - 1) * d;

        // Score all items.
        std::vector<double> scores(static_cast<size_t>(data.n_items()), 0.0);
        const auto& kk = kernels::active();
        if (is_concat(m)) {
            std::vector<double> t_u(static_cast<size_t>(d), 0.0);
            // Wbotᵀ e + b
            for (int64_t k2 = 0; k2 < d; ++k2)
                kk.axpy(t_u.data(), e_tok.data()[k2], bundle.concat_w.data() + (d + k2) * d,
                        static_cast<size_t>(d));
            kk.add(t_u.data(), t_u.data(), bundle.concat_b.data(), static_cast<size_t>(d));
            std::vector<double> tmp(static_cast<size_t>(d));
            for (int64_t r = 0; r < data.n_items(); ++r) {
                kk.add(tmp.data(), z_top[static_cast<size_t>(g)].data() + r * d, t_u.data(),
                       static_cast<size_t>(d));
                scores[static_cast<size_t>(r)] = kk.dot(uvec, tmp.data(), static_cast<size_t>(d));
            }
        } else {
            for (int64_t r = 0; r < data.n_items(); ++r)
                scores[static_cast<size_t>(r)] =
                    kk.dot(uvec, z_mat.data() + r * d, static_cast<size_t>(d));
        }

        std::vector<char> excluded(static_cast<size_t>(data.n_items()), 0);
        if (cfg.exclude_seen) {
            for (int64_t it : input) excluded[static_cast<size_t>(data.item_row(it))] = 1;
        }
        const int64_t target_row = data.item_row(target);
        excluded[static_cast<size_t>(target_row)] = 0;
        ranks[ui] = rank_of_target(scores, ids, target_row, excluded);
    };

    const int threads = std::min<int>(cfg.eval_threads, static_cast<int>(data.users.size()));
    if (threads <= 1) {
        for (size_t ui = 0; ui < data.users.size(); ++ui) eval_user(ui);
    } else {
        kernels::active();  // select once before fan-out
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int t = 0; t < threads; ++t)
            pool.emplace_back([&]() {
                size_t ui;
                while ((ui = next.fetch_add(1)) < data.users.size()) eval_user(ui);
            });
        for (auto& th : pool) th.join();
    }
    return metrics_from_ranks(std::move(ranks), ks);
}

TrainResult train(const RunConfig& cfg_in, const Dataset& data) {
    ModelBundle b = build_bundle(cfg_in, data);
    const RunConfig& cfg = b.cfg;

    TrainResult result;
    result.audit.encoder_checksum_before = b.encoder.checksum();
    std::map<std::string, uint64_t> initial_sums;
    for (const auto& [name, t] : b.trainable_named()) {
        result.audit.trainable_names.insert(name);
        initial_sums[name] = t.checksum();
    }
    for (const auto& [name, t] : b.encoder.parameters()) initial_sums[name] = t.checksum();

    AdamW opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    FrozenCache frozen;

    // Negative-sampling pools: the batch group's pool, or the full training
    // item pool for ungrouped methods and the full-pool ablation.
    GroupAssignment trivial = trivial_assignment(data);
    const std::vector<int64_t>& full_pool = trivial.pools[0];
    const bool group_negatives =
        method_grouped(cfg.method) && cfg.method != Method::FullPoolNegatives;
    std::vector<std::unordered_set<int64_t>> pool_sets;
    if (group_negatives) {
        for (const auto& p : b.assign.pools) pool_sets.emplace_back(p.begin(), p.end());
    } else {
        pool_sets.emplace_back(full_pool.begin(), full_pool.end());
    }

    const int epochs = cfg.effective_epochs();
    bool first_batch_done = false;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        Rng batch_rng = Rng::stream(cfg.seed, "batches", {static_cast<uint64_t>(epoch)});
        auto batches = make_batches(b.assign, data, cfg.batch_size, batch_rng);
        double loss_acc = 0.0;
        int64_t steps = 0;
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            const Batch& batch = batches[bi];
            {
                int g0 = b.assign.group_for(batch.users.front());
                for (int64_t uid : batch.users)
                    if (b.assign.group_for(uid) != g0) {
                        ++result.audit.mixed_group_batches;
                        break;
                    }
            }
            const std::vector<int64_t>& pool =
                group_negatives ? b.assign.pools[static_cast<size_t>(batch.group)] : full_pool;
            const auto& pool_set =
                group_negatives ? pool_sets[static_cast<size_t>(batch.group)] : pool_sets[0];

            Tape tape;
            StepResult sr = train_step(tape, b, data, batch, pool, epoch,
                                       static_cast<int64_t>(bi), &frozen, result.audit, pool_set);
            if (sr.users_counted == 0) continue;
            loss_acc += sr.loss_sum;
            ++steps;

            // Ungrouped methods with group-homogeneous batches (the group-
            // embedding baselines) still own exactly one module.
            const int module_group = method_grouped(cfg.method) ? batch.group : 0;
            std::vector<Tensor> touched;
            for (const auto& [name, t] : b.group_named(module_group)) touched.push_back(t);
            for (const auto& [name, t] : b.shared_named()) touched.push_back(t);

            if (!first_batch_done) {
                first_batch_done = true;
                result.audit.first_batch_group = batch.group;
                for (const auto& [name, t] : b.trainable_named())
                    if (t.has_grad()) result.audit.first_batch_grad_names.insert(name);
                if (b.transductive.has_grad()) {
                    const auto& g = b.transductive.grad();
                    for (int64_t r = 0; r < data.n_items(); ++r)
                        for (int64_t j = 0; j < cfg.d; ++j)
                            if (g[static_cast<size_t>(r * cfg.d + j)] != 0.0) {
                                result.audit.first_batch_transductive_rows.insert(r);
                                break;
                            }
                }
                for (int64_t id : sr.unique_ids)
                    result.audit.first_batch_item_rows.insert(data.item_row(id));
            }
            opt.step(touched);
            for (const auto& [name, t] : b.trainable_named()) t.clear_grad();
        }

        EpochStats es;
        es.train_loss = steps > 0 ? loss_acc / static_cast<double>(steps) : 0.0;
        es.val_hit30 = evaluate(b, data, {30}, /*test_split=*/false).hit.at(30);
        result.history.push_back(es);
        if (result.best_epoch < 0 || es.val_hit30 > result.best_val_hit30) {
            result.best_val_hit30 = es.val_hit30;
            result.best_epoch = epoch;
            result.best = b.capture();
        }
        if (cfg.snapshot_epochs > 0 && epoch + 1 == cfg.snapshot_epochs) {
            // Best-so-far checkpoint of the first-stage budget.
            result.snapshot = result.best;
            RunConfig echo = cfg;
            echo.epochs = cfg.snapshot_epochs;
            json smeta;
            smeta["config"] = json::parse(echo.to_json_string());
            smeta["epoch"] = result.best_epoch;
            smeta["val_hit30"] = result.best_val_hit30;
            smeta["assign"] = json();
            result.snapshot->meta_json = smeta.dump();
        }
    }

    b.restore(result.best);
    for (const auto& [name, t] : b.trainable_named())
        if (initial_sums.at(name) != t.checksum()) result.audit.changed_names.insert(name);
    for (const auto& [name, t] : b.encoder.parameters())
        if (initial_sums.at(name) != t.checksum()) result.audit.changed_names.insert(name);
    result.audit.encoder_checksum_after = b.encoder.checksum();

    json meta;
    meta["config"] = json::parse(cfg.to_json_string());
    meta["epoch"] = result.best_epoch;
    meta["val_hit30"] = result.best_val_hit30;
    meta["assign"] = (method_grouped(cfg.method) || method_needs_assignment(cfg.method))
                         ? json::parse(b.assign.to_json_string())
                         : json();
    result.best.meta_json = meta.dump();
    result.bundle = std::move(b);
    return result;
}

std::vector<std::pair<int64_t, std::vector<double>>> interest_vectors(const ModelBundle& bundle,
                                                                      const Dataset& data) {
    FrozenCache frozen;
    const auto zs = eval_item_matrix(bundle, data, &frozen);
    const int d = bundle.cfg.d;
    std::vector<std::pair<int64_t, std::vector<double>>> out;
    out.reserve(data.users.size());
    for (const auto& u : data.users) {
        const int g = method_grouped(bundle.cfg.method) ? bundle.assign.group_for(u.user_id) : 0;
        std::vector<int64_t> window = window_of(data.train_seq(u), bundle.cfg.max_seq_len);
        std::vector<Tensor> rows_v;
        for (int64_t it : window) {
            const int64_t r = data.item_row(it);
            rows_v.push_back(Tensor::from(
                {d}, std::vector<double>(zs[static_cast<size_t>(g)].begin() + r * d,
                                         zs[static_cast<size_t>(g)].begin() + (r + 1) * d)));
        }
        Tensor preds = bundle.sasrec.forward(nullptr, stack_rows(nullptr, rows_v), false, nullptr);
        const double* uvec = preds.data() + (preds.dim(0) - 1) * d;
        out.emplace_back(u.user_id, std::vector<double>(uvec, uvec + d));
    }
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b2) { return a.first < b2.first; });
    return out;
}

}  // namespace perrec
