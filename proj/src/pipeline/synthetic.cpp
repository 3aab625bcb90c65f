#include "perrec/synthetic.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace perrec {

using nlohmann::json;

void SyntheticSpec::validate() const {
    if (n_items < n_groups)
        throw ConfigError("synthetic: fewer items than planted groups");
    if (n_users < 1 || n_items < 1 || n_groups < 1 || aspects_per_group < 1)
        throw ConfigError("synthetic: counts must be positive");
    if (n_items < static_cast<int64_t>(n_groups) * aspects_per_group)
        throw ConfigError("synthetic: need at least one item per (group, aspect) class");
    if (min_len < 3)
        throw ConfigError("synthetic: min_len must be >= 3 (train/valid/test split)");
    if (max_len < min_len) throw ConfigError("synthetic: max_len < min_len");
    if (noise < 0.0 || noise > 1.0) throw ConfigError("synthetic: noise must be in [0,1]");
    if (stickiness < 0.0 || stickiness > 1.0)
        throw ConfigError("synthetic: stickiness must be in [0,1]");
    if (min_title < 1 || max_title < min_title)
        throw ConfigError("synthetic: title length range invalid");
    if (n_patches < 1 || patch_dim < 1) throw ConfigError("synthetic: patch dims must be positive");
    if (n_groups > 1 && noise > 0.0 && n_items == static_cast<int64_t>(n_groups))
        throw ConfigError("synthetic: cross-group noise needs more than one item per group");
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    SyntheticData out;
    out.meta.vocab_hint = spec.vocab_hint();

    const int G = spec.n_groups;
    const int A = spec.aspects_per_group;

    // Balanced planted item classes over a seeded shuffle.
    Rng item_rng = Rng::stream(spec.seed, "synth-items");
    std::vector<int64_t> order(static_cast<size_t>(spec.n_items));
    for (int64_t i = 0; i < spec.n_items; ++i) order[static_cast<size_t>(i)] = i;
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(item_rng.uniform_int(static_cast<int64_t>(i)))]);

    // Balanced planted attributes: text aspects round-robin within a group,
    // vision aspects round-robin over an independently shuffled order.
    std::vector<int64_t> vorder = order;
    for (size_t i = vorder.size(); i > 1; --i)
        std::swap(vorder[i - 1], vorder[static_cast<size_t>(item_rng.uniform_int(static_cast<int64_t>(i)))]);
    // items_by_text[g][a] / items_by_vision[g][a] -> item ids
    std::vector<std::vector<std::vector<int64_t>>> items_by_text(
        static_cast<size_t>(G), std::vector<std::vector<int64_t>>(static_cast<size_t>(A)));
    std::vector<std::vector<std::vector<int64_t>>> items_by_vision(
        static_cast<size_t>(G), std::vector<std::vector<int64_t>>(static_cast<size_t>(A)));
    for (size_t pos = 0; pos < order.size(); ++pos) {
        const int g = static_cast<int>(pos % static_cast<size_t>(G));
        const int a = static_cast<int>((pos / static_cast<size_t>(G)) % static_cast<size_t>(A));
        items_by_text[static_cast<size_t>(g)][static_cast<size_t>(a)].push_back(order[pos]);
        out.meta.item_group[order[pos]] = g;
        out.meta.item_aspect[order[pos]] = a;
    }
    std::vector<int64_t> vision_count(static_cast<size_t>(G), 0);
    for (size_t pos = 0; pos < vorder.size(); ++pos) {
        const int g = out.meta.item_group[vorder[pos]];
        const int a = static_cast<int>(vision_count[static_cast<size_t>(g)]++ % A);
        items_by_vision[static_cast<size_t>(g)][static_cast<size_t>(a)].push_back(vorder[pos]);
        out.meta.item_vision_aspect[vorder[pos]] = a;
    }

    // Shared vision-aspect directions (the same patch-space geometry for all
    // groups, so one encoder cannot treat them as group-private features).
    std::vector<std::vector<double>> mu(static_cast<size_t>(A));
    const double unit = spec.patch_signal / std::sqrt(static_cast<double>(spec.patch_dim));
    for (int a = 0; a < A; ++a) {
        mu[static_cast<size_t>(a)].resize(static_cast<size_t>(spec.patch_dim));
        for (auto& x : mu[static_cast<size_t>(a)]) x = item_rng.normal() * unit;
    }

    out.data.items.resize(static_cast<size_t>(spec.n_items));
    for (int64_t id = 0; id < spec.n_items; ++id) {
        Rng rng = Rng::stream(spec.seed, "synth-item", {static_cast<uint64_t>(id)});
        ItemRecord& it = out.data.items[static_cast<size_t>(id)];
        it.item_id = id;
        const int g = out.meta.item_group[id];
        const int a = out.meta.item_aspect[id];
        const int va = out.meta.item_vision_aspect[id];

        const int title_len =
            spec.min_title + static_cast<int>(rng.uniform_int(spec.max_title - spec.min_title + 1));
        const int aspect_pos = static_cast<int>(rng.uniform_int(title_len));
        for (int t = 0; t < title_len; ++t) {
            if (t == aspect_pos) {
                it.text_tokens.push_back(spec.aspect_token(g, a));
            } else {
                it.text_tokens.push_back(1 + static_cast<int>(rng.uniform_int(spec.n_filler_tokens)));
            }
        }

        it.patches.resize(static_cast<size_t>(spec.n_patches));
        const auto& m = mu[static_cast<size_t>(va)];
        for (auto& p : it.patches) {
            p.resize(static_cast<size_t>(spec.patch_dim));
            for (int j = 0; j < spec.patch_dim; ++j)
                p[static_cast<size_t>(j)] = m[static_cast<size_t>(j)] + rng.normal() * spec.patch_noise;
        }
    }

    // Users: balanced planted groups over a seeded shuffle.
    Rng user_rng = Rng::stream(spec.seed, "synth-users");
    std::vector<int64_t> uorder(static_cast<size_t>(spec.n_users));
    for (int64_t u = 0; u < spec.n_users; ++u) uorder[static_cast<size_t>(u)] = u;
    for (size_t i = uorder.size(); i > 1; --i)
        std::swap(uorder[i - 1], uorder[static_cast<size_t>(user_rng.uniform_int(static_cast<int64_t>(i)))]);
    for (size_t pos = 0; pos < uorder.size(); ++pos)
        out.meta.user_group[uorder[pos]] = static_cast<int>(pos % static_cast<size_t>(G));

    out.data.users.resize(static_cast<size_t>(spec.n_users));
    for (int64_t uid = 0; uid < spec.n_users; ++uid) {
        Rng rng = Rng::stream(spec.seed, "synth-user", {static_cast<uint64_t>(uid)});
        UserRecord& rec = out.data.users[static_cast<size_t>(uid)];
        rec.user_id = uid;
        const int g = out.meta.user_group[uid];
        // Even groups shop by the text aspect, odd groups by the vision aspect.
        const auto& by_class =
            (g % 2 == 0) ? items_by_text[static_cast<size_t>(g)] : items_by_vision[static_cast<size_t>(g)];
        const int len =
            spec.min_len + static_cast<int>(rng.uniform_int(spec.max_len - spec.min_len + 1));
        int aspect = static_cast<int>(rng.uniform_int(A));
        for (int t = 0; t < len; ++t) {
            if (t > 0 && rng.uniform() >= spec.stickiness && A > 1) {
                const int hop = 1 + static_cast<int>(rng.uniform_int(A - 1));
                aspect = (aspect + hop) % A;
            }
            int64_t item;
            if (G > 1 && rng.uniform() < spec.noise) {
                // Cross-group purchase: any item of any other group.
                do {
                    item = rng.uniform_int(spec.n_items);
                } while (out.meta.item_group[item] == g);
            } else {
                const auto& pool = by_class[static_cast<size_t>(aspect)];
                item = pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))];
            }
            rec.item_seq.push_back(item);
        }
    }

    out.data.build_index();
    return out;
}

void save_synthetic(const std::string& dir, const SyntheticData& sd, const SyntheticSpec& spec) {
    save_items(dir + "/items.jsonl", sd.data.items);
    save_users(dir + "/users.jsonl", sd.data.users);

    json j;
    json ig = json::object(), ia = json::object(), iv = json::object(), ug = json::object();
    for (const auto& it : sd.data.items) {
        ig[std::to_string(it.item_id)] = sd.meta.item_group.at(it.item_id);
        ia[std::to_string(it.item_id)] = sd.meta.item_aspect.at(it.item_id);
        iv[std::to_string(it.item_id)] = sd.meta.item_vision_aspect.at(it.item_id);
    }
    for (const auto& u : sd.data.users) ug[std::to_string(u.user_id)] = sd.meta.user_group.at(u.user_id);
    j["item_group"] = std::move(ig);
    j["item_aspect"] = std::move(ia);
    j["item_vision_aspect"] = std::move(iv);
    j["user_group"] = std::move(ug);
    j["vocab_hint"] = sd.meta.vocab_hint;
    j["spec"] = {{"n_users", spec.n_users},
                 {"n_items", spec.n_items},
                 {"n_groups", spec.n_groups},
                 {"aspects_per_group", spec.aspects_per_group},
                 {"min_len", spec.min_len},
                 {"max_len", spec.max_len},
                 {"noise", spec.noise},
                 {"stickiness", spec.stickiness},
                 {"n_filler_tokens", spec.n_filler_tokens},
                 {"n_patches", spec.n_patches},
                 {"patch_dim", spec.patch_dim},
                 {"patch_signal", spec.patch_signal},
                 {"patch_noise", spec.patch_noise},
                 {"seed", spec.seed}};
    std::ofstream out(dir + "/meta.json");
    if (!out) throw DataError("cannot write " + dir + "/meta.json");
    out << j.dump(2) << "\n";
}

SyntheticMeta load_synthetic_meta(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError(path + ": malformed JSON");
    SyntheticMeta m;
    try {
        for (const auto& [k, v] : j.at("item_group").items()) m.item_group[std::stoll(k)] = v.get<int>();
        for (const auto& [k, v] : j.at("item_aspect").items()) m.item_aspect[std::stoll(k)] = v.get<int>();
        for (const auto& [k, v] : j.at("item_vision_aspect").items())
            m.item_vision_aspect[std::stoll(k)] = v.get<int>();
        for (const auto& [k, v] : j.at("user_group").items()) m.user_group[std::stoll(k)] = v.get<int>();
        m.vocab_hint = j.at("vocab_hint").get<int>();
    } catch (const json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
    return m;
}

}  // namespace perrec
