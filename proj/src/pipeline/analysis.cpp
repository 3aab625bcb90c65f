#include "perrec/analysis.hpp"

#include <cmath>

#include <json.hpp>

namespace perrec {

double jsd_base2(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size())
        throw ContractError("jsd: distributions have different support sizes " +
                            std::to_string(p.size()) + " vs " + std::to_string(q.size()));
    auto term = [](double x, double m) { return x > 0.0 ? x * std::log2(x / m) : 0.0; };
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (m > 0.0) acc += 0.5 * (term(p[i], m) + term(q[i], m));
    }
    return acc;
}

JsdReport attention_analysis(const EncoderModel& model, const std::vector<SeedModules>& seeds,
                             const Dataset& data) {
    if (seeds.size() < 2) throw ContractError("attention_analysis: need >= 2 seeds");
    const size_t groups = seeds.front().groups.size();
    if (groups < 2) throw ContractError("attention_analysis: need >= 2 groups");
    for (const auto& s : seeds)
        if (s.groups.size() != groups)
            throw ContractError("attention_analysis: seed runs have differing group counts");

    // dist[s][g][item] — EOS attention over the item's title tokens.
    std::vector<std::vector<std::vector<std::vector<double>>>> dist(
        seeds.size(), std::vector<std::vector<std::vector<double>>>(groups));
    for (size_t s = 0; s < seeds.size(); ++s)
        for (size_t g = 0; g < groups; ++g) {
            auto& v = dist[s][g];
            v.reserve(data.items.size());
            for (const auto& item : data.items) {
                EncodeResult r = encode(nullptr, model, &seeds[s].groups[g], item);
                v.push_back(eos_attention(r.trace));
            }
        }
    // Same item under the same encoder: supports must align.
    for (size_t i = 0; i < data.items.size(); ++i)
        for (size_t s = 1; s < seeds.size(); ++s)
            for (size_t g = 0; g < groups; ++g)
                if (dist[s][g][i].size() != dist[0][0][i].size())
                    throw ContractError("attention_analysis: token-length mismatch on item " +
                                        std::to_string(data.items[i].item_id));

    JsdReport rep;
    std::vector<std::pair<size_t, size_t>> pairs;
    if (seeds.size() == 2) {
        pairs.emplace_back(0, 1);
    } else {
        for (size_t s = 0; s < seeds.size(); ++s) pairs.emplace_back(s, (s + 1) % seeds.size());
    }

    std::map<int64_t, double> item_intra_sum, item_inter_sum;
    std::map<int64_t, int64_t> item_intra_n, item_inter_n;
    for (const auto& [sa, sb] : pairs) {
        JsdPairing pr;
        pr.seed_a = seeds[sa].seed;
        pr.seed_b = seeds[sb].seed;
        double intra = 0.0;
        int64_t intra_n = 0;
        for (size_t g = 0; g < groups; ++g)
            for (size_t i = 0; i < data.items.size(); ++i) {
                const double v = jsd_base2(dist[sa][g][i], dist[sb][g][i]);
                intra += v;
                ++intra_n;
                item_intra_sum[data.items[i].item_id] += v;
                ++item_intra_n[data.items[i].item_id];
            }
        double inter = 0.0;
        int64_t inter_n = 0;
        for (size_t s : {sa, sb})
            for (size_t g = 0; g < groups; ++g)
                for (size_t g2 = g + 1; g2 < groups; ++g2)
                    for (size_t i = 0; i < data.items.size(); ++i) {
                        const double v = jsd_base2(dist[s][g][i], dist[s][g2][i]);
                        inter += v;
                        ++inter_n;
                        item_inter_sum[data.items[i].item_id] += v;
                        ++item_inter_n[data.items[i].item_id];
                    }
        pr.intra = intra / static_cast<double>(intra_n);
        pr.inter = inter / static_cast<double>(inter_n);
        rep.pairings.push_back(pr);
    }
    for (const auto& pr : rep.pairings) {
        rep.mean_intra += pr.intra / static_cast<double>(rep.pairings.size());
        rep.mean_inter += pr.inter / static_cast<double>(rep.pairings.size());
    }
    for (const auto& [id, s] : item_intra_sum)
        rep.per_item_intra[id] = s / static_cast<double>(item_intra_n[id]);
    for (const auto& [id, s] : item_inter_sum)
        rep.per_item_inter[id] = s / static_cast<double>(item_inter_n[id]);
    return rep;
}

std::string JsdReport::to_json_string() const {
    nlohmann::json j;
    j["mean_intra"] = mean_intra;
    j["mean_inter"] = mean_inter;
    nlohmann::json ps = nlohmann::json::array();
    for (const auto& p : pairings)
        ps.push_back({{"seed_a", p.seed_a}, {"seed_b", p.seed_b}, {"intra", p.intra}, {"inter", p.inter}});
    j["pairings"] = std::move(ps);
    nlohmann::json intra = nlohmann::json::object(), inter = nlohmann::json::object();
    for (const auto& [id, v] : per_item_intra) intra[std::to_string(id)] = v;
    for (const auto& [id, v] : per_item_inter) inter[std::to_string(id)] = v;
    j["per_item_intra"] = std::move(intra);
    j["per_item_inter"] = std::move(inter);
    return j.dump();
}

}  // namespace perrec
