#include "perrec/grouping.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

namespace perrec {

using nlohmann::json;

int GroupAssignment::group_for(int64_t user_id) const {
    auto it = group_of.find(user_id);
    if (it == group_of.end())
        throw DataError("no group assignment for user " + std::to_string(user_id));
    return it->second;
}

void GroupAssignment::validate(const Dataset& data) const {
    if (C < 1) throw ContractError("assignment: C must be >= 1");
    std::vector<int64_t> sizes(static_cast<size_t>(C), 0);
    for (const auto& u : data.users) {
        const int g = group_for(u.user_id);
        if (g < 0 || g >= C)
            throw ContractError("assignment: group " + std::to_string(g) + " out of range");
        ++sizes[static_cast<size_t>(g)];
    }
    int64_t total = 0;
    for (int64_t s : sizes) {
        if (s == 0) throw ContractError("assignment: empty group");
        total += s;
    }
    if (total != data.n_users()) throw ContractError("assignment: does not partition the user set");
}

std::string GroupAssignment::to_json_string() const {
    json j;
    j["C"] = C;
    json assign = json::object();
    std::vector<int64_t> uids;
    uids.reserve(group_of.size());
    for (const auto& [uid, g] : group_of) uids.push_back(uid);
    std::sort(uids.begin(), uids.end());
    for (int64_t uid : uids) assign[std::to_string(uid)] = group_of.at(uid);
    j["assign"] = std::move(assign);
    json pools_j = json::object();
    for (int c = 0; c < C; ++c) pools_j[std::to_string(c)] = pools[static_cast<size_t>(c)];
    j["pools"] = std::move(pools_j);
    if (!centroids.empty()) j["centroids"] = centroids;
    return j.dump();
}

GroupAssignment GroupAssignment::from_json_string(const std::string& s) {
    json j = json::parse(s, nullptr, false);
    if (j.is_discarded()) throw DataError("assignment: malformed JSON");
    GroupAssignment a;
    try {
        a.C = j.at("C").get<int>();
        for (const auto& [uid, g] : j.at("assign").items())
            a.group_of[std::stoll(uid)] = g.get<int>();
        a.pools.assign(static_cast<size_t>(a.C), {});
        for (const auto& [c, items] : j.at("pools").items())
            a.pools[static_cast<size_t>(std::stoi(c))] = items.get<std::vector<int64_t>>();
        if (j.contains("centroids"))
            a.centroids = j.at("centroids").get<std::vector<std::vector<double>>>();
    } catch (const json::exception& e) {
        throw DataError(std::string("assignment: ") + e.what());
    }
    return a;
}

void GroupAssignment::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << to_json_string() << "\n";
}

GroupAssignment GroupAssignment::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open assignment file " + path);
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_string(s);
}

GroupAssignment trivial_assignment(const Dataset& data) {
    GroupAssignment a;
    a.C = 1;
    for (const auto& u : data.users) a.group_of[u.user_id] = 0;
    build_item_pools(a, data);
    return a;
}

GroupAssignment random_assignment(const Dataset& data, int C, uint64_t seed) {
    if (C < 1 || C > data.n_users())
        throw ConfigError("random_assignment: C must be in [1, n_users]");
    GroupAssignment a;
    a.C = C;
    Rng rng = Rng::stream(seed, "random-groups");
    std::vector<int64_t> sizes(static_cast<size_t>(C), 0);
    for (const auto& u : data.users) {
        const int g = static_cast<int>(rng.uniform_int(C));
        a.group_of[u.user_id] = g;
        ++sizes[static_cast<size_t>(g)];
    }
    // Repair empty groups from the largest one.
    for (int g = 0; g < C; ++g) {
        while (sizes[static_cast<size_t>(g)] == 0) {
            const int big = static_cast<int>(
                std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
            for (const auto& u : data.users) {
                if (a.group_of[u.user_id] == big) {
                    a.group_of[u.user_id] = g;
                    --sizes[static_cast<size_t>(big)];
                    ++sizes[static_cast<size_t>(g)];
                    break;
                }
            }
        }
    }
    build_item_pools(a, data);
    return a;
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

struct LloydRun {
    std::vector<int> labels;
    std::vector<std::vector<double>> centroids;
    double objective;
    std::vector<double> history;
};

LloydRun lloyd_once(const std::vector<std::vector<double>>& pts, int C, Rng& rng,
                    const KMeansOptions& opts) {
    const size_t n = pts.size();
    const size_t dim = pts[0].size();

    // k-means++ seeding.
    std::vector<std::vector<double>> cent;
    cent.push_back(pts[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(n)))]);
    std::vector<double> d2(n);
    while (static_cast<int>(cent.size()) < C) {
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& c : cent) best = std::min(best, sq_dist(pts[i], c));
            d2[i] = best;
            total += best;
        }
        size_t pick = 0;
        if (total > 0.0) {
            double r = rng.uniform() * total;
            double acc = 0.0;
            for (size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(n)));
        }
        cent.push_back(pts[pick]);
    }

    std::vector<int> labels(n, 0);
    LloydRun run;
    for (int iter = 0; iter < opts.max_iters; ++iter) {
        // Assign.
        for (size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            int arg = 0;
            for (int c = 0; c < C; ++c) {
                const double d = sq_dist(pts[i], cent[static_cast<size_t>(c)]);
                if (d < best) {
                    best = d;
                    arg = c;
                }
            }
            labels[i] = arg;
        }
        // Repair empty clusters with the point farthest from its centroid.
        std::vector<int64_t> counts(static_cast<size_t>(C), 0);
        for (int l : labels) ++counts[static_cast<size_t>(l)];
        for (int c = 0; c < C; ++c) {
            if (counts[static_cast<size_t>(c)] > 0) continue;
            double far_d = -1.0;
            size_t far_i = 0;
            for (size_t i = 0; i < n; ++i) {
                if (counts[static_cast<size_t>(labels[i])] <= 1) continue;
                const double d = sq_dist(pts[i], cent[static_cast<size_t>(labels[i])]);
                if (d > far_d) {
                    far_d = d;
                    far_i = i;
                }
            }
            --counts[static_cast<size_t>(labels[far_i])];
            labels[far_i] = c;
            ++counts[static_cast<size_t>(c)];
            cent[static_cast<size_t>(c)] = pts[far_i];
        }
        // Update.
        std::vector<std::vector<double>> next(static_cast<size_t>(C),
                                              std::vector<double>(dim, 0.0));
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < dim; ++j) next[static_cast<size_t>(labels[i])][j] += pts[i][j];
        double shift = 0.0;
        for (int c = 0; c < C; ++c) {
            for (size_t j = 0; j < dim; ++j)
                next[static_cast<size_t>(c)][j] /= static_cast<double>(counts[static_cast<size_t>(c)]);
            shift = std::max(shift, sq_dist(next[static_cast<size_t>(c)], cent[static_cast<size_t>(c)]));
        }
        cent = std::move(next);
        double obj = 0.0;
        for (size_t i = 0; i < n; ++i) obj += sq_dist(pts[i], cent[static_cast<size_t>(labels[i])]);
        run.history.push_back(obj);
        if (std::sqrt(shift) < opts.tol) break;
    }
    run.labels = std::move(labels);
    run.centroids = std::move(cent);
    run.objective = run.history.empty() ? 0.0 : run.history.back();
    return run;
}

}  // namespace

KMeansResult kmeans(const std::vector<std::vector<double>>& points, int C, uint64_t seed,
                    const KMeansOptions& opts) {
    if (points.empty()) throw ConfigError("kmeans: no points");
    if (C < 1 || C > static_cast<int>(points.size()))
        throw ConfigError("kmeans: C=" + std::to_string(C) + " not in [1, " +
                          std::to_string(points.size()) + "]");
    // Tiny instances must reach the global optimum (they are checked against
    // exhaustive enumeration); restarts are cheap there.
    const int restarts =
        points.size() <= 16 ? std::max(opts.restarts, 64) : opts.restarts;
    LloydRun best;
    bool have = false;
    for (int r = 0; r < restarts; ++r) {
        Rng rng = Rng::stream(seed, "kmeans", {static_cast<uint64_t>(r)});
        LloydRun run = lloyd_once(points, C, rng, opts);
        if (!have || run.objective < best.objective) {
            best = std::move(run);
            have = true;
        }
    }
    KMeansResult res;
    res.labels = std::move(best.labels);
    res.centroids = std::move(best.centroids);
    res.objective = best.objective;
    res.objective_history = std::move(best.history);
    return res;
}

GroupAssignment kmeans_assignment(
    const std::vector<std::pair<int64_t, std::vector<double>>>& vectors, int C, uint64_t seed,
    const Dataset& data, const KMeansOptions& opts) {
    std::vector<std::vector<double>> pts;
    pts.reserve(vectors.size());
    for (const auto& [uid, v] : vectors) pts.push_back(v);
    KMeansResult km = kmeans(pts, C, seed, opts);
    GroupAssignment a;
    a.C = C;
    a.centroids = km.centroids;
    for (size_t i = 0; i < vectors.size(); ++i) a.group_of[vectors[i].first] = km.labels[i];
    build_item_pools(a, data);
    return a;
}

void build_item_pools(GroupAssignment& assign, const Dataset& data) {
    std::vector<std::set<int64_t>> sets(static_cast<size_t>(assign.C));
    for (const auto& u : data.users) {
        const int g = assign.group_for(u.user_id);
        for (int64_t item : data.train_seq(u)) sets[static_cast<size_t>(g)].insert(item);
    }
    assign.pools.assign(static_cast<size_t>(assign.C), {});
    for (int c = 0; c < assign.C; ++c)
        assign.pools[static_cast<size_t>(c)].assign(sets[static_cast<size_t>(c)].begin(),
                                                    sets[static_cast<size_t>(c)].end());
}

std::vector<int64_t> sample_negatives(const std::vector<int64_t>& pool,
                                      std::span<const int64_t> positives, Rng& rng) {
    if (pool.size() < 2)
        throw DataError("sample_negatives: pool of size " + std::to_string(pool.size()) +
                        " cannot exclude the positive");
    std::vector<int64_t> draws;
    draws.reserve(positives.size());
    for (int64_t pos : positives) {
        int64_t a;
        do {
            a = pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))];
        } while (a == pos);
        draws.push_back(a);
    }
    return draws;
}

std::vector<Batch> make_batches(const GroupAssignment& assign, const Dataset& data,
                                int batch_size, Rng& rng) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    std::vector<std::vector<int64_t>> by_group(static_cast<size_t>(assign.C));
    for (const auto& u : data.users)
        by_group[static_cast<size_t>(assign.group_for(u.user_id))].push_back(u.user_id);

    std::vector<Batch> batches;
    for (int c = 0; c < assign.C; ++c) {
        auto& users = by_group[static_cast<size_t>(c)];
        std::sort(users.begin(), users.end());
        for (size_t i = users.size(); i > 1; --i)
            std::swap(users[i - 1], users[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
        for (size_t start = 0; start < users.size(); start += static_cast<size_t>(batch_size)) {
            Batch b;
            b.group = c;
            const size_t end = std::min(users.size(), start + static_cast<size_t>(batch_size));
            b.users.assign(users.begin() + static_cast<long>(start), users.begin() + static_cast<long>(end));
            batches.push_back(std::move(b));
        }
    }
    for (size_t i = batches.size(); i > 1; --i)
        std::swap(batches[i - 1], batches[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
    return batches;
}

}  // namespace perrec
