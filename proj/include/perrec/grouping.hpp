#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "perrec/dataset.hpp"
#include "perrec/rng.hpp"

namespace perrec {

// Partition of users into C interest groups plus each group's item pool
// (items purchased at least once by the group's users, training split only).
struct GroupAssignment {
    int C = 1;
    std::unordered_map<int64_t, int> group_of;        // user id -> group
    std::vector<std::vector<double>> centroids;       // C × d (empty for trivial/random)
    std::vector<std::vector<int64_t>> pools;          // C sorted item-id lists

    int group_for(int64_t user_id) const;
    void validate(const Dataset& data) const;  // partition + pool invariants

    std::string to_json_string() const;
    static GroupAssignment from_json_string(const std::string& s);
    void save(const std::string& path) const;
    static GroupAssignment load(const std::string& path);
};

// All users in one group; pool = every item in any training sequence.
GroupAssignment trivial_assignment(const Dataset& data);

// Uniform random partition with equal expected sizes (ablation use). Empty
// groups are repaired by moving users from the largest group.
GroupAssignment random_assignment(const Dataset& data, int C, uint64_t seed);

struct KMeansOptions {
    int max_iters = 100;
    double tol = 1e-7;
    int restarts = 5;  // k-means++ seeding, keep best objective
};

struct KMeansResult {
    std::vector<int> labels;
    std::vector<std::vector<double>> centroids;
    double objective = 0.0;  // sum of squared distances
    std::vector<double> objective_history;  // per accepted Lloyd iteration (best restart)
};

// Lloyd's algorithm with k-means++ seeding; empty clusters are repaired by
// reassigning the point farthest from its centroid.
KMeansResult kmeans(const std::vector<std::vector<double>>& points, int C, uint64_t seed,
                    const KMeansOptions& opts = {});

// Clusters per-user interest vectors into a GroupAssignment (pools filled
// from the training sequences).
GroupAssignment kmeans_assignment(const std::vector<std::pair<int64_t, std::vector<double>>>& vectors,
                                  int C, uint64_t seed, const Dataset& data,
                                  const KMeansOptions& opts = {});

// Rebuilds pools[c] = sorted set of items appearing in at least one group-c
// training sequence.
void build_item_pools(GroupAssignment& assign, const Dataset& data);

// One uniform draw per step from pool \ {positives[p]}. The pool must hold
// at least 2 items so every step has a candidate.
std::vector<int64_t> sample_negatives(const std::vector<int64_t>& pool,
                                      std::span<const int64_t> positives, Rng& rng);

struct Batch {
    int group = 0;
    std::vector<int64_t> users;
};

// Group-homogeneous batches covering every user exactly once per epoch;
// user order within groups and batch order are shuffled by the stream.
std::vector<Batch> make_batches(const GroupAssignment& assign, const Dataset& data,
                                int batch_size, Rng& rng);

}  // namespace perrec
