#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "perrec/grouping.hpp"

using namespace perrec;

namespace {

Dataset tiny_dataset() {
    Dataset d;
    for (int64_t i = 1; i <= 12; ++i) {
        ItemRecord it;
        it.item_id = i;
        it.text_tokens = {static_cast<int>(i)};
        it.patches = {{0.0}};
        d.items.push_back(it);
    }
    // user -> sequence (last two are valid/test, the rest train)
    d.users.push_back({101, {1, 2, 3, 4, 5}});
    d.users.push_back({102, {2, 3, 1, 6, 7}});
    d.users.push_back({103, {8, 9, 10, 9, 8}});
    d.users.push_back({104, {9, 10, 8, 11, 12}});
    d.users.push_back({105, {7, 1, 2, 3, 4}});
    d.build_index();
    return d;
}

// Exhaustive optimum over all 2-partitions: the independent oracle.
double best_two_partition_objective(const std::vector<std::vector<double>>& pts) {
    const size_t n = pts.size();
    const size_t dim = pts[0].size();
    double best = std::numeric_limits<double>::infinity();
    for (uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
        std::vector<std::vector<double>> mean(2, std::vector<double>(dim, 0.0));
        std::array<int, 2> count = {0, 0};
        for (size_t i = 0; i < n; ++i) {
            const int g = (mask >> i) & 1;
            ++count[static_cast<size_t>(g)];
            for (size_t j = 0; j < dim; ++j) mean[static_cast<size_t>(g)][j] += pts[i][j];
        }
        if (count[0] == 0 || count[1] == 0) continue;
        for (int g = 0; g < 2; ++g)
            for (size_t j = 0; j < dim; ++j) mean[static_cast<size_t>(g)][j] /= count[static_cast<size_t>(g)];
        double obj = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const int g = (mask >> i) & 1;
            for (size_t j = 0; j < dim; ++j) {
                const double df = pts[i][j] - mean[static_cast<size_t>(g)][j];
                obj += df * df;
            }
        }
        best = std::min(best, obj);
    }
    return best;
}

}  // namespace

TEST_CASE("kmeans separates two obvious 1-D clusters") {
    std::vector<std::vector<double>> pts = {{0.0}, {0.1}, {10.0}, {10.1}};
    KMeansResult r = kmeans(pts, 2, 123);
    CHECK(r.labels[0] == r.labels[1]);
    CHECK(r.labels[2] == r.labels[3]);
    CHECK(r.labels[0] != r.labels[2]);
    std::vector<double> cents = {r.centroids[0][0], r.centroids[1][0]};
    std::sort(cents.begin(), cents.end());
    CHECK(cents[0] == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(cents[1] == doctest::Approx(10.05).epsilon(1e-12));
    CHECK(r.objective == doctest::Approx(best_two_partition_objective(pts)).epsilon(1e-12));
}

TEST_CASE("kmeans C=1 gives the mean; objective is non-increasing") {
    Rng rng(31);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 9; ++i) pts.push_back({rng.normal(), rng.normal()});
    KMeansResult r = kmeans(pts, 1, 5);
    std::vector<double> mean(2, 0.0);
    for (const auto& p : pts)
        for (size_t j = 0; j < 2; ++j) mean[j] += p[j] / 9.0;
    CHECK(r.centroids[0][0] == doctest::Approx(mean[0]).epsilon(1e-12));
    CHECK(r.centroids[0][1] == doctest::Approx(mean[1]).epsilon(1e-12));

    std::vector<std::vector<double>> pts2;
    for (int i = 0; i < 40; ++i) pts2.push_back({rng.normal() * 2, rng.normal() * 2, rng.normal()});
    KMeansResult r2 = kmeans(pts2, 5, 7);
    for (size_t i = 1; i < r2.objective_history.size(); ++i)
        CHECK(r2.objective_history[i] <= r2.objective_history[i - 1] + 1e-9);

    CHECK_THROWS_AS(kmeans(pts, 20, 1), ConfigError);
}

TEST_CASE("kmeans matches the exhaustive optimal 2-partition on small sets") {
    Rng rng(47);
    for (int trial = 0; trial < 10; ++trial) {
        const size_t n = 5 + static_cast<size_t>(rng.uniform_int(4));  // 5..8 points
        std::vector<std::vector<double>> pts;
        for (size_t i = 0; i < n; ++i) pts.push_back({rng.normal(), rng.normal()});
        KMeansResult r = kmeans(pts, 2, 1000 + static_cast<uint64_t>(trial));
        const double oracle = best_two_partition_objective(pts);
        CAPTURE(trial);
        CHECK(r.objective == doctest::Approx(oracle).epsilon(1e-9));
    }
}

TEST_CASE("empty clusters are repaired") {
    // Three identical points and one outlier, C=3: seeding can pick duplicate
    // centroids, forcing the repair path.
    std::vector<std::vector<double>> pts = {{0.0}, {0.0}, {0.0}, {5.0}, {5.0}, {9.0}};
    for (uint64_t seed = 0; seed < 10; ++seed) {
        KMeansResult r = kmeans(pts, 3, seed, {100, 1e-7, 1});
        std::set<int> used(r.labels.begin(), r.labels.end());
        CHECK(used.size() == 3);
    }
}

TEST_CASE("item pools from training sequences") {
    Dataset d = tiny_dataset();

    GroupAssignment one = trivial_assignment(d);
    // Single group: pool is exactly the union of training items.
    std::set<int64_t> expect;
    for (const auto& u : d.users)
        for (int64_t it : d.train_seq(u)) expect.insert(it);
    CHECK(std::set<int64_t>(one.pools[0].begin(), one.pools[0].end()) == expect);

    GroupAssignment two;
    two.C = 2;
    two.group_of = {{101, 0}, {102, 0}, {105, 0}, {103, 1}, {104, 1}};
    build_item_pools(two, d);
    two.validate(d);

    // Independent two-pass oracle.
    std::vector<std::set<int64_t>> oracle(2);
    for (const auto& u : d.users)
        for (int64_t it : d.train_seq(u)) oracle[static_cast<size_t>(two.group_of[u.user_id])].insert(it);
    for (int c = 0; c < 2; ++c)
        CHECK(std::set<int64_t>(two.pools[static_cast<size_t>(c)].begin(),
                                two.pools[static_cast<size_t>(c)].end()) == oracle[static_cast<size_t>(c)]);

    // User 102 (group 0) purchased item 1 in training: 1 must be in pool 0.
    CHECK(std::count(two.pools[0].begin(), two.pools[0].end(), 1) == 1);
}

TEST_CASE("negative sampling: forced draw, containment, uniformity") {
    Rng rng(11);
    std::vector<int64_t> pair_pool = {1, 2};
    std::vector<int64_t> positives = {1, 1, 1, 1};
    auto draws = sample_negatives(pair_pool, positives, rng);
    for (int64_t d : draws) CHECK(d == 2);

    std::vector<int64_t> pool = {10, 11, 12, 13, 14, 15, 16, 17, 18, 19};
    std::vector<int64_t> pos(100000, 10);
    Rng rng2(13);
    auto many = sample_negatives(pool, pos, rng2);
    std::map<int64_t, int> counts;
    for (int64_t d : many) {
        CHECK(d != 10);
        CHECK(std::count(pool.begin(), pool.end(), d) == 1);
        ++counts[d];
    }
    // 9 candidates, p = 1/9: binomial 3-sigma band around 100000/9.
    const double expect = 100000.0 / 9.0;
    const double sigma = std::sqrt(100000.0 * (1.0 / 9.0) * (8.0 / 9.0));
    for (const auto& [item, c] : counts)
        CHECK(std::abs(c - expect) <= 3.0 * sigma);

    std::vector<int64_t> singleton = {1};
    CHECK_THROWS_AS(sample_negatives(singleton, positives, rng), DataError);
}

TEST_CASE("group-homogeneous batches cover every user once") {
    Dataset d = tiny_dataset();
    GroupAssignment two;
    two.C = 2;
    two.group_of = {{101, 0}, {102, 0}, {105, 0}, {103, 1}, {104, 1}};
    build_item_pools(two, d);

    Rng rng = Rng::stream(99, "batches", {0});
    auto batches = make_batches(two, d, 2, rng);

    size_t total = 0;
    std::set<int64_t> seen;
    std::vector<int> per_group_batches(2, 0);
    for (const auto& b : batches) {
        ++per_group_batches[static_cast<size_t>(b.group)];
        for (int64_t u : b.users) {
            CHECK(two.group_of[u] == b.group);
            seen.insert(u);
        }
        total += b.users.size();
    }
    CHECK(total == 5);
    CHECK(seen.size() == 5);
    CHECK(per_group_batches[0] == 2);  // ceil(3/2)
    CHECK(per_group_batches[1] == 1);  // ceil(2/2)

    // Same seed -> same order; different seed -> (almost surely) different.
    Rng rng_a = Rng::stream(99, "batches", {0});
    Rng rng_b = Rng::stream(100, "batches", {0});
    auto again = make_batches(two, d, 2, rng_a);
    REQUIRE(again.size() == batches.size());
    for (size_t i = 0; i < batches.size(); ++i) CHECK(again[i].users == batches[i].users);
    auto other = make_batches(two, d, 2, rng_b);
    bool differs = false;
    for (size_t i = 0; i < batches.size(); ++i)
        if (other[i].users != batches[i].users || other[i].group != batches[i].group) differs = true;
    CHECK(differs);
}

TEST_CASE("random assignment partitions users with plausible sizes") {
    Dataset d;
    for (int64_t i = 0; i < 50; ++i) {
        ItemRecord it;
        it.item_id = i;
        it.patches = {{0.0}};
        d.items.push_back(it);
    }
    Rng rng(3);
    for (int64_t u = 0; u < 400; ++u) {
        UserRecord rec;
        rec.user_id = u;
        for (int t = 0; t < 5; ++t) rec.item_seq.push_back(rng.uniform_int(50));
        d.users.push_back(rec);
    }
    d.build_index();

    GroupAssignment a = random_assignment(d, 4, 17);
    a.validate(d);
    std::vector<int> sizes(4, 0);
    for (const auto& u : d.users) ++sizes[static_cast<size_t>(a.group_of[u.user_id])];
    // Multinomial plausibility: chi-square with 3 dof, generous threshold.
    double chi2 = 0.0;
    for (int s : sizes) chi2 += (s - 100.0) * (s - 100.0) / 100.0;
    CHECK(chi2 < 30.0);
}

TEST_CASE("assignment json round-trips") {
    Dataset d = tiny_dataset();
    GroupAssignment two;
    two.C = 2;
    two.group_of = {{101, 0}, {102, 0}, {105, 0}, {103, 1}, {104, 1}};
    build_item_pools(two, d);
    two.centroids = {{0.5, 0.1}, {-0.2, 0.9}};

    GroupAssignment back = GroupAssignment::from_json_string(two.to_json_string());
    CHECK(back.C == 2);
    CHECK(back.group_of == two.group_of);
    CHECK(back.pools == two.pools);
    CHECK(back.centroids == two.centroids);
}
