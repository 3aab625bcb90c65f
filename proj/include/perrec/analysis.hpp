#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "perrec/dataset.hpp"
#include "perrec/encoder.hpp"
#include "perrec/peft.hpp"

namespace perrec {

// Base-2 Jensen-Shannon divergence between two distributions over the same
// support; 0 for identical, 1 for disjoint support.
double jsd_base2(std::span<const double> p, std::span<const double> q);

// EOS-token attention comparison across group modules and training seeds.
// For every item, the EOS attention distribution is computed under each
// (seed, group) module; intra compares the same group across a seed pairing,
// inter compares different groups under the same seed.
struct JsdPairing {
    uint64_t seed_a = 0, seed_b = 0;
    double intra = 0.0;
    double inter = 0.0;
};

struct JsdReport {
    double mean_intra = 0.0;
    double mean_inter = 0.0;
    std::vector<JsdPairing> pairings;
    std::map<int64_t, double> per_item_intra, per_item_inter;

    std::string to_json_string() const;
};

struct SeedModules {
    uint64_t seed = 0;
    std::vector<PeftAttachment> groups;  // one attachment per group, same C everywhere
};

// Requires >= 2 seeds and >= 2 groups. Pairings are cyclic over the seed
// list ((s0,s1), (s1,s2), ..., (s_last,s0)); with exactly two seeds there is
// a single pairing.
JsdReport attention_analysis(const EncoderModel& model, const std::vector<SeedModules>& seeds,
                             const Dataset& data);

}  // namespace perrec
