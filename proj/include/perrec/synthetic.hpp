#pragma once

#include <string>
#include <unordered_map>

#include "perrec/dataset.hpp"
#include "perrec/rng.hpp"

namespace perrec {

// Planted-structure generator. Items are split across planted groups. Every
// item carries two planted attributes: a text aspect (exactly one aspect
// token from its group's vocabulary in the title, among filler tokens) and a
// vision aspect (one of `aspects_per_group` shared patch-space directions).
// The two attributes are assigned independently.
//
// Each user follows a sticky Markov chain over aspect classes, but the
// channel that matters alternates by group: even groups chain over the text
// aspect, odd groups over the vision aspect. A shared encoder therefore has
// to spend its capacity on both channels at once, while a per-group module
// only needs the channel its group actually shops by. With probability
// `noise` a purchase is replaced by an item from another group.
struct SyntheticSpec {
    int64_t n_users = 400;
    int64_t n_items = 200;
    int n_groups = 2;
    int aspects_per_group = 4;
    int min_len = 6;   // full sequence length, incl. validation and test
    int max_len = 10;
    double noise = 0.1;
    double stickiness = 0.75;
    int n_filler_tokens = 20;
    int min_title = 3;  // incl. the aspect token
    int max_title = 6;
    int n_patches = 4;
    int patch_dim = 8;
    double patch_signal = 1.0;
    double patch_noise = 0.5;
    uint64_t seed = 0;

    void validate() const;
    // First aspect token id; filler ids are 1..n_filler_tokens.
    int aspect_token_base() const { return 1 + n_filler_tokens; }
    int aspect_token(int group, int aspect) const {
        return aspect_token_base() + group * aspects_per_group + aspect;
    }
    // Smallest vocabulary that fits all tokens plus a distinct EOS.
    int vocab_hint() const { return aspect_token_base() + n_groups * aspects_per_group + 1; }
};

// Planted labels, kept out of the training files; oracle tests use them.
struct SyntheticMeta {
    std::unordered_map<int64_t, int> item_group, item_aspect, item_vision_aspect, user_group;
    int vocab_hint = 0;
};

struct SyntheticData {
    Dataset data;
    SyntheticMeta meta;
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

// Writes items.jsonl, users.jsonl and meta.json under dir.
void save_synthetic(const std::string& dir, const SyntheticData& sd, const SyntheticSpec& spec);
SyntheticMeta load_synthetic_meta(const std::string& path);

}  // namespace perrec
