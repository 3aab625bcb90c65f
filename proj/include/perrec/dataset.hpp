#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "perrec/common.hpp"

namespace perrec {

// One item: identity plus the two modality payloads. Text tokens are title
// tokens (no EOS, optionally 0-padded at the tail); patches are precomputed
// patch-feature vectors.
struct ItemRecord {
    int64_t item_id = 0;
    std::vector<int> text_tokens;
    std::vector<std::vector<double>> patches;
};

struct UserRecord {
    int64_t user_id = 0;
    std::vector<int64_t> item_seq;  // chronological
};

class Dataset {
public:
    std::vector<ItemRecord> items;
    std::vector<UserRecord> users;

    void build_index();

    int64_t n_items() const { return static_cast<int64_t>(items.size()); }
    int64_t n_users() const { return static_cast<int64_t>(users.size()); }

    const ItemRecord& item_by_id(int64_t id) const;
    int64_t item_row(int64_t id) const;  // dense row for the transductive table
    int64_t item_id_of_row(int64_t row) const { return items[static_cast<size_t>(row)].item_id; }
    const UserRecord& user_by_id(int64_t id) const;
    int64_t user_row(int64_t id) const;  // dense row for user embedding tables

    // Leave-one-out split: most recent purchase is the test item, second most
    // recent the validation item, the rest the training sequence.
    std::span<const int64_t> train_seq(const UserRecord& u) const {
        return {u.item_seq.data(), u.item_seq.size() - 2};
    }
    int64_t valid_item(const UserRecord& u) const { return u.item_seq[u.item_seq.size() - 2]; }
    int64_t test_item(const UserRecord& u) const { return u.item_seq.back(); }

    int max_token() const;
    int n_patches() const { return items.empty() ? 0 : static_cast<int>(items[0].patches.size()); }
    int patch_dim() const {
        return items.empty() || items[0].patches.empty()
                   ? 0
                   : static_cast<int>(items[0].patches[0].size());
    }

private:
    std::unordered_map<int64_t, int64_t> item_index_;
    std::unordered_map<int64_t, int64_t> user_index_;
};

// JSON Lines I/O.
//   items: {"item_id": int, "text_tokens": [int], "patches": [[float]]}
//   users: {"user_id": int, "item_seq": [int]}
// Users with fewer than 3 interactions are rejected at ingestion.
std::vector<ItemRecord> load_items(const std::string& path);
std::vector<UserRecord> load_users(const std::string& path);
void save_items(const std::string& path, const std::vector<ItemRecord>& items);
void save_users(const std::string& path, const std::vector<UserRecord>& users);

// Loads <dir>/items.jsonl and <dir>/users.jsonl.
Dataset load_dataset(const std::string& dir);

}  // namespace perrec
