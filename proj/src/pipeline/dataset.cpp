#include "perrec/dataset.hpp"

#include <fstream>

#include <json.hpp>

namespace perrec {

using nlohmann::json;

void Dataset::build_index() {
    item_index_.clear();
    user_index_.clear();
    for (size_t i = 0; i < items.size(); ++i) {
        if (!item_index_.emplace(items[i].item_id, static_cast<int64_t>(i)).second)
            throw DataError("duplicate item_id " + std::to_string(items[i].item_id));
    }
    for (size_t i = 0; i < users.size(); ++i) {
        if (!user_index_.emplace(users[i].user_id, static_cast<int64_t>(i)).second)
            throw DataError("duplicate user_id " + std::to_string(users[i].user_id));
        for (int64_t it : users[i].item_seq)
            if (!item_index_.count(it))
                throw DataError("user " + std::to_string(users[i].user_id) +
                                " references unknown item " + std::to_string(it));
    }
}

const ItemRecord& Dataset::item_by_id(int64_t id) const {
    return items[static_cast<size_t>(item_row(id))];
}

int64_t Dataset::item_row(int64_t id) const {
    auto it = item_index_.find(id);
    if (it == item_index_.end()) throw DataError("unknown item " + std::to_string(id));
    return it->second;
}

const UserRecord& Dataset::user_by_id(int64_t id) const {
    return users[static_cast<size_t>(user_row(id))];
}

int64_t Dataset::user_row(int64_t id) const {
    auto it = user_index_.find(id);
    if (it == user_index_.end()) throw DataError("unknown user " + std::to_string(id));
    return it->second;
}

int Dataset::max_token() const {
    int m = 0;
    for (const auto& it : items)
        for (int t : it.text_tokens) m = std::max(m, t);
    return m;
}

namespace {

json parse_line(const std::string& line, const std::string& path, size_t lineno) {
    json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded())
        throw DataError(path + ":" + std::to_string(lineno) + ": malformed JSON");
    return j;
}

}  // namespace

std::vector<ItemRecord> load_items(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open items file " + path);
    std::vector<ItemRecord> items;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = parse_line(line, path, lineno);
        ItemRecord rec;
        try {
            rec.item_id = j.at("item_id").get<int64_t>();
            rec.text_tokens = j.at("text_tokens").get<std::vector<int>>();
            rec.patches = j.at("patches").get<std::vector<std::vector<double>>>();
        } catch (const json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        items.push_back(std::move(rec));
    }
    return items;
}

std::vector<UserRecord> load_users(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open users file " + path);
    std::vector<UserRecord> users;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = parse_line(line, path, lineno);
        UserRecord rec;
        try {
            rec.user_id = j.at("user_id").get<int64_t>();
            rec.item_seq = j.at("item_seq").get<std::vector<int64_t>>();
        } catch (const json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (rec.item_seq.size() < 3)
            throw DataError(path + ":" + std::to_string(lineno) + ": user " +
                            std::to_string(rec.user_id) +
                            " has fewer than 3 interactions (leave-one-out needs train/valid/test)");
        users.push_back(std::move(rec));
    }
    return users;
}

void save_items(const std::string& path, const std::vector<ItemRecord>& items) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& it : items) {
        json j;
        j["item_id"] = it.item_id;
        j["text_tokens"] = it.text_tokens;
        j["patches"] = it.patches;
        out << j.dump() << "\n";
    }
}

void save_users(const std::string& path, const std::vector<UserRecord>& users) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& u : users) {
        json j;
        j["user_id"] = u.user_id;
        j["item_seq"] = u.item_seq;
        out << j.dump() << "\n";
    }
}

Dataset load_dataset(const std::string& dir) {
    Dataset d;
    d.items = load_items(dir + "/items.jsonl");
    d.users = load_users(dir + "/users.jsonl");
    d.build_index();
    return d;
}

}  // namespace perrec
