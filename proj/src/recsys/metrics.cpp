#include <json.hpp>

#include "perrec/recsys.hpp"

namespace perrec {

std::string Metrics::to_json_string() const {
    nlohmann::json j;
    j["hit"] = nlohmann::json::object();
    j["ndcg"] = nlohmann::json::object();
    for (const auto& [k, v] : hit) j["hit"][std::to_string(k)] = v;
    for (const auto& [k, v] : ndcg) j["ndcg"][std::to_string(k)] = v;
    j["n_users"] = n_users;
    return j.dump();
}

}  // namespace perrec
