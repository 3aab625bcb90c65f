#include "perrec/report.hpp"

#include <cstdio>
#include <set>
#include <sstream>

#include <json.hpp>

namespace perrec {

std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
    return buf;
}

std::string render_metrics_table(const std::vector<RunRow>& runs) {
    std::set<int> ks;
    for (const auto& r : runs) {
        for (const auto& [k, v] : r.metrics.hit) ks.insert(k);
    }
    std::ostringstream os;
    os << "method";
    for (int k : ks) os << "\tH@" << k;
    for (int k : ks) os << "\tN@" << k;
    os << "\n";
    for (const auto& r : runs) {
        os << r.label;
        for (int k : ks) {
            auto it = r.metrics.hit.find(k);
            os << "\t" << (it != r.metrics.hit.end() ? format_metric(it->second) : "-");
        }
        for (int k : ks) {
            auto it = r.metrics.ndcg.find(k);
            os << "\t" << (it != r.metrics.ndcg.end() ? format_metric(it->second) : "-");
        }
        os << "\n";
    }
    return os.str();
}

std::string render_param_report(const ParameterReport& r) {
    std::ostringstream os;
    os << "PEFT module:             " << r.peft << "\n"
       << "MLP projector:           " << r.projector << "\n"
       << "SASRec backbone:         " << r.sasrec << "\n"
       << "Transductive embeddings: " << r.transductive << "\n"
       << "Global total:            " << r.global_total() << "\n"
       << "Grouped total (C=" << r.groups << "):   " << r.grouped_total() << "\n";
    if (r.foundation > 0) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.4f", r.overhead_ratio());
        os << "Foundation model:        " << r.foundation << "\n"
           << "Overhead ratio:          " << buf << "\n";
    }
    return os.str();
}

std::string render_jsd_report(const JsdReport& r) {
    std::ostringstream os;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", r.mean_intra);
    os << "Intra-clus. " << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.4f", r.mean_inter);
    os << "Inter-clus. " << buf << "\n";
    for (const auto& p : r.pairings) {
        std::snprintf(buf, sizeof(buf), "seeds (%llu, %llu): intra %.4f inter %.4f",
                      static_cast<unsigned long long>(p.seed_a),
                      static_cast<unsigned long long>(p.seed_b), p.intra, p.inter);
        os << buf << "\n";
    }
    return os.str();
}

std::string report_json(const std::vector<RunRow>& runs, const ParameterReport* params,
                        const JsdReport* jsd) {
    nlohmann::json j;
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : runs) {
        nlohmann::json row;
        row["label"] = r.label;
        row["metrics"] = nlohmann::json::parse(r.metrics.to_json_string());
        rs.push_back(std::move(row));
    }
    j["runs"] = std::move(rs);
    if (params) {
        j["params"] = {{"peft", params->peft},
                       {"projector", params->projector},
                       {"sasrec", params->sasrec},
                       {"transductive", params->transductive},
                       {"groups", params->groups},
                       {"global_total", params->global_total()},
                       {"grouped_total", params->grouped_total()},
                       {"foundation", params->foundation},
                       {"overhead_ratio", params->overhead_ratio()}};
    }
    if (jsd) j["jsd"] = nlohmann::json::parse(jsd->to_json_string());
    return j.dump();
}

}  // namespace perrec
