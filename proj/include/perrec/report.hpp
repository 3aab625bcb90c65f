#pragma once

#include <string>
#include <vector>

#include "perrec/analysis.hpp"
#include "perrec/peft.hpp"
#include "perrec/recsys.hpp"

namespace perrec {

// Published-table presentation: metrics are multiplied by 100 and printed
// with two decimals (0.0482 -> "4.82").
std::string format_metric(double v);

struct RunRow {
    std::string label;
    Metrics metrics;
};

// Plain-text table, one row per run, Hit/NDCG columns for each K.
std::string render_metrics_table(const std::vector<RunRow>& runs);

std::string render_param_report(const ParameterReport& r);

std::string render_jsd_report(const JsdReport& r);

// Combined machine-readable artifact; deterministic field order.
std::string report_json(const std::vector<RunRow>& runs, const ParameterReport* params,
                        const JsdReport* jsd);

}  // namespace perrec
