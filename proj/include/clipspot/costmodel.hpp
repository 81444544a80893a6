#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "clipspot/core.hpp"

namespace clipspot {

// Analytic per-(video, query) compute accounting, in GFLOPs:
//   cost = c_v * selected + c_s * L + c_fixed
// c_fixed bundles the selection pass and the localization inference.
struct CostTable {
    double c_v = 0.0;      // per selected clip
    double c_s = 0.0;      // per previewed image
    double c_fixed = 0.0;  // per (video, query)

    void validate() const {
        if (c_v < 0 || c_s < 0 || c_fixed < 0)
            throw std::invalid_argument("cost table entries must be >= 0");
    }
};

inline CostTable cost_preset(const std::string& name) {
    if (name == "internvideo") return {2090.8, 2.3, 7.27};
    if (name == "egovlp") return {185.8, 2.3, 7.27};
    if (name == "reler") return {220.9, 2.3, 215.5};
    throw std::invalid_argument("unknown cost preset: " + name);
}

// GFLOPs for one query. include_semantic_index=false drops the c_s * L term
// (the all-clips configuration computes no preview features).
inline double instance_cost(int selected_count, int clips, const CostTable& table,
                            bool include_semantic_index = true) {
    if (selected_count < 0 || selected_count > clips)
        throw std::invalid_argument("selected_count out of range");
    table.validate();
    return table.c_v * selected_count + (include_semantic_index ? table.c_s * clips : 0.0) +
           table.c_fixed;
}

struct CostReport {
    double mean_tflops = 0.0;
    double eta = 0.0;
};

inline CostReport dataset_cost_report(const std::vector<int>& selected_counts,
                                      const std::vector<int>& totals, const CostTable& table,
                                      bool include_semantic_index = true) {
    if (selected_counts.size() != totals.size() || selected_counts.empty())
        throw std::invalid_argument("dataset_cost_report: bad inputs");
    double acc = 0.0;
    for (std::size_t i = 0; i < selected_counts.size(); ++i)
        acc += instance_cost(selected_counts[i], totals[i], table, include_semantic_index);
    CostReport r;
    r.mean_tflops = acc / static_cast<double>(selected_counts.size()) / 1000.0;
    r.eta = efficiency_level(selected_counts, totals);
    return r;
}

}  // namespace clipspot
