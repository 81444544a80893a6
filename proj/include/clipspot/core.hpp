#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "clipspot/tensor.hpp"

namespace clipspot {

// Clip-indexed window with inclusive endpoints; [i, j] covers j - i + 1 clips.
struct TimeWindow {
    int start = 0;
    int end = 0;

    int length() const { return end - start + 1; }
    bool valid(int clip_count) const { return 0 <= start && start <= end && end < clip_count; }
    bool operator==(const TimeWindow&) const = default;
};

// One (sequence, query, ground-truth window) problem instance. Features are
// stored as float32 so the on-disk representation round-trips bit-exactly.
struct EMInstance {
    int clip_count = 0;
    std::vector<std::int32_t> query_tokens;
    MatF cheap_features;      // L x D_s, three concatenated channels
    MatF expensive_features;  // L x D_v
    TimeWindow ground_truth;
    std::string instance_id;
};

struct SelectionMask {
    std::vector<std::uint8_t> bits;

    int count() const {
        int n = 0;
        for (auto b : bits) n += b ? 1 : 0;
        return n;
    }
    int size() const { return static_cast<int>(bits.size()); }
    std::string to_string() const {
        std::string s(bits.size(), '0');
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (bits[i]) s[i] = '1';
        return s;
    }
    bool operator==(const SelectionMask&) const = default;
};

inline SelectionMask mask_or(const SelectionMask& a, const SelectionMask& b) {
    SelectionMask m = a;
    for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = m.bits[i] || b.bits[i];
    return m;
}

struct BehaviorStats {
    double mean_iou = 0.0;      // mean set-IoU between selected clips and GT clips
    double nonzero_pct = 0.0;   // % of queries with >=1 selected clip inside GT
    int n = 0;
};

struct MetricsReport {
    double mr_at_1 = 0.0;
    double mr_at_5 = 0.0;
    double efficiency_eta = 0.0;
    double tflops = 0.0;
    double mean_iou_selected_vs_gt = 0.0;
    double mean_nonzero_intersection = 0.0;
    BehaviorStats correct;
    BehaviorStats wrong;
};

// ---- metrics ----------------------------------------------------------------

inline double temporal_iou(const TimeWindow& a, const TimeWindow& b) {
    const int inter_lo = std::max(a.start, b.start);
    const int inter_hi = std::min(a.end, b.end);
    const int inter = std::max(0, inter_hi - inter_lo + 1);
    const int uni = a.length() + b.length() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

inline int recall_at_k(const std::vector<TimeWindow>& predictions, const TimeWindow& gt, int k,
                       double iou_threshold) {
    const int top = std::min<int>(k, static_cast<int>(predictions.size()));
    for (int i = 0; i < top; ++i)
        if (temporal_iou(predictions[i], gt) >= iou_threshold) return 1;
    return 0;
}

inline constexpr double kRecallIouThresholds[2] = {0.3, 0.5};

// Mean over queries of recall@k averaged over IoU thresholds {0.3, 0.5}.
inline double mean_recall(const std::vector<std::vector<TimeWindow>>& predictions_per_query,
                          const std::vector<TimeWindow>& gts, int k) {
    if (predictions_per_query.size() != gts.size())
        throw std::invalid_argument("mean_recall: mismatched inputs");
    if (gts.empty()) throw std::invalid_argument("empty evaluation set");
    double total = 0.0;
    for (std::size_t q = 0; q < gts.size(); ++q) {
        double acc = 0.0;
        for (double thr : kRecallIouThresholds)
            acc += recall_at_k(predictions_per_query[q], gts[q], k, thr);
        total += acc / 2.0;
    }
    return total / static_cast<double>(gts.size());
}

// eta = mean over queries of 100 - 100 * selected / total.
inline double efficiency_level(const std::vector<int>& selected_counts,
                               const std::vector<int>& totals) {
    if (selected_counts.size() != totals.size())
        throw std::invalid_argument("efficiency_level: mismatched inputs");
    if (selected_counts.empty()) throw std::invalid_argument("empty evaluation set");
    double acc = 0.0;
    for (std::size_t i = 0; i < totals.size(); ++i) {
        if (totals[i] == 0) throw std::invalid_argument("empty video");
        acc += 100.0 - 100.0 * static_cast<double>(selected_counts[i]) /
                           static_cast<double>(totals[i]);
    }
    return acc / static_cast<double>(totals.size());
}

// Set-IoU between a selection mask and the clips of a window.
inline double selection_iou(const SelectionMask& mask, const TimeWindow& gt) {
    int inter = 0, sel = mask.count();
    for (int i = gt.start; i <= gt.end && i < mask.size(); ++i) inter += mask.bits[i] ? 1 : 0;
    const int uni = sel + gt.length() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline bool selection_hits_gt(const SelectionMask& mask, const TimeWindow& gt) {
    for (int i = gt.start; i <= gt.end && i < mask.size(); ++i)
        if (mask.bits[i]) return true;
    return false;
}

}  // namespace clipspot
