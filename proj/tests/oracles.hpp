#pragma once

// Test-only oracles, kept independent of the library code paths they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "clipspot/core.hpp"
#include "clipspot/params.hpp"
#include "clipspot/taskgen.hpp"

namespace oracles {

// Exhaustive O(L^2) span enumeration with stable ranking; reference for
// propose_spans.
inline std::vector<clipspot::TimeWindow> brute_force_spans(const std::vector<double>& s_logp,
                                                           const std::vector<double>& e_logp,
                                                           int k, int max_span_length) {
    struct C {
        double score;
        int i, j;
    };
    const int n = static_cast<int>(s_logp.size());
    std::vector<C> all;
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) {
            if (j - i + 1 > max_span_length) continue;
            all.push_back({s_logp[i] + e_logp[j], i, j});
        }
    std::stable_sort(all.begin(), all.end(), [](const C& a, const C& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    });
    std::vector<clipspot::TimeWindow> out;
    for (int i = 0; i < std::min<int>(k, static_cast<int>(all.size())); ++i)
        out.push_back({all[i].i, all[i].j});
    return out;
}

// Nearest-embedding decoder on cheap features: classify each clip's coarse
// triple per channel, then return the longest run of clips matching the query
// triple (earliest run on ties).
inline clipspot::TimeWindow nearest_embedding_decode(const clipspot::EMInstance& inst,
                                                     const clipspot::TaskGenConfig& cfg,
                                                     const clipspot::CategoryTables& tables) {
    const int L = inst.clip_count;
    const int qr = inst.query_tokens[0];
    const int qi = inst.query_tokens[1] - cfg.rooms;
    const int qo = inst.query_tokens[2] - cfg.rooms - cfg.interactions;

    const auto nearest = [](const Eigen::RowVectorXd& x, const clipspot::MatD& table) {
        int best = 0;
        double bd = (table.row(0) - x).squaredNorm();
        for (int r = 1; r < table.rows(); ++r) {
            const double d = (table.row(r) - x).squaredNorm();
            if (d < bd) {
                bd = d;
                best = r;
            }
        }
        return best;
    };

    std::vector<bool> match(L, false);
    for (int l = 0; l < L; ++l) {
        Eigen::RowVectorXd row = inst.cheap_features.row(l).cast<double>();
        const int r = nearest(row.segment(0, cfg.d_room), tables.room_table);
        const int i = nearest(row.segment(cfg.d_room, cfg.d_inter), tables.inter_table);
        const int o = nearest(row.segment(cfg.d_room + cfg.d_inter, cfg.d_obj), tables.obj_table);
        match[l] = (r == qr && i == qi && o == qo);
    }

    clipspot::TimeWindow best{0, 0};
    int best_len = 0;
    for (int l = 0; l < L;) {
        if (!match[l]) {
            ++l;
            continue;
        }
        int e = l;
        while (e + 1 < L && match[e + 1]) ++e;
        if (e - l + 1 > best_len) {
            best_len = e - l + 1;
            best = {l, e};
        }
        l = e + 1;
    }
    return best;
}

// Central-difference gradient check against analytic gradients already in
// `analytic`. `loss` must evaluate the objective at the store's current
// values. Returns the max relative error over (strided) coordinates.
template <class S>
double finite_difference_check(clipspot::ParamStore<S>& store,
                               const clipspot::GradBuffer<S>& analytic,
                               const std::function<double()>& loss, double h_base = 1e-5,
                               int stride = 1) {
    double worst = 0.0;
    for (int e = 0; e < store.size(); ++e) {
        auto& w = store.entry(e).value;
        for (Eigen::Index i = 0; i < w.size(); i += stride) {
            const S orig = w.data()[i];
            const double h = h_base * std::max(1.0, std::abs(static_cast<double>(orig)));
            w.data()[i] = orig + static_cast<S>(h);
            const double up = loss();
            w.data()[i] = orig - static_cast<S>(h);
            const double down = loss();
            w.data()[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double an = static_cast<double>(analytic.g[e].data()[i]);
            const double err = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace oracles
