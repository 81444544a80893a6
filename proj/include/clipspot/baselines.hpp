#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "clipspot/autodiff.hpp"
#include "clipspot/core.hpp"
#include "clipspot/model.hpp"
#include "clipspot/rng.hpp"
#include "clipspot/spotter.hpp"

namespace clipspot {

enum class BaselineMethod {
    zero,
    random,
    uniform,
    topk_oneshot,     // one-shot scored top-k selection
    sequential_gate,  // left-to-right recurrent binary gate
    all,
    direct_supervision,
};

inline const char* method_name(BaselineMethod m) {
    switch (m) {
        case BaselineMethod::zero: return "zero";
        case BaselineMethod::random: return "random";
        case BaselineMethod::uniform: return "uniform";
        case BaselineMethod::topk_oneshot: return "topk_oneshot";
        case BaselineMethod::sequential_gate: return "sequential_gate";
        case BaselineMethod::all: return "all";
        default: return "direct_supervision";
    }
}

inline BaselineMethod method_from_name(const std::string& s) {
    for (BaselineMethod m :
         {BaselineMethod::zero, BaselineMethod::random, BaselineMethod::uniform,
          BaselineMethod::topk_oneshot, BaselineMethod::sequential_gate, BaselineMethod::all,
          BaselineMethod::direct_supervision})
        if (s == method_name(m)) return m;
    throw std::invalid_argument("unknown baseline method: " + s);
}

struct BaselineConfig {
    BaselineMethod method = BaselineMethod::zero;
    double sample_fraction = 10.0;  // k%, for random/uniform/topk
    int top_k_responses = 1;        // direct supervision

    void validate() const {
        if (sample_fraction < 0.0 || sample_fraction > 100.0)
            throw std::invalid_argument("sample_fraction must be in [0, 100]");
        if (top_k_responses < 1) throw std::invalid_argument("top_k_responses must be >= 1");
    }
};

// round-half-up count shared by every k%-based selector
inline int fraction_count(int clips, double k_percent) {
    return static_cast<int>(std::floor(k_percent * clips / 100.0 + 0.5));
}

// ---- non-learned selectors -------------------------------------------------------------

inline SelectionMask select_zero(int clips) {
    SelectionMask m;
    m.bits.assign(clips, 0);
    return m;
}

inline SelectionMask select_all(int clips) {
    SelectionMask m;
    m.bits.assign(clips, 1);
    return m;
}

inline SelectionMask select_random(int clips, double k_percent, Rng& rng) {
    const int want = fraction_count(clips, k_percent);
    std::vector<int> idx(clips);
    for (int i = 0; i < clips; ++i) idx[i] = i;
    rng.shuffle(idx);
    SelectionMask m = select_zero(clips);
    for (int i = 0; i < want; ++i) m.bits[idx[i]] = 1;
    return m;
}

inline SelectionMask select_uniform(int clips, double k_percent) {
    const int want = fraction_count(clips, k_percent);
    SelectionMask m = select_zero(clips);
    for (int i = 0; i < want; ++i) {
        const int pos = static_cast<int>(std::floor((i + 0.5) * clips / want));
        m.bits[std::min(pos, clips - 1)] = 1;
    }
    return m;
}

// Union of clips covered by ranked span proposals (direct supervision).
inline SelectionMask mask_from_spans(const std::vector<TimeWindow>& spans, int clips,
                                     int top_k) {
    SelectionMask m = select_zero(clips);
    const int take = std::min<int>(top_k, static_cast<int>(spans.size()));
    for (int i = 0; i < take; ++i)
        for (int l = std::max(0, spans[i].start); l <= std::min(clips - 1, spans[i].end); ++l)
            m.bits[l] = 1;
    return m;
}

// ---- learned selectors -----------------------------------------------------------------

// One-shot scorer: two-layer head on [cheap_l ; mean-pooled query embedding].
struct TopkScorerHandles {
    handles::Mlp2 head;
};

template <class S>
TopkScorerHandles build_topk_scorer(ParamStore<S>& p, const ModelConfig& cfg, Rng& rng) {
    TopkScorerHandles h;
    h.head = detail::add_mlp2(p, "topk_scorer", cfg.d_cheap + cfg.query_embed_dim, cfg.hidden,
                              1, rng);
    return h;
}

template <class S>
ad::Var<S> topk_scores(const Forward<S>& f, const TopkScorerHandles& h, const Mat<S>& cheap,
                       ad::Var<S> q_embed) {
    const int L = static_cast<int>(cheap.rows());
    ad::Var<S> q_mean = ad::mean_over_rows(q_embed);  // 1 x D_q
    ad::Var<S> x = ad::concat_cols<S>(
        {ad::constant(f.tape, cheap), ad::tile_rows(q_mean, L)});
    return nn::mlp2(f, h.head, x);  // L x 1
}

// top-count clips by score; ties go to the lower index
inline SelectionMask mask_from_scores(const std::vector<double>& scores, int count) {
    const int L = static_cast<int>(scores.size());
    std::vector<int> idx(L);
    for (int i = 0; i < L; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    SelectionMask m = select_zero(L);
    for (int i = 0; i < std::min(count, L); ++i) m.bits[idx[i]] = 1;
    return m;
}

// Hard top-k selection with a straight-through sigmoid gate for training.
template <class S>
StepSelection<S> topk_select(const Forward<S>& f, const TopkScorerHandles& h,
                             const Mat<S>& cheap, ad::Var<S> q_embed, double k_percent,
                             bool training) {
    const int L = static_cast<int>(cheap.rows());
    ad::Var<S> scores = topk_scores(f, h, cheap, q_embed);
    StepSelection<S> out;
    out.probs = to_vector(scores.val());
    out.mask = mask_from_scores(out.probs, fraction_count(L, k_percent));
    Mat<S> hard = Mat<S>::Zero(L, 1);
    for (int l = 0; l < L; ++l) hard(l, 0) = out.mask.bits[l] ? S(1) : S(0);
    if (training) {
        out.gate = ad::straight_through(hard, ad::sigmoid(scores));
    } else {
        out.gate = ad::constant(f.tape, hard);
    }
    Mat<S> fr(1, 1);
    fr(0, 0) = static_cast<S>(out.mask.count() / static_cast<double>(L));
    out.relaxed_fraction = ad::constant(f.tape, fr);
    return out;
}

// Recurrent gate: tanh cell over clips in order, two-class Gumbel-ST choice per
// clip, trained with the budget loss.
struct GateHandles {
    handles::Linear cell;   // [cheap_l ; q_mean ; h_{l-1}] -> hidden
    handles::Mlp2 head;     // hidden -> 2 logits
    int hidden = 0;
};

template <class S>
GateHandles build_gate(ParamStore<S>& p, const ModelConfig& cfg, int hidden, Rng& rng) {
    GateHandles h;
    h.hidden = hidden;
    h.cell = detail::add_linear(p, "gate_cell", cfg.d_cheap + cfg.query_embed_dim + hidden,
                                hidden, rng);
    h.head = detail::add_mlp2(p, "gate_head", hidden, hidden, 2, rng);
    return h;
}

template <class S>
StepSelection<S> gate_select(const Forward<S>& f, const GateHandles& h, const Mat<S>& cheap,
                             ad::Var<S> q_embed, double temperature, double threshold,
                             bool training, Rng* rng) {
    const int L = static_cast<int>(cheap.rows());
    ad::Tape<S>& t = f.tape;
    ad::Var<S> q_mean = ad::mean_over_rows(q_embed);
    ad::Var<S> hstate = ad::constant(t, Mat<S>(Mat<S>::Zero(1, h.hidden)));

    StepSelection<S> out;
    out.mask.bits.assign(L, 0);
    out.probs.assign(L, 0.0);
    Mat<S> hard = Mat<S>::Zero(L, 1);
    std::vector<ad::Var<S>> relaxed_cells;

    for (int l = 0; l < L; ++l) {
        ad::Var<S> x = ad::concat_cols<S>(
            {ad::constant(t, Mat<S>(cheap.row(l))), q_mean, hstate});
        hstate = ad::tanh_(nn::linear(f, h.cell, x));
        ad::Var<S> logits = nn::mlp2(f, h.head, hstate);       // 1 x 2
        ad::Var<S> pi = ad::slice_cols(ad::softmax_rows(logits), 0, 1);
        const double p = static_cast<double>(pi.scalar());
        out.probs[l] = p;
        if (training) {
            const double g0 = rng->gumbel(), g1 = rng->gumbel();
            ad::Var<S> p_cl = ad::clamp(pi, static_cast<S>(kProbClampEps),
                                        static_cast<S>(1.0 - kProbClampEps));
            ad::Var<S> one = ad::constant(t, Mat<S>(Mat<S>::Ones(1, 1)));
            ad::Var<S> z = ad::smul(
                ad::add(ad::sub(ad::log_(p_cl), ad::log_(ad::sub(one, p_cl))),
                        ad::scalar(t, static_cast<S>(g0 - g1))),
                static_cast<S>(1.0 / temperature));
            ad::Var<S> rel = ad::sigmoid(z);
            relaxed_cells.push_back(rel);
            if (rel.scalar() > S(0.5)) {
                hard(l, 0) = S(1);
                out.mask.bits[l] = 1;
            }
        } else if (p >= threshold) {
            hard(l, 0) = S(1);
            out.mask.bits[l] = 1;
        }
    }

    if (training) {
        // stack the relaxed cells into an L x 1 column
        std::vector<ad::Var<S>> rows;
        rows.reserve(L);
        for (auto& r : relaxed_cells) rows.push_back(r);
        // concat along rows via transpose of a column concat
        ad::Var<S> relaxed_row = ad::concat_cols(rows);         // 1 x L
        ad::Var<S> relaxed = ad::transpose(relaxed_row);        // L x 1
        out.gate = ad::straight_through(hard, relaxed);
        out.relaxed_fraction = ad::smul(ad::sum_all(relaxed), static_cast<S>(1.0 / L));
    } else {
        out.gate = ad::constant(t, hard);
        Mat<S> fr(1, 1);
        fr(0, 0) = static_cast<S>(out.mask.count() / static_cast<double>(L));
        out.relaxed_fraction = ad::constant(t, fr);
    }
    return out;
}

}  // namespace clipspot
