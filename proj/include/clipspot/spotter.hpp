#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "clipspot/autodiff.hpp"
#include "clipspot/core.hpp"
#include "clipspot/model.hpp"
#include "clipspot/rng.hpp"

namespace clipspot {

struct SpotterConfig {
    int steps = 4;                    // N
    double budget = 1.0;              // gamma, target selected fraction
    double temperature = 1.0;         // tau
    double inference_threshold = 0.5;
    int per_step_cap = 0;             // 0 = unlimited

    void validate() const {
        if (steps < 1) throw std::invalid_argument("config error: steps must be >= 1");
        if (!(budget > 0.0) || budget > 1.0)
            throw std::invalid_argument("config error: budget must be in (0, 1]");
        if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    }

    io::json to_json() const {
        return io::json{{"steps", steps},
                        {"budget", budget},
                        {"temperature", temperature},
                        {"inference_threshold", inference_threshold},
                        {"per_step_cap", per_step_cap}};
    }
    static SpotterConfig from_json(const io::json& j) {
        SpotterConfig c;
        c.steps = j.at("steps").get<int>();
        c.budget = j.at("budget").get<double>();
        c.temperature = j.at("temperature").get<double>();
        c.inference_threshold = j.at("inference_threshold").get<double>();
        c.per_step_cap = j.at("per_step_cap").get<int>();
        return c;
    }
};

struct SelectionTrace {
    std::vector<SelectionMask> per_step;             // b_2 .. b_{N+1}
    SelectionMask joint;                             // OR of per-step masks
    std::vector<std::vector<double>> per_step_probs; // pi per step (0 where excluded)
};

enum class RunMode {
    eval,           // deterministic thresholding, hard gating
    train_st,       // straight-through: hard forward, relaxed gradient
    train_relaxed,  // relaxed forward too (smooth objective for gradient checks)
};

inline bool is_training(RunMode m) { return m != RunMode::eval; }

// ---- scalar op: two-class Gumbel-softmax sample -------------------------------------

struct BinarySample {
    int hard = 0;
    double relaxed = 0.0;
};

inline constexpr double kProbClampEps = 1e-6;

// Training draw with explicit noise; g0/g1 are standard Gumbel samples.
inline BinarySample gumbel_binary_sample_with_noise(double select_prob, double tau, double g0,
                                                    double g1) {
    if (!(tau > 0.0)) throw std::invalid_argument("temperature must be > 0");
    const double p = std::clamp(select_prob, kProbClampEps, 1.0 - kProbClampEps);
    const double a0 = (std::log(p) + g0) / tau;
    const double a1 = (std::log(1.0 - p) + g1) / tau;
    BinarySample s;
    s.relaxed = 1.0 / (1.0 + std::exp(a1 - a0));
    s.hard = a0 > a1 ? 1 : 0;  // argmax of the two-class relaxation
    return s;
}

inline BinarySample gumbel_binary_sample(double select_prob, double tau, bool train, Rng& rng,
                                         double inference_threshold = 0.5) {
    if (!(tau > 0.0)) throw std::invalid_argument("temperature must be > 0");
    if (!train) {
        BinarySample s;
        s.hard = select_prob >= inference_threshold ? 1 : 0;
        s.relaxed = select_prob;
        return s;
    }
    const double g0 = rng.gumbel();
    const double g1 = rng.gumbel();
    return gumbel_binary_sample_with_noise(select_prob, tau, g0, g1);
}

// Frozen per-(step, clip) Gumbel noise so a training forward can be replayed
// exactly (used by the finite-difference gradient checks).
struct GumbelNoiseTable {
    std::vector<std::vector<std::pair<double, double>>> g;  // [step][clip] = (g0, g1)

    static GumbelNoiseTable draw(int steps, int clips, Rng& rng) {
        GumbelNoiseTable t;
        t.g.assign(steps, std::vector<std::pair<double, double>>(clips));
        for (auto& row : t.g)
            for (auto& e : row) e = {rng.gumbel(), rng.gumbel()};
        return t;
    }
};

// ---- on-tape selection step ----------------------------------------------------------

// Hard per-step cap (top probabilities win, ties to the lower index).
template <class S>
void apply_cap(Mat<S>& hard, const std::vector<double>& probs, int cap) {
    if (cap <= 0) return;
    std::vector<int> chosen;
    for (int l = 0; l < hard.rows(); ++l)
        if (hard(l, 0) > S(0)) chosen.push_back(l);
    if (static_cast<int>(chosen.size()) <= cap) return;
    std::stable_sort(chosen.begin(), chosen.end(),
                     [&](int a, int b) { return probs[a] > probs[b]; });
    for (std::size_t i = cap; i < chosen.size(); ++i) hard(chosen[i], 0) = S(0);
}

template <class S>
struct StepSelection {
    SelectionMask mask;             // hard choices for this step
    std::vector<double> probs;      // pi, zeroed at excluded clips
    ad::Var<S> gate;                // L x 1 gating column for feature reveal
    ad::Var<S> relaxed_fraction;    // scalar; selected fraction on the loss path
};

// One selection round: two-layer policy head on c, two-class softmax per clip,
// Gumbel straight-through sampling. Clips in prev_joint are excluded.
template <class S>
StepSelection<S> select_step(const Forward<S>& f, ad::Var<S> c, const SelectionMask& prev_joint,
                             const SpotterConfig& cfg, RunMode mode, Rng* rng,
                             const std::vector<std::pair<double, double>>* frozen_noise = nullptr) {
    if (!f.h.has_policy) throw std::logic_error("select_step: model has no policy head");
    cfg.validate();
    const int L = c.rows();
    ad::Tape<S>& t = f.tape;

    ad::Var<S> logits = nn::mlp2(f, f.h.policy, c);            // L x 2
    ad::Var<S> pi = ad::slice_cols(ad::softmax_rows(logits), 0, 1);  // L x 1

    // keep the rng stream aligned regardless of exclusions
    std::vector<std::pair<double, double>> noise(L, {0.0, 0.0});
    if (is_training(mode)) {
        if (frozen_noise) {
            noise = *frozen_noise;
        } else {
            for (int l = 0; l < L; ++l) noise[l] = {rng->gumbel(), rng->gumbel()};
        }
    }

    StepSelection<S> out;
    out.mask.bits.assign(L, 0);
    out.probs.assign(L, 0.0);

    Mat<S> include = Mat<S>::Zero(L, 1);  // 1 where clip is still selectable
    for (int l = 0; l < L; ++l)
        if (!prev_joint.bits[l]) include(l, 0) = S(1);

    if (mode == RunMode::eval) {
        Mat<S> hard = Mat<S>::Zero(L, 1);
        for (int l = 0; l < L; ++l) {
            if (prev_joint.bits[l]) continue;
            const double p = static_cast<double>(pi.val()(l, 0));
            out.probs[l] = p;
            if (p >= cfg.inference_threshold) hard(l, 0) = S(1);
        }
        apply_cap(hard, out.probs, cfg.per_step_cap);
        for (int l = 0; l < L; ++l) out.mask.bits[l] = hard(l, 0) > S(0) ? 1 : 0;
        out.gate = ad::constant(t, hard);
        Mat<S> fr(1, 1);
        fr(0, 0) = static_cast<S>(out.mask.count() / static_cast<double>(L));
        out.relaxed_fraction = ad::constant(t, fr);
        return out;
    }

    // training: relaxed two-class softmax on the tape, hard argmax values
    ad::Var<S> p_cl = ad::clamp(pi, static_cast<S>(kProbClampEps),
                                static_cast<S>(1.0 - kProbClampEps));
    ad::Var<S> one = ad::constant(t, Mat<S>(Mat<S>::Ones(L, 1)));
    Mat<S> dg(L, 1);
    for (int l = 0; l < L; ++l) dg(l, 0) = static_cast<S>(noise[l].first - noise[l].second);
    ad::Var<S> z = ad::smul(
        ad::add(ad::sub(ad::log_(p_cl), ad::log_(ad::sub(one, p_cl))), ad::constant(t, dg)),
        static_cast<S>(1.0 / cfg.temperature));
    ad::Var<S> relaxed = ad::sigmoid(z);                      // L x 1
    ad::Var<S> include_v = ad::constant(t, include);
    ad::Var<S> relaxed_m = ad::mul(relaxed, include_v);       // excluded clips -> 0

    Mat<S> hard = Mat<S>::Zero(L, 1);
    for (int l = 0; l < L; ++l) {
        if (prev_joint.bits[l]) continue;
        out.probs[l] = static_cast<double>(pi.val()(l, 0));
        if (relaxed.val()(l, 0) > S(0.5)) hard(l, 0) = S(1);
    }
    apply_cap(hard, out.probs, cfg.per_step_cap);
    for (int l = 0; l < L; ++l) out.mask.bits[l] = hard(l, 0) > S(0) ? 1 : 0;

    if (mode == RunMode::train_relaxed) {
        out.gate = relaxed_m;
    } else {
        out.gate = ad::straight_through(hard, relaxed_m);
    }
    out.relaxed_fraction = ad::smul(ad::sum_all(relaxed_m), static_cast<S>(1.0 / L));
    return out;
}

// ---- the recursive loop ---------------------------------------------------------------

template <class S>
struct RecursiveResult {
    ad::Var<S> revealed;                      // final v-bar, L x D_v
    SelectionTrace trace;
    std::vector<ad::Var<S>> step_fractions;   // per-step selected fraction (loss path)
    ad::Var<S> joint_fraction;                // sum of step fractions
};

// Alternates preview and selection for cfg.steps rounds. The first preview sees
// zeros in place of expensive features; each round reveals the selected rows
// (gated straight-through during training so the policy receives gradient).
template <class S>
RecursiveResult<S> run_recursive(const Forward<S>& f, const Mat<S>& cheap,
                                 const Mat<S>& expensive, ad::Var<S> q_embed,
                                 const SpotterConfig& cfg, RunMode mode, Rng* rng,
                                 const GumbelNoiseTable* frozen = nullptr) {
    cfg.validate();
    const int L = static_cast<int>(cheap.rows());
    ad::Tape<S>& t = f.tape;

    ad::Var<S> cheap_v = ad::constant(t, cheap);
    ad::Var<S> expensive_v = ad::constant(t, expensive);
    ad::Var<S> v_bar = ad::constant(t, Mat<S>(Mat<S>::Zero(L, expensive.cols())));

    // the query stream does not depend on revealed clips; encode it once
    ad::Var<S> q_in = detail::with_positions(f, nn::linear(f, f.h.in_query, q_embed));
    ad::Var<S> q_enc = detail::encode_stream(f, q_in);

    RecursiveResult<S> res;
    res.trace.joint.bits.assign(L, 0);

    for (int n = 0; n < cfg.steps; ++n) {
        ad::Var<S> v_in = detail::with_positions(
            f, nn::linear(f, f.h.in_visual, ad::concat_cols<S>({cheap_v, v_bar})));
        ad::Var<S> v_enc = detail::encode_stream(f, v_in);
        ad::Var<S> c_n = detail::context_query_attention(f, v_enc, q_enc);

        StepSelection<S> step =
            select_step(f, c_n, res.trace.joint, cfg, mode, rng,
                        frozen ? &frozen->g[n] : nullptr);
        v_bar = ad::add(v_bar, ad::mul_colvec(expensive_v, step.gate));

        res.trace.per_step.push_back(step.mask);
        res.trace.per_step_probs.push_back(step.probs);
        res.trace.joint = mask_or(res.trace.joint, step.mask);
        res.step_fractions.push_back(step.relaxed_fraction);
    }

    res.joint_fraction = res.step_fractions[0];
    for (std::size_t i = 1; i < res.step_fractions.size(); ++i)
        res.joint_fraction = ad::add(res.joint_fraction, res.step_fractions[i]);
    res.revealed = v_bar;
    return res;
}

}  // namespace clipspot
