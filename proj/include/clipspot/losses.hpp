#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "clipspot/autodiff.hpp"
#include "clipspot/core.hpp"
#include "clipspot/model.hpp"
#include "clipspot/serialize.hpp"

namespace clipspot {

struct LossWeights {
    double lambda_sel = 300.0;  // from the {300, 1000} grid
    double lambda_fd = 1.0;
    double lambda_pd = 1.0;
    double lambda_pd_l = 1.0;
    double lambda_pd_h = 10.0;  // from the {10, 30} grid
    double extend_ratio = 0.1;  // highlight target extension per side

    io::json to_json() const {
        return io::json{{"lambda_sel", lambda_sel},   {"lambda_fd", lambda_fd},
                        {"lambda_pd", lambda_pd},     {"lambda_pd_l", lambda_pd_l},
                        {"lambda_pd_h", lambda_pd_h}, {"extend_ratio", extend_ratio}};
    }
    static LossWeights from_json(const io::json& j) {
        LossWeights w;
        w.lambda_sel = j.at("lambda_sel").get<double>();
        w.lambda_fd = j.at("lambda_fd").get<double>();
        w.lambda_pd = j.at("lambda_pd").get<double>();
        w.lambda_pd_l = j.at("lambda_pd_l").get<double>();
        w.lambda_pd_h = j.at("lambda_pd_h").get<double>();
        w.extend_ratio = j.at("extend_ratio").get<double>();
        return w;
    }
};

// One-hot start/end indices plus the binary highlight row covering an
// extended window around the ground truth.
struct GroundTruthTargets {
    int start = 0;
    int end = 0;
    std::vector<std::uint8_t> highlight;
};

inline GroundTruthTargets make_targets(const TimeWindow& gt, int clips, double extend_ratio) {
    if (!gt.valid(clips)) throw std::invalid_argument("make_targets: invalid window");
    GroundTruthTargets t;
    t.start = gt.start;
    t.end = gt.end;
    const int ext = static_cast<int>(std::lround(extend_ratio * gt.length()));
    const int lo = std::max(0, gt.start - ext);
    const int hi = std::min(clips - 1, gt.end + ext);
    t.highlight.assign(clips, 0);
    for (int l = lo; l <= hi; ++l) t.highlight[l] = 1;
    return t;
}

// ---- plain-value losses (the operation contracts) -----------------------------------

// Half the sum of start and end cross-entropies; inputs are log-probabilities.
inline double span_loss(const std::vector<double>& start_logp,
                        const std::vector<double>& end_logp, const GroundTruthTargets& t) {
    return -0.5 * (start_logp[t.start] + end_logp[t.end]);
}

// Mean binary cross-entropy of highlight probabilities against binary labels.
inline double qgh_loss(const std::vector<double>& s_hat,
                       const std::vector<std::uint8_t>& s_star) {
    if (s_hat.size() != s_star.size()) throw std::invalid_argument("qgh_loss: size mismatch");
    constexpr double eps = 1e-12;
    double acc = 0.0;
    for (std::size_t l = 0; l < s_hat.size(); ++l) {
        const double p = std::clamp(s_hat[l], eps, 1.0 - eps);
        acc += s_star[l] ? -std::log(p) : -std::log(1.0 - p);
    }
    return acc / static_cast<double>(s_hat.size());
}

// Budget loss: squared deviation of the batch-mean joint fraction from gamma,
// plus the per-step regularizer pulling each step toward gamma / N.
inline double selection_loss(const std::vector<double>& joint_fractions,
                             const std::vector<std::vector<double>>& per_step_fractions,
                             double gamma, int steps) {
    if (joint_fractions.empty()) throw std::invalid_argument("selection_loss: empty batch");
    double joint_mean = 0.0;
    for (double f : joint_fractions) joint_mean += f;
    joint_mean /= static_cast<double>(joint_fractions.size());
    double loss = (joint_mean - gamma) * (joint_mean - gamma);

    const double per_step_target = gamma / steps;
    for (int n = 0; n < steps; ++n) {
        double m = 0.0;
        for (const auto& fr : per_step_fractions) m += fr[n];
        m /= static_cast<double>(per_step_fractions.size());
        loss += (m - per_step_target) * (m - per_step_target) / steps;
    }
    return loss;
}

// Mean absolute difference; the expert side is treated as constant.
inline double feature_distill_loss(const MatD& expert, const MatD& student) {
    if (expert.rows() != student.rows() || expert.cols() != student.cols())
        throw std::invalid_argument("feature_distill_loss: shape mismatch");
    return (expert - student).cwiseAbs().mean();
}

namespace detail {

inline double kl_categorical(const std::vector<double>& p_logp,
                             const std::vector<double>& q_logp) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p_logp.size(); ++i)
        acc += std::exp(p_logp[i]) * (p_logp[i] - q_logp[i]);
    return acc;
}

inline double kl_bernoulli(double p, double q) {
    constexpr double eps = 1e-12;
    p = std::clamp(p, eps, 1.0 - eps);
    q = std::clamp(q, eps, 1.0 - eps);
    return p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
}

}  // namespace detail

// KL(student || expert) for highlight (per-position Bernoulli, averaged) and
// for the start/end distributions.
inline double prediction_distill_loss(const LocalizerOutputs& expert,
                                      const LocalizerOutputs& student, double lambda_pd_h,
                                      double lambda_pd_l) {
    if (expert.highlight.size() != student.highlight.size())
        throw std::invalid_argument("prediction_distill_loss: shape mismatch");
    double kl_h = 0.0;
    for (std::size_t l = 0; l < expert.highlight.size(); ++l)
        kl_h += detail::kl_bernoulli(student.highlight[l], expert.highlight[l]);
    kl_h /= static_cast<double>(expert.highlight.size());
    const double kl_s = detail::kl_categorical(student.start_logp, expert.start_logp);
    const double kl_e = detail::kl_categorical(student.end_logp, expert.end_logp);
    return lambda_pd_h * kl_h + lambda_pd_l * (kl_s + kl_e);
}

struct LossParts {
    double em = 0.0;   // span + qgh
    double sel = 0.0;
    double fd = 0.0;
    double pd = 0.0;
};

inline double total_loss(const LossParts& parts, const LossWeights& w) {
    const auto check = [](double v, const char* name) {
        if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite loss term: ") + name);
        return v;
    };
    return check(parts.em, "L_EM") + w.lambda_sel * check(parts.sel, "L_SEL") +
           w.lambda_fd * check(parts.fd, "L_FD") + w.lambda_pd * check(parts.pd, "L_PD");
}

// ---- tape losses (training path) ------------------------------------------------------

template <class S>
ad::Var<S> span_loss_t(const Forward<S>& f, ad::Var<S> start_logp, ad::Var<S> end_logp,
                       const GroundTruthTargets& t) {
    ad::Var<S> ce = ad::add(ad::pick(start_logp, 0, t.start), ad::pick(end_logp, 0, t.end));
    return ad::smul(ce, static_cast<S>(-0.5));
}

template <class S>
ad::Var<S> qgh_loss_t(const Forward<S>& f, ad::Var<S> s_hat,
                      const std::vector<std::uint8_t>& s_star) {
    const int L = s_hat.rows();
    // -[y log p + (1-y) log(1-p)] written as -(log(1-p) + y (log p - log(1-p)))
    Mat<S> y(L, 1);
    for (int l = 0; l < L; ++l) y(l, 0) = s_star[l] ? S(1) : S(0);
    ad::Var<S> p = ad::clamp(s_hat, static_cast<S>(1e-12), static_cast<S>(1.0 - 1e-12));
    ad::Var<S> one = ad::constant(f.tape, Mat<S>(Mat<S>::Ones(L, 1)));
    ad::Var<S> log_p = ad::log_(p);
    ad::Var<S> log_1p = ad::log_(ad::sub(one, p));
    ad::Var<S> yv = ad::constant(f.tape, y);
    ad::Var<S> per = ad::add(log_1p, ad::mul(yv, ad::sub(log_p, log_1p)));
    return ad::smul(ad::mean_all(per), S(-1));
}

// Per-instance budget terms; the batch mean is taken outside the tape, so the
// squared form is applied by the trainer on accumulated relaxed fractions.
template <class S>
ad::Var<S> feature_distill_loss_t(const Forward<S>& f, const Mat<S>& expert_c,
                                  ad::Var<S> student_c) {
    if (expert_c.rows() != student_c.rows() || expert_c.cols() != student_c.cols())
        throw std::invalid_argument("feature_distill_loss: shape mismatch");
    return ad::mean_all(ad::abs_(ad::sub(ad::constant(f.tape, expert_c), student_c)));
}

template <class S>
ad::Var<S> prediction_distill_loss_t(const Forward<S>& f, const LocalizerOutputs& expert,
                                     ad::Var<S> s_hat, ad::Var<S> start_logp,
                                     ad::Var<S> end_logp, double lambda_pd_h,
                                     double lambda_pd_l) {
    ad::Tape<S>& t = f.tape;
    const int L = s_hat.rows();

    // highlight: mean per-position Bernoulli KL(student || expert)
    Mat<S> eh(L, 1), ehc(L, 1);
    for (int l = 0; l < L; ++l) {
        const double q = std::clamp(expert.highlight[l], 1e-12, 1.0 - 1e-12);
        eh(l, 0) = static_cast<S>(std::log(q));
        ehc(l, 0) = static_cast<S>(std::log(1.0 - q));
    }
    ad::Var<S> p = ad::clamp(s_hat, static_cast<S>(1e-12), static_cast<S>(1.0 - 1e-12));
    ad::Var<S> one = ad::constant(t, Mat<S>(Mat<S>::Ones(L, 1)));
    ad::Var<S> pc = ad::sub(one, p);
    ad::Var<S> kl_pos = ad::add(ad::mul(p, ad::sub(ad::log_(p), ad::constant(t, eh))),
                                ad::mul(pc, ad::sub(ad::log_(pc), ad::constant(t, ehc))));
    ad::Var<S> kl_h = ad::mean_all(kl_pos);

    // spans: KL(student || expert) from log-probability rows
    const auto span_kl = [&](ad::Var<S> stu_logp, const std::vector<double>& exp_logp) {
        Mat<S> e(1, L);
        for (int l = 0; l < L; ++l) e(0, l) = static_cast<S>(exp_logp[l]);
        ad::Var<S> diff = ad::sub(stu_logp, ad::constant(t, e));
        return ad::sum_all(ad::mul(ad::exp_(stu_logp), diff));
    };
    ad::Var<S> kl_l = ad::add(span_kl(start_logp, expert.start_logp),
                              span_kl(end_logp, expert.end_logp));
    return ad::add(ad::smul(kl_h, static_cast<S>(lambda_pd_h)),
                   ad::smul(kl_l, static_cast<S>(lambda_pd_l)));
}

}  // namespace clipspot
