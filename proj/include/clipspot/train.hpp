#pragma once

#include <atomic>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "clipspot/baselines.hpp"
#include "clipspot/losses.hpp"
#include "clipspot/model.hpp"
#include "clipspot/params.hpp"
#include "clipspot/spotter.hpp"
#include "clipspot/taskgen.hpp"

namespace clipspot {

struct OptimizerConfig {
    std::string name = "adamw";
    double lr = 0.001;
    int batch = 128;
    int epochs = 60;
    std::string schedule = "linear_warmup";
    double warmup_frac = 0.1;
    double weight_decay = 0.0;
    double clip_norm = 10.0;
    int threads = 1;

    io::json to_json() const {
        return io::json{{"name", name},       {"lr", lr},
                        {"batch", batch},     {"epochs", epochs},
                        {"schedule", schedule}, {"warmup_frac", warmup_frac},
                        {"weight_decay", weight_decay}, {"clip_norm", clip_norm},
                        {"threads", threads}};
    }
    static OptimizerConfig from_json(const io::json& j) {
        OptimizerConfig c;
        c.name = j.at("name").get<std::string>();
        c.lr = j.at("lr").get<double>();
        c.batch = j.at("batch").get<int>();
        c.epochs = j.at("epochs").get<int>();
        c.schedule = j.at("schedule").get<std::string>();
        c.warmup_frac = j.at("warmup_frac").get<double>();
        c.weight_decay = j.at("weight_decay").get<double>();
        c.clip_norm = j.at("clip_norm").get<double>();
        c.threads = j.at("threads").get<int>();
        return c;
    }
};

class TrainingDivergence : public std::runtime_error {
public:
    TrainingDivergence(int epoch, const std::string& what)
        : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": " + what),
          epoch_(epoch) {}
    int epoch() const { return epoch_; }

private:
    int epoch_;
};

// Static contiguous split; assignment is independent of scheduling so any
// per-thread accumulation reduces deterministically.
inline void parallel_chunks(int n, int threads,
                            const std::function<void(int, int, int)>& fn) {
    threads = std::max(1, std::min(threads, n));
    if (threads == 1) {
        fn(0, n, 0);
        return;
    }
    std::vector<std::thread> pool;
    const int base = n / threads, rem = n % threads;
    int begin = 0;
    for (int t = 0; t < threads; ++t) {
        const int len = base + (t < rem ? 1 : 0);
        const int b = begin, e = begin + len;
        begin = e;
        if (t == 0) continue;  // chunk 0 runs on this thread below
        pool.emplace_back([&fn, b, e, t] { fn(b, e, t); });
    }
    fn(0, base + (0 < rem ? 1 : 0), 0);
    for (auto& th : pool) th.join();
}

// ---- AdamW -----------------------------------------------------------------------------

template <class S>
class AdamW {
public:
    AdamW(const ParamStore<S>& store, double weight_decay)
        : weight_decay_(weight_decay) {
        m_.reserve(store.size());
        v_.reserve(store.size());
        for (int i = 0; i < store.size(); ++i) {
            const auto& val = store.entry(i).value;
            m_.push_back(Mat<S>::Zero(val.rows(), val.cols()));
            v_.push_back(Mat<S>::Zero(val.rows(), val.cols()));
        }
    }

    void step(ParamStore<S>& store, const GradBuffer<S>& g, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (int i = 0; i < store.size(); ++i) {
            Mat<S>& w = store.entry(i).value;
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g.g[i];
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.g[i].cwiseProduct(g.g[i]);
            Mat<S> mhat = m_[i] / bc1;
            Mat<S> vhat = v_[i] / bc2;
            w -= (lr * (mhat.array() / (vhat.array().sqrt() + eps_)).matrix() +
                  (lr * weight_decay_) * w);
        }
    }

private:
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_ = 0.0;
    long t_ = 0;
    std::vector<Mat<S>> m_, v_;
};

// ---- data preparation ---------------------------------------------------------------------

template <class S>
struct PreparedData {
    std::vector<Mat<S>> cheap, expensive;
    std::vector<std::vector<std::int32_t>> tokens;
    std::vector<TimeWindow> gt;
    std::vector<std::string> ids;
    int clips = 0;

    int size() const { return static_cast<int>(cheap.size()); }

    static PreparedData from(const SyntheticDataset& ds) {
        PreparedData d;
        d.clips = ds.config.clips;
        d.cheap.reserve(ds.instances.size());
        for (const auto& inst : ds.instances) {
            d.cheap.push_back(inst.cheap_features.cast<S>());
            d.expensive.push_back(inst.expensive_features.cast<S>());
            d.tokens.push_back(inst.query_tokens);
            d.gt.push_back(inst.ground_truth);
            d.ids.push_back(inst.instance_id);
        }
        return d;
    }
};

// Frozen-teacher outputs cached once per training set.
template <class S>
struct ExpertCache {
    std::vector<Mat<S>> c;
    std::vector<LocalizerOutputs> outs;
};

// ---- training setup -------------------------------------------------------------------------

enum class TrainMethod { expert, recursive, zero, random, uniform, topk, gate, fixed_mask };

inline const char* train_method_name(TrainMethod m) {
    switch (m) {
        case TrainMethod::expert: return "expert";
        case TrainMethod::recursive: return "recursive";
        case TrainMethod::zero: return "zero";
        case TrainMethod::random: return "random";
        case TrainMethod::uniform: return "uniform";
        case TrainMethod::topk: return "topk";
        case TrainMethod::gate: return "gate";
        default: return "fixed_mask";
    }
}

template <class S>
struct TrainSetup {
    ParamStore<S>* store = nullptr;
    EmParamHandles em;
    TopkScorerHandles topk;
    GateHandles gate;
    ModelConfig mcfg;
    SpotterConfig scfg;
    LossWeights weights;
    OptimizerConfig opt;
    TrainMethod method = TrainMethod::expert;
    double sample_fraction = 10.0;
    std::uint64_t seed = 0;
    bool distill = false;
    const ExpertCache<S>* expert_cache = nullptr;
    const std::vector<SelectionMask>* fixed_masks = nullptr;
};

namespace train_detail {

template <class S>
struct InstanceGraph {
    std::unique_ptr<ad::Tape<S>> tape;
    BoundParams<S> bound;
    ad::Var<S> per_instance;              // EM + weighted distill terms
    std::vector<ad::Var<S>> step_fracs;   // budget-coupled fractions, if any
    LossParts parts;
    int steps = 0;
};

template <class S>
ad::Var<S> reveal_from_mask(ad::Tape<S>& t, const Mat<S>& expensive, const SelectionMask& m) {
    Mat<S> v = expensive;
    for (int l = 0; l < v.rows(); ++l)
        if (!m.bits[l]) v.row(l).setZero();
    return ad::constant(t, std::move(v));
}

template <class S>
InstanceGraph<S> build_instance_graph(const TrainSetup<S>& s, const PreparedData<S>& data,
                                      int i, std::uint64_t epoch) {
    InstanceGraph<S> g;
    g.tape = std::make_unique<ad::Tape<S>>();
    ad::Tape<S>& t = *g.tape;
    g.bound = bind(t, *s.store, true);
    Rng rng(derive_seed(s.seed, "train", epoch * 1000003ULL + static_cast<std::uint64_t>(i)));

    Forward<S> f{t, g.bound, s.em, s.mcfg, true, &rng};
    const Mat<S>& cheap = data.cheap[i];
    const Mat<S>& expensive = data.expensive[i];
    const int L = data.clips;

    ad::Var<S> q_embed = encode_query(f, data.tokens[i]);
    ad::Var<S> revealed;

    switch (s.method) {
        case TrainMethod::expert:
        // full reveal
            revealed = ad::constant(t, expensive);
            break;
        case TrainMethod::zero:
            revealed = ad::constant(t, Mat<S>(Mat<S>::Zero(L, expensive.cols())));
            break;
        case TrainMethod::random: {
            SelectionMask m = select_random(L, s.sample_fraction, rng);
            revealed = reveal_from_mask(t, expensive, m);
            break;
        }
        case TrainMethod::uniform: {
            SelectionMask m = select_uniform(L, s.sample_fraction);
            revealed = reveal_from_mask(t, expensive, m);
            break;
        }
        case TrainMethod::fixed_mask: {
            revealed = reveal_from_mask(t, expensive, (*s.fixed_masks)[i]);
            break;
        }
        case TrainMethod::topk: {
            StepSelection<S> sel = topk_select(f, s.topk, cheap, q_embed, s.sample_fraction, true);
            revealed = ad::mul_colvec(ad::constant(t, expensive), sel.gate);
            break;
        }
        case TrainMethod::gate: {
            StepSelection<S> sel = gate_select(f, s.gate, cheap, q_embed, s.scfg.temperature,
                                               s.scfg.inference_threshold, true, &rng);
            revealed = ad::mul_colvec(ad::constant(t, expensive), sel.gate);
            g.step_fracs.push_back(sel.relaxed_fraction);
            g.steps = 1;
            break;
        }
        case TrainMethod::recursive: {
            RecursiveResult<S> rec = run_recursive(f, cheap, expensive, q_embed, s.scfg,
                                                   RunMode::train_st, &rng);
            revealed = rec.revealed;
            g.step_fracs = rec.step_fractions;
            g.steps = s.scfg.steps;
            break;
        }
    }

    EmHeads<S> em = em_forward(f, cheap, revealed, q_embed);
    const GroundTruthTargets targets = make_targets(data.gt[i], L, s.weights.extend_ratio);
    ad::Var<S> l_em = ad::add(span_loss_t(f, em.p_s, em.p_e, targets),
                              qgh_loss_t(f, em.s_hat, targets.highlight));
    g.parts.em = static_cast<double>(l_em.scalar());

    ad::Var<S> obj = l_em;
    if (s.distill && s.expert_cache) {
        ad::Var<S> l_fd = feature_distill_loss_t(f, s.expert_cache->c[i], em.c);
        ad::Var<S> l_pd = prediction_distill_loss_t(f, s.expert_cache->outs[i], em.s_hat,
                                                    em.p_s, em.p_e, s.weights.lambda_pd_h,
                                                    s.weights.lambda_pd_l);
        g.parts.fd = static_cast<double>(l_fd.scalar());
        g.parts.pd = static_cast<double>(l_pd.scalar());
        obj = ad::add(obj, ad::add(ad::smul(l_fd, static_cast<S>(s.weights.lambda_fd)),
                                   ad::smul(l_pd, static_cast<S>(s.weights.lambda_pd))));
    }
    g.per_instance = obj;
    return g;
}

}  // namespace train_detail

struct EpochLog {
    int epoch = 0;
    double em = 0.0, sel = 0.0, fd = 0.0, pd = 0.0, total = 0.0;

    io::json to_json() const {
        return io::json{{"epoch", epoch}, {"L_EM", em},   {"L_SEL", sel},
                        {"L_FD", fd},     {"L_PD", pd},   {"total", total}};
    }
};

// Minibatch training with the budget loss applied at the batch level: the
// quadratic penalty is linearized around the batch means, which gives the
// exact minibatch gradient while letting every instance keep its own tape.
template <class S>
std::vector<EpochLog> train_model(TrainSetup<S>& s, const PreparedData<S>& data) {
    ParamStore<S>& store = *s.store;
    AdamW<S> opt(store, s.opt.weight_decay);
    const int n = data.size();
    const int batch = std::max(1, s.opt.batch);
    const int steps_per_epoch = (n + batch - 1) / batch;
    const long total_steps = static_cast<long>(steps_per_epoch) * s.opt.epochs;
    const long warmup =
        s.opt.schedule == "linear_warmup"
            ? std::max<long>(1, static_cast<long>(s.opt.warmup_frac * total_steps))
            : 0;
    const bool budget_coupled =
        s.method == TrainMethod::recursive || s.method == TrainMethod::gate;

    std::vector<EpochLog> logs;
    long step = 0;
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;

    const int threads = std::max(1, s.opt.threads);
    std::vector<GradBuffer<S>> buffers(threads);
    for (auto& b : buffers) b.init(store);

    for (int epoch = 0; epoch < s.opt.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(s.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        EpochLog log;
        log.epoch = epoch;
        std::vector<double> epoch_joint;
        std::vector<std::vector<double>> epoch_steps;

        for (int b0 = 0; b0 < n; b0 += batch) {
            const int bsz = std::min(batch, n - b0);
            std::vector<train_detail::InstanceGraph<S>> graphs(bsz);

            parallel_chunks(bsz, threads, [&](int lo, int hi, int) {
                for (int k = lo; k < hi; ++k)
                    graphs[k] = train_detail::build_instance_graph(
                        s, data, order[b0 + k], static_cast<std::uint64_t>(epoch));
            });

            // batch means of the relaxed fractions
            const int n_steps = budget_coupled ? graphs[0].steps : 0;
            std::vector<double> step_mean(n_steps, 0.0);
            double joint_mean = 0.0;
            if (budget_coupled) {
                for (auto& g : graphs) {
                    double joint = 0.0;
                    for (int c = 0; c < n_steps; ++c) {
                        const double fr = static_cast<double>(g.step_fracs[c].scalar());
                        step_mean[c] += fr;
                        joint += fr;
                    }
                    joint_mean += joint;
                }
                for (auto& m : step_mean) m /= bsz;
                joint_mean /= bsz;
            }
            const double gamma = s.scfg.budget;
            std::vector<double> coef(n_steps, 0.0);
            double sel_value = 0.0;
            if (budget_coupled) {
                sel_value = (joint_mean - gamma) * (joint_mean - gamma);
                const double joint_coef = 2.0 * (joint_mean - gamma);
                for (int c = 0; c < n_steps; ++c) {
                    double per_step_coef = 0.0;
                    if (s.method == TrainMethod::recursive) {
                        const double target = gamma / n_steps;
                        sel_value += (step_mean[c] - target) * (step_mean[c] - target) / n_steps;
                        per_step_coef = 2.0 * (step_mean[c] - target) / n_steps;
                    }
                    coef[c] = s.weights.lambda_sel * (joint_coef + per_step_coef) / bsz;
                }
            }

            parallel_chunks(bsz, threads, [&](int lo, int hi, int tid) {
                for (int k = lo; k < hi; ++k) {
                    auto& g = graphs[k];
                    ad::Var<S> root = ad::smul(g.per_instance, static_cast<S>(1.0 / bsz));
                    for (int c = 0; c < n_steps; ++c)
                        root = ad::add(root,
                                       ad::smul(g.step_fracs[c], static_cast<S>(coef[c])));
                    g.tape->backward(root.id);
                    harvest_grads(*g.tape, g.bound, buffers[tid]);
                }
            });

            GradBuffer<S>& total = buffers[0];
            for (int t = 1; t < threads; ++t) total.add_from(buffers[t]);

            // global-norm clipping
            if (s.opt.clip_norm > 0.0) {
                double sq = 0.0;
                for (const auto& m : total.g) sq += static_cast<double>(m.squaredNorm());
                const double norm = std::sqrt(sq);
                if (norm > s.opt.clip_norm) {
                    const S k = static_cast<S>(s.opt.clip_norm / norm);
                    for (auto& m : total.g) m *= k;
                }
            }

            ++step;
            const double lr =
                warmup > 0 ? s.opt.lr * std::min(1.0, static_cast<double>(step) / warmup)
                           : s.opt.lr;
            opt.step(store, total, lr);
            for (auto& b : buffers) b.zero();

            double batch_em = 0.0, batch_fd = 0.0, batch_pd = 0.0;
            for (auto& g : graphs) {
                batch_em += g.parts.em;
                batch_fd += g.parts.fd;
                batch_pd += g.parts.pd;
            }
            log.em += batch_em / bsz;
            log.fd += batch_fd / bsz;
            log.pd += batch_pd / bsz;
            log.sel += sel_value;

            if (!std::isfinite(batch_em) || !store.all_finite())
                throw TrainingDivergence(epoch, "non-finite loss or parameters");
        }

        log.em /= steps_per_epoch;
        log.fd /= steps_per_epoch;
        log.pd /= steps_per_epoch;
        log.sel /= steps_per_epoch;
        log.total = log.em + s.weights.lambda_sel * log.sel + s.weights.lambda_fd * log.fd +
                    s.weights.lambda_pd * log.pd;
        if (!std::isfinite(log.total)) throw TrainingDivergence(epoch, "non-finite epoch loss");
        logs.push_back(log);
    }
    return logs;
}

// Eval-mode teacher outputs for every training instance.
template <class S>
ExpertCache<S> build_expert_cache(const ParamStore<S>& store, const EmParamHandles& h,
                                  const ModelConfig& cfg, const PreparedData<S>& data,
                                  int threads) {
    ExpertCache<S> cache;
    const int n = data.size();
    cache.c.resize(n);
    cache.outs.resize(n);
    parallel_chunks(n, threads, [&](int lo, int hi, int) {
        for (int i = lo; i < hi; ++i) {
            ad::Tape<S> t;
            BoundParams<S> bound = bind(t, store, false);
            Forward<S> f{t, bound, h, cfg, false, nullptr};
            ad::Var<S> q_embed = encode_query(f, data.tokens[i]);
            ad::Var<S> revealed = ad::constant(t, data.expensive[i]);
            EmHeads<S> em = em_forward(f, data.cheap[i], revealed, q_embed);
            cache.c[i] = em.c.val();
            cache.outs[i] = extract_outputs(em.s_hat, em.p_s, em.p_e);
        }
    });
    return cache;
}

}  // namespace clipspot
