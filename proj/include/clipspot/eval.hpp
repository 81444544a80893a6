#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "clipspot/baselines.hpp"
#include "clipspot/costmodel.hpp"
#include "clipspot/model.hpp"
#include "clipspot/spotter.hpp"
#include "clipspot/train.hpp"

namespace clipspot {

template <class S>
struct EvalSpec {
    TrainMethod method = TrainMethod::expert;
    double sample_fraction = 10.0;
    SpotterConfig scfg;
    const std::vector<SelectionMask>* fixed_masks = nullptr;
    std::uint64_t seed = 0;  // random-baseline masks
};

struct PerQueryResult {
    std::string id;
    SelectionMask mask;
    std::vector<TimeWindow> proposals;
    TimeWindow gt;
    double iou_top1 = 0.0;
    bool correct_at_5 = false;  // recall@5 at both IoU thresholds
};

struct EvalOutcome {
    MetricsReport report;
    std::vector<PerQueryResult> per_query;
};

template <class S>
struct ModelBundle {
    ParamStore<S>* store = nullptr;
    EmParamHandles em;
    TopkScorerHandles topk;
    GateHandles gate;
    ModelConfig mcfg;
};

template <class S>
PerQueryResult evaluate_instance(const ModelBundle<S>& mb, const EvalSpec<S>& spec,
                                 const PreparedData<S>& data, int i, int top_k) {
    ad::Tape<S> t;
    BoundParams<S> bound = bind(t, *mb.store, false);
    Forward<S> f{t, bound, mb.em, mb.mcfg, false, nullptr};
    const int L = data.clips;

    ad::Var<S> q_embed = encode_query(f, data.tokens[i]);
    ad::Var<S> revealed;
    SelectionMask mask;

    switch (spec.method) {
        case TrainMethod::expert:
            mask = select_all(L);
            revealed = ad::constant(t, data.expensive[i]);
            break;
        case TrainMethod::zero:
            mask = select_zero(L);
            revealed = ad::constant(t, Mat<S>(Mat<S>::Zero(L, data.expensive[i].cols())));
            break;
        case TrainMethod::random: {
            Rng rng(derive_seed(spec.seed, "eval-random", static_cast<std::uint64_t>(i)));
            mask = select_random(L, spec.sample_fraction, rng);
            revealed = train_detail::reveal_from_mask(t, data.expensive[i], mask);
            break;
        }
        case TrainMethod::uniform:
            mask = select_uniform(L, spec.sample_fraction);
            revealed = train_detail::reveal_from_mask(t, data.expensive[i], mask);
            break;
        case TrainMethod::fixed_mask:
            mask = (*spec.fixed_masks)[i];
            revealed = train_detail::reveal_from_mask(t, data.expensive[i], mask);
            break;
        case TrainMethod::topk: {
            StepSelection<S> sel =
                topk_select(f, mb.topk, data.cheap[i], q_embed, spec.sample_fraction, false);
            mask = sel.mask;
            revealed = ad::mul_colvec(ad::constant(t, data.expensive[i]), sel.gate);
            break;
        }
        case TrainMethod::gate: {
            StepSelection<S> sel =
                gate_select(f, mb.gate, data.cheap[i], q_embed, spec.scfg.temperature,
                            spec.scfg.inference_threshold, false, nullptr);
            mask = sel.mask;
            revealed = ad::mul_colvec(ad::constant(t, data.expensive[i]), sel.gate);
            break;
        }
        case TrainMethod::recursive: {
            RecursiveResult<S> rec = run_recursive(f, data.cheap[i], data.expensive[i], q_embed,
                                                   spec.scfg, RunMode::eval, nullptr);
            mask = rec.trace.joint;
            revealed = rec.revealed;
            break;
        }
    }

    EmHeads<S> em = em_forward(f, data.cheap[i], revealed, q_embed);
    PerQueryResult r;
    r.id = data.ids[i];
    r.mask = mask;
    r.gt = data.gt[i];
    r.proposals = propose_spans(to_vector(em.p_s.val()), to_vector(em.p_e.val()), top_k,
                                mb.mcfg.resolved_max_span(L));
    r.iou_top1 = r.proposals.empty() ? 0.0 : temporal_iou(r.proposals[0], r.gt);
    r.correct_at_5 = recall_at_k(r.proposals, r.gt, top_k, 0.3) == 1 &&
                     recall_at_k(r.proposals, r.gt, top_k, 0.5) == 1;
    return r;
}

template <class S>
EvalOutcome evaluate_model(const ModelBundle<S>& mb, const EvalSpec<S>& spec,
                           const PreparedData<S>& data, const CostTable& cost,
                           bool include_semantic_index, int threads, int top_k = 5) {
    const int n = data.size();
    EvalOutcome out;
    out.per_query.resize(n);
    parallel_chunks(n, threads, [&](int lo, int hi, int) {
        for (int i = lo; i < hi; ++i)
            out.per_query[i] = evaluate_instance(mb, spec, data, i, top_k);
    });

    std::vector<std::vector<TimeWindow>> preds;
    std::vector<TimeWindow> gts;
    std::vector<int> selected, totals;
    preds.reserve(n);
    for (const auto& q : out.per_query) {
        preds.push_back(q.proposals);
        gts.push_back(q.gt);
        selected.push_back(q.mask.count());
        totals.push_back(data.clips);
    }

    MetricsReport& rep = out.report;
    rep.mr_at_1 = mean_recall(preds, gts, 1);
    rep.mr_at_5 = mean_recall(preds, gts, top_k);
    rep.efficiency_eta = efficiency_level(selected, totals);
    rep.tflops = dataset_cost_report(selected, totals, cost, include_semantic_index).mean_tflops;

    double iou_all = 0.0, nz_all = 0.0;
    BehaviorStats correct{}, wrong{};
    for (const auto& q : out.per_query) {
        const double iou = selection_iou(q.mask, q.gt);
        const double nz = selection_hits_gt(q.mask, q.gt) ? 1.0 : 0.0;
        iou_all += iou;
        nz_all += nz;
        BehaviorStats& side = q.correct_at_5 ? correct : wrong;
        side.mean_iou += iou;
        side.nonzero_pct += nz;
        side.n += 1;
    }
    rep.mean_iou_selected_vs_gt = iou_all / n;
    rep.mean_nonzero_intersection = 100.0 * nz_all / n;
    for (BehaviorStats* side : {&correct, &wrong}) {
        if (side->n > 0) {
            side->mean_iou /= side->n;
            side->nonzero_pct = 100.0 * side->nonzero_pct / side->n;
        }
    }
    rep.correct = correct;
    rep.wrong = wrong;
    return out;
}

// ---- metrics serialization -----------------------------------------------------------

inline io::json behavior_to_json(const BehaviorStats& b) {
    return io::json{{"mean_iou", b.mean_iou}, {"nonzero_pct", b.nonzero_pct}, {"n", b.n}};
}

inline io::json metrics_to_json(const MetricsReport& r) {
    io::json j;
    j["mr1"] = r.mr_at_1;
    j["mr5"] = r.mr_at_5;
    j["eta"] = r.efficiency_eta;
    j["tflops"] = r.tflops;
    j["mean_iou"] = r.mean_iou_selected_vs_gt;
    j["nonzero_pct"] = r.mean_nonzero_intersection;
    j["behavior"] = io::json{{"correct", behavior_to_json(r.correct)},
                             {"wrong", behavior_to_json(r.wrong)}};
    return j;
}

inline std::string dump_per_query_jsonl(const std::vector<PerQueryResult>& qs) {
    std::string out;
    for (const auto& q : qs) {
        io::json j;
        j["id"] = q.id;
        j["selection"] = q.mask.to_string();
        j["gt"] = io::json::array({q.gt.start, q.gt.end});
        io::json props = io::json::array();
        for (const auto& w : q.proposals) props.push_back(io::json::array({w.start, w.end}));
        j["proposals"] = props;
        j["iou_top1"] = q.iou_top1;
        j["correct_at_5"] = q.correct_at_5;
        out += j.dump();
        out += '\n';
    }
    return out;
}

}  // namespace clipspot
