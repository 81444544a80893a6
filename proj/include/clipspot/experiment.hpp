#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "clipspot/eval.hpp"
#include "clipspot/train.hpp"

namespace clipspot {

inline io::json taskgen_to_json(const TaskGenConfig& c) {
    io::json j;
    j["L"] = c.clips;
    j["D_r"] = c.d_room;
    j["D_i"] = c.d_inter;
    j["D_o"] = c.d_obj;
    j["D_v"] = c.d_expensive;
    j["T"] = c.query_len;
    j["event_vocab"] = c.event_vocab;
    j["rooms"] = c.rooms;
    j["interactions"] = c.interactions;
    j["objects"] = c.objects;
    j["response_ratio"] = c.response_ratio;
    j["cheap_noise"] = c.cheap_noise;
    j["expensive_noise"] = c.expensive_noise;
    j["distractor_rate"] = c.distractor_rate;
    j["seed"] = c.seed;
    return j;
}

inline TaskGenConfig taskgen_from_json(const io::json& j) {
    TaskGenConfig c;
    c.clips = j.at("L").get<int>();
    c.d_room = j.at("D_r").get<int>();
    c.d_inter = j.at("D_i").get<int>();
    c.d_obj = j.at("D_o").get<int>();
    c.d_expensive = j.at("D_v").get<int>();
    c.query_len = j.at("T").get<int>();
    c.event_vocab = j.at("event_vocab").get<int>();
    c.rooms = j.at("rooms").get<int>();
    c.interactions = j.at("interactions").get<int>();
    c.objects = j.at("objects").get<int>();
    c.response_ratio = j.at("response_ratio").get<double>();
    c.cheap_noise = j.at("cheap_noise").get<double>();
    c.expensive_noise = j.at("expensive_noise").get<double>();
    c.distractor_rate = j.at("distractor_rate").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

// Experiment-wide configuration. The selection budget is derived from the
// target efficiency level: gamma = 1 - eta / 100.
struct ExperimentConfig {
    TaskGenConfig taskgen;
    ModelConfig model;
    SpotterConfig spotter;
    LossWeights weights;
    OptimizerConfig optimizer;
    BaselineConfig baseline;
    double target_eta = 90.0;
    std::uint64_t seed = 0;
    int train_instances = 2000;
    int val_instances = 500;
    std::string cost_preset = "internvideo";
    std::string scalar = "float";  // training precision: float | double
    int ablate_channel = -1;       // >= 0 zeroes one cheap channel (train + eval)

    double gamma() const { return 1.0 - target_eta / 100.0; }
    double sample_percent() const { return 100.0 - target_eta; }

    void finalize() {
        if (target_eta < 0.0 || target_eta >= 100.0)
            throw std::invalid_argument("config error: target_eta must be in [0, 100)");
        spotter.budget = gamma();
        baseline.sample_fraction = sample_percent();
        model.vocab = taskgen.vocab_size();
        model.d_cheap = taskgen.d_cheap();
        model.d_expensive = taskgen.d_expensive;
        taskgen.validate();
        model.validate();
        spotter.validate();
        baseline.validate();
        if (scalar != "float" && scalar != "double")
            throw std::invalid_argument("config error: scalar must be float or double");
    }

    io::json to_json() const {
        io::json j;
        j["taskgen"] = taskgen_to_json(taskgen);
        j["model"] = model.to_json();
        j["spotter"] = spotter.to_json();
        j["weights"] = weights.to_json();
        j["optimizer"] = optimizer.to_json();
        j["baseline"] = io::json{{"method", method_name(baseline.method)},
                                 {"sample_fraction", baseline.sample_fraction},
                                 {"top_k_responses", baseline.top_k_responses}};
        j["target_eta"] = target_eta;
        j["seed"] = seed;
        j["train_instances"] = train_instances;
        j["val_instances"] = val_instances;
        j["cost_preset"] = cost_preset;
        j["scalar"] = scalar;
        j["ablate_channel"] = ablate_channel;
        return j;
    }

    static ExperimentConfig from_json(const io::json& j) {
        ExperimentConfig c;
        if (j.contains("taskgen")) c.taskgen = taskgen_from_json(j.at("taskgen"));
        if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
        if (j.contains("spotter")) c.spotter = SpotterConfig::from_json(j.at("spotter"));
        if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
        if (j.contains("optimizer")) c.optimizer = OptimizerConfig::from_json(j.at("optimizer"));
        if (j.contains("baseline")) {
            const auto& b = j.at("baseline");
            c.baseline.method = method_from_name(b.at("method").get<std::string>());
            if (b.contains("sample_fraction"))
                c.baseline.sample_fraction = b.at("sample_fraction").get<double>();
            if (b.contains("top_k_responses"))
                c.baseline.top_k_responses = b.at("top_k_responses").get<int>();
        }
        if (j.contains("target_eta")) c.target_eta = j.at("target_eta").get<double>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("train_instances")) c.train_instances = j.at("train_instances").get<int>();
        if (j.contains("val_instances")) c.val_instances = j.at("val_instances").get<int>();
        if (j.contains("cost_preset")) c.cost_preset = j.at("cost_preset").get<std::string>();
        if (j.contains("scalar")) c.scalar = j.at("scalar").get<std::string>();
        if (j.contains("ablate_channel")) c.ablate_channel = j.at("ablate_channel").get<int>();
        return c;
    }
};

// Partial-config loading: sections absent from the file keep their defaults.
inline ExperimentConfig load_config(const std::filesystem::path& path) {
    io::json j = io::json::parse(io::read_text(path), nullptr, false);
    if (j.is_discarded()) throw std::invalid_argument("config error: malformed JSON " + path.string());
    ExperimentConfig c = ExperimentConfig::from_json(j);
    c.finalize();
    return c;
}

struct DatasetPair {
    SyntheticDataset train;
    SyntheticDataset val;
};

inline DatasetPair make_datasets(const ExperimentConfig& cfg) {
    DatasetPair d;
    d.train = generate_dataset(cfg.taskgen, cfg.train_instances, Split::train);
    d.val = generate_dataset(cfg.taskgen, cfg.val_instances, Split::val);
    if (cfg.ablate_channel >= 0) {
        d.train = zero_channel(std::move(d.train), cfg.ablate_channel);
        d.val = zero_channel(std::move(d.val), cfg.ablate_channel);
    }
    return d;
}

// ---- run records ---------------------------------------------------------------------

struct RunRecord {
    std::filesystem::path dir;
    std::string method;
    bool distill = false;
    MetricsReport val_metrics;
};

namespace run_detail {

template <class S>
ModelBundle<S> build_bundle(ParamStore<S>& store, const ExperimentConfig& cfg, bool with_policy,
                            bool with_topk, bool with_gate) {
    ModelBundle<S> mb;
    mb.store = &store;
    mb.mcfg = cfg.model;
    Rng init_rng(derive_seed(cfg.seed, "init"));
    mb.em = build_em_params(store, cfg.model, init_rng, with_policy);
    if (with_topk) mb.topk = build_topk_scorer(store, cfg.model, init_rng);
    if (with_gate) mb.gate = build_gate(store, cfg.model, cfg.model.hidden, init_rng);
    return mb;
}

inline void write_train_log(const std::filesystem::path& dir,
                            const std::vector<EpochLog>& logs) {
    std::string out;
    for (const auto& l : logs) {
        out += l.to_json().dump();
        out += '\n';
    }
    io::write_text(dir / "train_log.jsonl", out);
}

template <class S>
RunRecord finish_run(const ExperimentConfig& cfg, const std::string& method, bool distill,
                     ModelBundle<S>& mb, const EvalSpec<S>& spec, const DatasetPair& data,
                     const std::filesystem::path& dir, const std::vector<EpochLog>& logs) {
    write_checkpoint(*mb.store, cfg.model.to_json(), dir);
    // evaluate through the on-disk weights so `evaluate` reproduces these numbers
    read_checkpoint(*mb.store, dir);

    const PreparedData<S> val = PreparedData<S>::from(data.val);
    const CostTable cost = cost_preset(cfg.cost_preset);
    const bool include_semantic = method != "all";
    EvalOutcome out = evaluate_model(mb, spec, val, cost, include_semantic,
                                     cfg.optimizer.threads);

    io::json cj = cfg.to_json();
    cj["method"] = method;
    cj["distill"] = distill;
    cj["shape_hash"] = mb.store->shape_hash();
    io::write_text(dir / "config.json", cj.dump(2));
    io::write_text(dir / "metrics_val.json", metrics_to_json(out.report).dump(2));
    io::write_text(dir / "dump_val.jsonl", dump_per_query_jsonl(out.per_query));
    write_train_log(dir, logs);

    RunRecord rec;
    rec.dir = dir;
    rec.method = method;
    rec.distill = distill;
    rec.val_metrics = out.report;
    return rec;
}

}  // namespace run_detail

// ---- training entry points --------------------------------------------------------------

template <class S>
RunRecord run_train_expert_impl(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
    const DatasetPair data = make_datasets(cfg);
    ParamStore<S> store;
    ModelBundle<S> mb = run_detail::build_bundle(store, cfg, false, false, false);

    TrainSetup<S> setup;
    setup.store = &store;
    setup.em = mb.em;
    setup.mcfg = cfg.model;
    setup.scfg = cfg.spotter;
    setup.weights = cfg.weights;
    setup.opt = cfg.optimizer;
    setup.method = TrainMethod::expert;
    setup.seed = cfg.seed;

    const PreparedData<S> train = PreparedData<S>::from(data.train);
    const auto logs = train_model(setup, train);

    EvalSpec<S> spec;
    spec.method = TrainMethod::expert;
    return run_detail::finish_run(cfg, "all", false, mb, spec, data, dir, logs);
}

template <class S>
RunRecord run_train_student_impl(const ExperimentConfig& cfg,
                                 const std::optional<std::filesystem::path>& expert_dir,
                                 bool distill, const std::filesystem::path& dir) {
    if (distill && !expert_dir)
        throw std::invalid_argument("config error: distillation requires an expert run");
    const DatasetPair data = make_datasets(cfg);
    const PreparedData<S> train = PreparedData<S>::from(data.train);

    ExpertCache<S> cache;
    ParamStore<S> expert_store;
    if (distill) {
        ExperimentConfig ecfg = cfg;
        ModelBundle<S> emb = run_detail::build_bundle(expert_store, ecfg, false, false, false);
        read_checkpoint(expert_store, *expert_dir);
        cache = build_expert_cache(expert_store, emb.em, ecfg.model, train,
                                   cfg.optimizer.threads);
    }

    ParamStore<S> store;
    ModelBundle<S> mb = run_detail::build_bundle(store, cfg, true, false, false);

    TrainSetup<S> setup;
    setup.store = &store;
    setup.em = mb.em;
    setup.mcfg = cfg.model;
    setup.scfg = cfg.spotter;
    setup.weights = cfg.weights;
    setup.opt = cfg.optimizer;
    setup.method = TrainMethod::recursive;
    setup.seed = cfg.seed;
    setup.distill = distill;
    setup.expert_cache = distill ? &cache : nullptr;

    const auto logs = train_model(setup, train);

    EvalSpec<S> spec;
    spec.method = TrainMethod::recursive;
    spec.scfg = cfg.spotter;
    return run_detail::finish_run(cfg, "recursive", distill, mb, spec, data, dir, logs);
}

template <class S>
RunRecord run_train_baseline_impl(const ExperimentConfig& cfg,
                                  const std::optional<std::filesystem::path>& zero_dir,
                                  const std::filesystem::path& dir) {
    const BaselineMethod method = cfg.baseline.method;
    const DatasetPair data = make_datasets(cfg);
    const PreparedData<S> train = PreparedData<S>::from(data.train);

    // direct supervision derives masks from a trained zero-clips localizer
    std::vector<SelectionMask> train_masks, val_masks;
    if (method == BaselineMethod::direct_supervision) {
        if (!zero_dir)
            throw std::invalid_argument("config error: direct_supervision requires a zero run");
        ParamStore<S> zstore;
        ModelBundle<S> zmb = run_detail::build_bundle(zstore, cfg, false, false, false);
        read_checkpoint(zstore, *zero_dir);
        const PreparedData<S> val = PreparedData<S>::from(data.val);
        EvalSpec<S> zspec;
        zspec.method = TrainMethod::zero;
        const CostTable cost = cost_preset(cfg.cost_preset);
        for (auto* pd : {&train, &val}) {
            EvalOutcome out = evaluate_model(zmb, zspec, *pd, cost, true,
                                             cfg.optimizer.threads, cfg.baseline.top_k_responses);
            auto& masks = pd == &train ? train_masks : val_masks;
            for (const auto& q : out.per_query)
                masks.push_back(
                    mask_from_spans(q.proposals, pd->clips, cfg.baseline.top_k_responses));
        }
    }

    const bool with_topk = method == BaselineMethod::topk_oneshot;
    const bool with_gate = method == BaselineMethod::sequential_gate;
    ParamStore<S> store;
    ModelBundle<S> mb = run_detail::build_bundle(store, cfg, false, with_topk, with_gate);

    TrainSetup<S> setup;
    setup.store = &store;
    setup.em = mb.em;
    setup.topk = mb.topk;
    setup.gate = mb.gate;
    setup.mcfg = cfg.model;
    setup.scfg = cfg.spotter;
    setup.weights = cfg.weights;
    setup.opt = cfg.optimizer;
    setup.seed = cfg.seed;
    setup.sample_fraction = cfg.baseline.sample_fraction;
    switch (method) {
        case BaselineMethod::zero: setup.method = TrainMethod::zero; break;
        case BaselineMethod::all: setup.method = TrainMethod::expert; break;
        case BaselineMethod::random: setup.method = TrainMethod::random; break;
        case BaselineMethod::uniform: setup.method = TrainMethod::uniform; break;
        case BaselineMethod::topk_oneshot: setup.method = TrainMethod::topk; break;
        case BaselineMethod::sequential_gate: setup.method = TrainMethod::gate; break;
        case BaselineMethod::direct_supervision:
            setup.method = TrainMethod::fixed_mask;
            setup.fixed_masks = &train_masks;
            break;
    }

    const auto logs = train_model(setup, train);

    EvalSpec<S> spec;
    spec.method = setup.method;
    spec.sample_fraction = cfg.baseline.sample_fraction;
    spec.scfg = cfg.spotter;
    spec.seed = cfg.seed;
    if (method == BaselineMethod::direct_supervision) spec.fixed_masks = &val_masks;
    return run_detail::finish_run(cfg, method_name(method), false, mb, spec, data, dir, logs);
}

// Re-evaluates a saved run on a freshly generated validation split.
template <class S>
MetricsReport run_evaluate_impl(const std::filesystem::path& record_dir,
                                const std::string& cost_preset_name) {
    const io::json cj = io::parse_manifest(record_dir / "config.json", "run config");
    ExperimentConfig cfg = ExperimentConfig::from_json(cj);
    cfg.finalize();
    const std::string method = cj.at("method").get<std::string>();

    const bool with_topk = method == "topk_oneshot";
    const bool with_gate = method == "sequential_gate";
    const bool with_policy = method == "recursive";
    ParamStore<S> store;
    ModelBundle<S> mb = run_detail::build_bundle(store, cfg, with_policy, with_topk, with_gate);
    read_checkpoint(store, record_dir);

    const DatasetPair data = make_datasets(cfg);
    const PreparedData<S> val = PreparedData<S>::from(data.val);

    EvalSpec<S> spec;
    spec.sample_fraction = cfg.baseline.sample_fraction;
    spec.scfg = cfg.spotter;
    spec.seed = cfg.seed;
    std::vector<SelectionMask> val_masks;
    if (method == "all") spec.method = TrainMethod::expert;
    else if (method == "zero") spec.method = TrainMethod::zero;
    else if (method == "random") spec.method = TrainMethod::random;
    else if (method == "uniform") spec.method = TrainMethod::uniform;
    else if (method == "topk_oneshot") spec.method = TrainMethod::topk;
    else if (method == "sequential_gate") spec.method = TrainMethod::gate;
    else if (method == "recursive") spec.method = TrainMethod::recursive;
    else throw std::invalid_argument("evaluate: unsupported stored method " + method);

    const CostTable cost =
        cost_preset_name.empty() ? cost_preset(cfg.cost_preset) : cost_preset(cost_preset_name);
    EvalOutcome out =
        evaluate_model(mb, spec, val, cost, method != "all", cfg.optimizer.threads);
    return out.report;
}

// ---- scalar dispatch ----------------------------------------------------------------------

template <class Fn>
auto with_scalar(const std::string& scalar, Fn&& fn) {
    if (scalar == "double") return fn(double{});
    return fn(float{});
}

inline RunRecord run_train_expert(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
    return with_scalar(cfg.scalar, [&](auto s) {
        return run_train_expert_impl<decltype(s)>(cfg, dir);
    });
}

inline RunRecord run_train_student(const ExperimentConfig& cfg,
                                   const std::optional<std::filesystem::path>& expert_dir,
                                   bool distill, const std::filesystem::path& dir) {
    return with_scalar(cfg.scalar, [&](auto s) {
        return run_train_student_impl<decltype(s)>(cfg, expert_dir, distill, dir);
    });
}

inline RunRecord run_train_baseline(const ExperimentConfig& cfg,
                                    const std::optional<std::filesystem::path>& zero_dir,
                                    const std::filesystem::path& dir) {
    return with_scalar(cfg.scalar, [&](auto s) {
        return run_train_baseline_impl<decltype(s)>(cfg, zero_dir, dir);
    });
}

inline MetricsReport run_evaluate(const std::filesystem::path& record_dir,
                                  const std::string& cost_preset_name) {
    const io::json cj = io::parse_manifest(record_dir / "config.json", "run config");
    const std::string scalar =
        cj.contains("scalar") ? cj.at("scalar").get<std::string>() : "float";
    return with_scalar(scalar, [&](auto s) {
        return run_evaluate_impl<decltype(s)>(record_dir, cost_preset_name);
    });
}

// ---- ablations ------------------------------------------------------------------------------

struct AblationRow {
    std::string setting;
    MetricsReport metrics;
};

inline std::vector<AblationRow> run_ablate(const ExperimentConfig& base, const std::string& axis,
                                           const std::filesystem::path& out_root) {
    std::vector<AblationRow> rows;
    if (axis == "recursion") {
        for (int n : {1, 2, 4, 8}) {
            ExperimentConfig cfg = base;
            cfg.spotter.steps = n;
            cfg.finalize();
            RunRecord rec = run_train_student(cfg, std::nullopt, false,
                                              out_root / ("recursion_N" + std::to_string(n)));
            rows.push_back({"N=" + std::to_string(n), rec.val_metrics});
        }
    } else if (axis == "channels") {
        const char* names[4] = {"full", "no_room", "no_interaction", "no_object"};
        for (int v = -1; v < 3; ++v) {
            ExperimentConfig cfg = base;
            cfg.ablate_channel = v;
            cfg.finalize();
            RunRecord rec =
                run_train_student(cfg, std::nullopt, false, out_root / names[v + 1]);
            rows.push_back({names[v + 1], rec.val_metrics});
        }
    } else {
        throw std::invalid_argument("config error: ablation axis must be recursion or channels");
    }

    io::json report = io::json::array();
    for (const auto& r : rows)
        report.push_back(io::json{{"setting", r.setting}, {"metrics", metrics_to_json(r.metrics)}});
    std::filesystem::create_directories(out_root);
    io::write_text(out_root / "ablation.json", report.dump(2));
    return rows;
}

// ---- accuracy-vs-cost figure ------------------------------------------------------------------

// Minimal SVG scatter: one series per method, recall@1 against mean TFLOPs.
inline void write_cost_accuracy_svg(const std::vector<RunRecord>& records,
                                    const std::filesystem::path& path) {
    if (records.empty()) throw std::invalid_argument("plot: no records");
    const double W = 640, H = 480, ML = 70, MR = 30, MT = 40, MB = 60;
    double xmax = 0, ymax = 0;
    for (const auto& r : records) {
        xmax = std::max(xmax, r.val_metrics.tflops);
        ymax = std::max(ymax, r.val_metrics.mr_at_1);
    }
    xmax = xmax <= 0 ? 1 : xmax * 1.1;
    ymax = ymax <= 0 ? 1 : ymax * 1.15;
    const auto px = [&](double x) { return ML + (W - ML - MR) * x / xmax; };
    const auto py = [&](double y) { return H - MB - (H - MT - MB) * y / ymax; };

    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
    std::string svg = "<svg xmlns='http://www.w3.org/2000/svg' width='" + std::to_string((int)W) +
                      "' height='" + std::to_string((int)H) + "'>\n";
    svg += "<rect width='100%' height='100%' fill='white'/>\n";
    svg += "<line x1='" + std::to_string(ML) + "' y1='" + std::to_string(H - MB) + "' x2='" +
           std::to_string(W - MR) + "' y2='" + std::to_string(H - MB) + "' stroke='black'/>\n";
    svg += "<line x1='" + std::to_string(ML) + "' y1='" + std::to_string(MT) + "' x2='" +
           std::to_string(ML) + "' y2='" + std::to_string(H - MB) + "' stroke='black'/>\n";
    svg += "<text x='" + std::to_string(W / 2) + "' y='" + std::to_string(H - 15) +
           "' text-anchor='middle' font-size='14'>mean TFLOPs per query</text>\n";
    svg += "<text x='18' y='" + std::to_string(H / 2) +
           "' text-anchor='middle' font-size='14' transform='rotate(-90 18 " +
           std::to_string(H / 2) + ")'>recall@1 (IoU-averaged)</text>\n";

    // group records by method label
    std::vector<std::string> methods;
    for (const auto& r : records) {
        const std::string label = r.method + (r.distill ? "" : (r.method == "recursive" ? " (no distill)" : ""));
        if (std::find(methods.begin(), methods.end(), label) == methods.end())
            methods.push_back(label);
    }
    int mi = 0;
    for (const auto& label : methods) {
        const char* color = palette[mi % 8];
        std::vector<std::pair<double, double>> pts;
        for (const auto& r : records) {
            const std::string rl =
                r.method + (r.distill ? "" : (r.method == "recursive" ? " (no distill)" : ""));
            if (rl == label)
                pts.push_back({r.val_metrics.tflops, r.val_metrics.mr_at_1});
        }
        std::sort(pts.begin(), pts.end());
        std::string poly;
        for (const auto& [x, y] : pts) {
            poly += std::to_string(px(x)) + "," + std::to_string(py(y)) + " ";
            svg += "<circle cx='" + std::to_string(px(x)) + "' cy='" + std::to_string(py(y)) +
                   "' r='4' fill='" + color + "'/>\n";
        }
        if (pts.size() > 1)
            svg += "<polyline points='" + poly + "' fill='none' stroke='" + color +
                   "' stroke-width='1.5'/>\n";
        svg += "<text x='" + std::to_string(W - MR - 160) + "' y='" +
               std::to_string(MT + 16 * (mi + 1)) + "' font-size='12' fill='" + color + "'>" +
               label + "</text>\n";
        ++mi;
    }
    svg += "</svg>\n";
    io::write_text(path, svg);
}

}  // namespace clipspot
