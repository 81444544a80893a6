// clipspot - budgeted clip selection and span localization on long sequences.
//
// Subcommands: generate, train-expert, train-student, train-baseline,
// evaluate, ablate, plot, cost.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "clipspot/costmodel.hpp"
#include "clipspot/experiment.hpp"
#include "clipspot/taskgen.hpp"

namespace fs = std::filesystem;
using clipspot::io::json;

namespace {

// Output root: env CLIPSPOT_OUT, else cwd.
fs::path out_root() {
    if (const char* env = std::getenv("CLIPSPOT_OUT")) return fs::path(env);
    return fs::current_path();
}

fs::path resolve_out(const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : out_root() / path;
}

// Load a config file (if any) and apply --set key.path=value overrides.
clipspot::ExperimentConfig build_config(const std::string& config_path,
                                        const std::vector<std::string>& sets) {
    json j = json::object();
    if (!config_path.empty()) {
        j = json::parse(clipspot::io::read_text(config_path), nullptr, false);
        if (j.is_discarded())
            throw std::invalid_argument("config error: malformed JSON " + config_path);
    } else {
        // defaults serialized through the struct so overrides always apply
        clipspot::ExperimentConfig defaults;
        j = defaults.to_json();
    }
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config error: --set expects key=value, got " + kv);
        std::string key = kv.substr(0, eq);
        const std::string raw = kv.substr(eq + 1);
        json value = json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;  // plain string
        json* node = &j;
        std::size_t pos = 0;
        while (true) {
            const auto dot = key.find('.', pos);
            const std::string part = key.substr(pos, dot - pos);
            if (dot == std::string::npos) {
                (*node)[part] = value;
                break;
            }
            node = &(*node)[part];
            pos = dot + 1;
        }
    }
    clipspot::ExperimentConfig cfg = clipspot::ExperimentConfig::from_json(j);
    cfg.finalize();
    return cfg;
}

int run(int argc, char** argv) {
    CLI::App app{"clipspot: budgeted clip selection + span localization benchmark"};
    app.require_subcommand(1);

    std::string config_path, out_path, split = "train", method, axis = "recursion";
    std::string expert_dir, zero_dir, cost_name, dump_path;
    std::vector<std::string> sets, run_dirs;
    int n_instances = 0, selected = -1, total = 128;
    bool no_distill = false, no_semantic = false;
    double cv = -1, cs = -1, cfixed = -1;

    auto add_config_opts = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "experiment config JSON");
        cmd->add_option("--set", sets, "override config fields: key.path=value");
    };

    auto* c_gen = app.add_subcommand("generate", "generate a synthetic dataset to disk");
    add_config_opts(c_gen);
    c_gen->add_option("--out", out_path, "output dataset directory")->required();
    c_gen->add_option("--n", n_instances, "number of instances")->required();
    c_gen->add_option("--split", split, "train|val|test");

    auto* c_exp = app.add_subcommand("train-expert", "train the full-feature localizer");
    add_config_opts(c_exp);
    c_exp->add_option("--out", out_path, "run directory")->required();

    auto* c_stu = app.add_subcommand("train-student", "train the budgeted recursive selector");
    add_config_opts(c_stu);
    c_stu->add_option("--out", out_path, "run directory")->required();
    c_stu->add_option("--expert", expert_dir, "expert run directory (distillation teacher)");
    c_stu->add_flag("--no-distill", no_distill, "train without distillation terms");

    auto* c_bas = app.add_subcommand("train-baseline", "train a baseline selector");
    add_config_opts(c_bas);
    c_bas->add_option("--out", out_path, "run directory")->required();
    c_bas->add_option("--method", method,
                      "zero|random|uniform|topk_oneshot|sequential_gate|all|direct_supervision")
        ->required();
    c_bas->add_option("--zero-run", zero_dir, "zero-clips run (direct_supervision)");

    auto* c_eval = app.add_subcommand("evaluate", "evaluate a saved run on the val split");
    c_eval->add_option("--run", expert_dir, "run directory")->required();
    c_eval->add_option("--cost-preset", cost_name, "internvideo|egovlp|reler");
    c_eval->add_option("--out", out_path, "write metrics JSON here too");

    auto* c_abl = app.add_subcommand("ablate", "run an ablation sweep");
    add_config_opts(c_abl);
    c_abl->add_option("--axis", axis, "recursion|channels")->required();
    c_abl->add_option("--out", out_path, "output directory")->required();

    auto* c_plot = app.add_subcommand("plot", "accuracy-vs-cost figure from saved runs");
    c_plot->add_option("--run", run_dirs, "run directories")->required();
    c_plot->add_option("--out", out_path, "output SVG path")->required();

    auto* c_cost = app.add_subcommand("cost", "analytic compute cost");
    c_cost->add_option("--preset", cost_name, "internvideo|egovlp|reler|custom");
    c_cost->add_option("--cv", cv, "GFLOPs per selected clip (custom)");
    c_cost->add_option("--cs", cs, "GFLOPs per previewed image (custom)");
    c_cost->add_option("--cfixed", cfixed, "fixed GFLOPs per query (custom)");
    c_cost->add_option("--selected", selected, "selected clip count");
    c_cost->add_option("--total", total, "total clip count L");
    c_cost->add_flag("--no-semantic-index", no_semantic, "drop the preview term");
    c_cost->add_option("--dump", dump_path, "per-query dump (jsonl) for a dataset report");

    CLI11_PARSE(app, argc, argv);

    if (c_gen->parsed()) {
        const auto cfg = build_config(config_path, sets);
        const auto ds = clipspot::generate_dataset(cfg.taskgen, n_instances,
                                                   clipspot::split_from_name(split));
        clipspot::write_dataset(ds, resolve_out(out_path));
        std::cout << "wrote " << ds.instances.size() << " instances to "
                  << resolve_out(out_path).string() << "\n";
        return 0;
    }
    if (c_exp->parsed()) {
        const auto cfg = build_config(config_path, sets);
        const auto rec = clipspot::run_train_expert(cfg, resolve_out(out_path));
        std::cout << clipspot::metrics_to_json(rec.val_metrics).dump(2) << "\n";
        return 0;
    }
    if (c_stu->parsed()) {
        const auto cfg = build_config(config_path, sets);
        std::optional<fs::path> expert;
        if (!expert_dir.empty()) expert = fs::path(expert_dir);
        const auto rec =
            clipspot::run_train_student(cfg, expert, !no_distill, resolve_out(out_path));
        std::cout << clipspot::metrics_to_json(rec.val_metrics).dump(2) << "\n";
        return 0;
    }
    if (c_bas->parsed()) {
        auto cfg = build_config(config_path, sets);
        cfg.baseline.method = clipspot::method_from_name(method);
        std::optional<fs::path> zero;
        if (!zero_dir.empty()) zero = fs::path(zero_dir);
        const auto rec = clipspot::run_train_baseline(cfg, zero, resolve_out(out_path));
        std::cout << clipspot::metrics_to_json(rec.val_metrics).dump(2) << "\n";
        return 0;
    }
    if (c_eval->parsed()) {
        const auto report = clipspot::run_evaluate(fs::path(expert_dir), cost_name);
        const std::string text = clipspot::metrics_to_json(report).dump(2);
        std::cout << text << "\n";
        if (!out_path.empty()) clipspot::io::write_text(resolve_out(out_path), text);
        return 0;
    }
    if (c_abl->parsed()) {
        const auto cfg = build_config(config_path, sets);
        const auto rows = clipspot::run_ablate(cfg, axis, resolve_out(out_path));
        for (const auto& r : rows)
            std::cout << r.setting << "  mr1=" << r.metrics.mr_at_1
                      << " mr5=" << r.metrics.mr_at_5 << " eta=" << r.metrics.efficiency_eta
                      << "\n";
        return 0;
    }
    if (c_plot->parsed()) {
        std::vector<clipspot::RunRecord> records;
        for (const auto& d : run_dirs) {
            const json cj = clipspot::io::parse_manifest(fs::path(d) / "config.json", "run");
            const json mj = clipspot::io::parse_manifest(fs::path(d) / "metrics_val.json", "run");
            clipspot::RunRecord rec;
            rec.dir = d;
            rec.method = cj.at("method").get<std::string>();
            rec.distill = cj.value("distill", false);
            rec.val_metrics.mr_at_1 = mj.at("mr1").get<double>();
            rec.val_metrics.mr_at_5 = mj.at("mr5").get<double>();
            rec.val_metrics.efficiency_eta = mj.at("eta").get<double>();
            rec.val_metrics.tflops = mj.at("tflops").get<double>();
            records.push_back(rec);
        }
        clipspot::write_cost_accuracy_svg(records, resolve_out(out_path));
        std::cout << "wrote " << resolve_out(out_path).string() << "\n";
        return 0;
    }
    if (c_cost->parsed()) {
        clipspot::CostTable table;
        if (cost_name.empty() || cost_name == "custom") {
            if (cv < 0 || cs < 0 || cfixed < 0)
                throw std::invalid_argument(
                    "config error: custom cost needs --cv --cs --cfixed");
            table = {cv, cs, cfixed};
        } else {
            table = clipspot::cost_preset(cost_name);
        }
        if (!dump_path.empty()) {
            std::vector<int> counts, totals;
            std::istringstream lines(clipspot::io::read_text(dump_path));
            std::string line;
            while (std::getline(lines, line)) {
                if (line.empty()) continue;
                const json j = json::parse(line);
                const std::string sel = j.at("selection").get<std::string>();
                int c = 0;
                for (char ch : sel) c += ch == '1';
                counts.push_back(c);
                totals.push_back(static_cast<int>(sel.size()));
            }
            const auto rep =
                clipspot::dataset_cost_report(counts, totals, table, !no_semantic);
            std::cout << json{{"mean_tflops", rep.mean_tflops}, {"eta", rep.eta}}.dump(2)
                      << "\n";
            return 0;
        }
        if (selected < 0) throw std::invalid_argument("config error: --selected required");
        const double gflops = clipspot::instance_cost(selected, total, table, !no_semantic);
        std::cout << json{{"gflops", gflops}, {"tflops", gflops / 1000.0}}.dump(2) << "\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const clipspot::TrainingDivergence& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
