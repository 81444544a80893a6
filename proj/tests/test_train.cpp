#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "clipspot/experiment.hpp"

using namespace clipspot;
namespace fs = std::filesystem;

namespace {

// Small but learnable setting so training tests stay in seconds.
ExperimentConfig smoke_config() {
    ExperimentConfig cfg;
    cfg.taskgen.clips = 32;
    cfg.taskgen.d_room = cfg.taskgen.d_inter = cfg.taskgen.d_obj = 4;
    cfg.taskgen.d_expensive = 8;
    cfg.taskgen.event_vocab = 16;
    cfg.taskgen.response_ratio = 0.1;
    cfg.taskgen.seed = 5;
    cfg.model.hidden = 16;
    cfg.model.encoder_layers = 1;
    cfg.model.attention_heads = 4;
    cfg.model.dropout = 0.0;
    cfg.model.query_embed_dim = 8;
    cfg.spotter.steps = 2;
    cfg.optimizer.epochs = 3;
    cfg.optimizer.batch = 16;
    cfg.optimizer.threads = 2;
    cfg.train_instances = 48;
    cfg.val_instances = 16;
    cfg.target_eta = 75.0;
    cfg.scalar = "double";
    cfg.seed = 11;
    cfg.finalize();
    return cfg;
}

}  // namespace

TEST_CASE("expert training reduces the loss and reruns identically") {
    const ExperimentConfig cfg = smoke_config();
    const fs::path dir1 = fs::temp_directory_path() / "clipspot_exp_a";
    const fs::path dir2 = fs::temp_directory_path() / "clipspot_exp_b";
    fs::remove_all(dir1);
    fs::remove_all(dir2);

    const RunRecord r1 = run_train_expert(cfg, dir1);
    const RunRecord r2 = run_train_expert(cfg, dir2);

    CHECK(io::read_text(dir1 / "params.f32") == io::read_text(dir2 / "params.f32"));
    CHECK(io::read_text(dir1 / "metrics_val.json") == io::read_text(dir2 / "metrics_val.json"));
    CHECK(io::read_text(dir1 / "train_log.jsonl") == io::read_text(dir2 / "train_log.jsonl"));

    // loss curve: final below initial
    std::istringstream lines(io::read_text(dir1 / "train_log.jsonl"));
    std::string line, first, last;
    while (std::getline(lines, line))
        if (!line.empty()) {
            if (first.empty()) first = line;
            last = line;
        }
    const double l0 = io::json::parse(first).at("total").get<double>();
    const double l1 = io::json::parse(last).at("total").get<double>();
    CHECK(l1 < l0);

    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("student training: runs, respects architecture parity for distill flag") {
    ExperimentConfig cfg = smoke_config();
    const fs::path expert_dir = fs::temp_directory_path() / "clipspot_exp_t";
    const fs::path stu_dir = fs::temp_directory_path() / "clipspot_stu_t";
    const fs::path stu_nd_dir = fs::temp_directory_path() / "clipspot_stu_nd";
    fs::remove_all(expert_dir);
    fs::remove_all(stu_dir);
    fs::remove_all(stu_nd_dir);

    run_train_expert(cfg, expert_dir);
    const RunRecord with = run_train_student(cfg, expert_dir, true, stu_dir);
    const RunRecord without = run_train_student(cfg, std::nullopt, false, stu_nd_dir);

    const io::json cj1 = io::json::parse(io::read_text(stu_dir / "config.json"));
    const io::json cj2 = io::json::parse(io::read_text(stu_nd_dir / "config.json"));
    CHECK(cj1.at("shape_hash").get<std::uint64_t>() == cj2.at("shape_hash").get<std::uint64_t>());
    CHECK(cj1.at("distill").get<bool>());
    CHECK_FALSE(cj2.at("distill").get<bool>());

    // metrics are within range and the selection dump parses
    CHECK(with.val_metrics.mr_at_1 >= 0.0);
    CHECK(with.val_metrics.mr_at_1 <= with.val_metrics.mr_at_5);
    CHECK(with.val_metrics.efficiency_eta >= 0.0);
    CHECK(with.val_metrics.efficiency_eta <= 100.0);
    std::istringstream dump(io::read_text(stu_dir / "dump_val.jsonl"));
    std::string line;
    int rows = 0;
    while (std::getline(dump, line))
        if (!line.empty()) {
            const io::json j = io::json::parse(line);
            CHECK(j.at("selection").get<std::string>().size() ==
                  static_cast<std::size_t>(cfg.taskgen.clips));
            ++rows;
        }
    CHECK(rows == cfg.val_instances);

    // student reruns bit-identically (determinism, training included)
    const fs::path stu_dir2 = fs::temp_directory_path() / "clipspot_stu_t2";
    fs::remove_all(stu_dir2);
    run_train_student(cfg, expert_dir, true, stu_dir2);
    CHECK(io::read_text(stu_dir / "metrics_val.json") ==
          io::read_text(stu_dir2 / "metrics_val.json"));

    fs::remove_all(expert_dir);
    fs::remove_all(stu_dir);
    fs::remove_all(stu_nd_dir);
    fs::remove_all(stu_dir2);
}

TEST_CASE("evaluate subcommand path reproduces stored metrics") {
    ExperimentConfig cfg = smoke_config();
    const fs::path dir = fs::temp_directory_path() / "clipspot_eval_t";
    fs::remove_all(dir);
    const RunRecord rec = run_train_expert(cfg, dir);
    const MetricsReport again = run_evaluate(dir, "");
    CHECK(again.mr_at_1 == rec.val_metrics.mr_at_1);
    CHECK(again.mr_at_5 == rec.val_metrics.mr_at_5);
    CHECK(again.tflops == rec.val_metrics.tflops);
    fs::remove_all(dir);
}

TEST_CASE("baseline training entry points run for every method") {
    ExperimentConfig cfg = smoke_config();
    cfg.optimizer.epochs = 2;
    const fs::path root = fs::temp_directory_path() / "clipspot_base_t";
    fs::remove_all(root);

    const fs::path zero_dir = root / "zero";
    cfg.baseline.method = BaselineMethod::zero;
    const RunRecord zero = run_train_baseline(cfg, std::nullopt, zero_dir);
    CHECK(zero.val_metrics.efficiency_eta == 100.0);

    cfg.baseline.method = BaselineMethod::random;
    const RunRecord rnd = run_train_baseline(cfg, std::nullopt, root / "random");
    CHECK(rnd.val_metrics.efficiency_eta == Catch::Approx(75.0).margin(2.0));

    cfg.baseline.method = BaselineMethod::uniform;
    run_train_baseline(cfg, std::nullopt, root / "uniform");

    cfg.baseline.method = BaselineMethod::topk_oneshot;
    const RunRecord tk = run_train_baseline(cfg, std::nullopt, root / "topk");
    CHECK(tk.val_metrics.efficiency_eta == Catch::Approx(75.0).margin(2.0));

    cfg.baseline.method = BaselineMethod::sequential_gate;
    run_train_baseline(cfg, std::nullopt, root / "gate");

    cfg.baseline.method = BaselineMethod::direct_supervision;
    cfg.baseline.top_k_responses = 2;
    const RunRecord ds = run_train_baseline(cfg, zero_dir, root / "direct");
    CHECK(ds.val_metrics.efficiency_eta < 100.0);

    cfg.baseline.method = BaselineMethod::all;
    const RunRecord all = run_train_baseline(cfg, std::nullopt, root / "all");
    CHECK(all.val_metrics.efficiency_eta == 0.0);

    fs::remove_all(root);
}

TEST_CASE("divergence raises with the epoch index") {
    ExperimentConfig cfg = smoke_config();
    cfg.optimizer.lr = 1e28;
    cfg.optimizer.clip_norm = 0.0;
    cfg.optimizer.epochs = 30;
    const fs::path dir = fs::temp_directory_path() / "clipspot_div_t";
    fs::remove_all(dir);
    CHECK_THROWS_AS(run_train_expert(cfg, dir), TrainingDivergence);
    fs::remove_all(dir);
}
