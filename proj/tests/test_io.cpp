#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "clipspot/experiment.hpp"

using namespace clipspot;
namespace fs = std::filesystem;

TEST_CASE("experiment config: budget and sampling derive from the efficiency target") {
    ExperimentConfig cfg;
    cfg.target_eta = 90.0;
    cfg.finalize();
    CHECK(cfg.spotter.budget == Catch::Approx(0.1));
    CHECK(cfg.baseline.sample_fraction == Catch::Approx(10.0));
    cfg.target_eta = 75.0;
    cfg.finalize();
    CHECK(cfg.spotter.budget == Catch::Approx(0.25));

    cfg.target_eta = 120.0;
    CHECK_THROWS_AS(cfg.finalize(), std::invalid_argument);
}

TEST_CASE("experiment config round-trips through JSON") {
    ExperimentConfig cfg;
    cfg.taskgen.seed = 17;
    cfg.model.hidden = 64;
    cfg.spotter.steps = 8;
    cfg.weights.lambda_sel = 1000.0;
    cfg.optimizer.epochs = 7;
    cfg.target_eta = 75.0;
    cfg.seed = 5;
    cfg.scalar = "double";
    cfg.finalize();
    const ExperimentConfig back = ExperimentConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
}

TEST_CASE("partial config files keep defaults for absent sections") {
    const fs::path p = fs::temp_directory_path() / "clipspot_cfg.json";
    io::write_text(p, R"({"target_eta": 50.0, "optimizer": {"name":"adamw","lr":0.01,
        "batch":8,"epochs":2,"schedule":"linear_warmup","warmup_frac":0.1,
        "weight_decay":0.0,"clip_norm":10.0,"threads":1}})");
    const ExperimentConfig cfg = load_config(p);
    CHECK(cfg.target_eta == 50.0);
    CHECK(cfg.optimizer.lr == 0.01);
    CHECK(cfg.taskgen.clips == 128);   // default untouched
    CHECK(cfg.model.hidden == 128);    // default untouched
    CHECK(cfg.spotter.budget == Catch::Approx(0.5));
    fs::remove(p);

    io::write_text(p, "{broken");
    CHECK_THROWS_AS(load_config(p), std::invalid_argument);
    fs::remove(p);
}

TEST_CASE("metrics JSON carries the fixed keys") {
    MetricsReport r;
    r.mr_at_1 = 0.25;
    r.mr_at_5 = 0.5;
    r.efficiency_eta = 90.0;
    r.tflops = 27.5;
    r.mean_iou_selected_vs_gt = 0.1;
    r.mean_nonzero_intersection = 55.0;
    r.correct = {0.2, 80.0, 10};
    r.wrong = {0.05, 30.0, 20};
    const io::json j = metrics_to_json(r);
    CHECK(j.at("mr1") == 0.25);
    CHECK(j.at("mr5") == 0.5);
    CHECK(j.at("eta") == 90.0);
    CHECK(j.at("tflops") == 27.5);
    CHECK(j.at("behavior").at("correct").at("mean_iou") == 0.2);
    CHECK(j.at("behavior").at("correct").at("nonzero_pct") == 80.0);
    CHECK(j.at("behavior").at("correct").at("n") == 10);
    CHECK(j.at("behavior").at("wrong").at("n") == 20);
}

TEST_CASE("cost-accuracy figure: one series per method, nonempty file") {
    std::vector<RunRecord> records;
    const auto mk = [&](const std::string& method, double tflops, double mr1) {
        RunRecord r;
        r.method = method;
        r.distill = true;
        r.val_metrics.tflops = tflops;
        r.val_metrics.mr_at_1 = mr1;
        records.push_back(r);
    };
    mk("zero", 0.3, 0.1);
    mk("random", 27.0, 0.2);
    mk("recursive", 27.5, 0.45);
    mk("recursive", 65.0, 0.5);
    mk("all", 267.6, 0.55);

    const fs::path p = fs::temp_directory_path() / "clipspot_plot.svg";
    fs::remove(p);
    write_cost_accuracy_svg(records, p);
    const std::string svg = io::read_text(p);
    CHECK(svg.size() > 200);
    // four distinct method labels -> four legend entries
    CHECK(std::count(svg.begin(), svg.end(), '\n') > 10);
    std::size_t series = 0, pos = 0;
    while ((pos = svg.find("<text", pos)) != std::string::npos) {
        ++series;
        pos += 5;
    }
    CHECK(series == 2 + 4);  // two axis labels + four legend entries
    fs::remove(p);
}
