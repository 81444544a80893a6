#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "clipspot/costmodel.hpp"

using namespace clipspot;

TEST_CASE("instance_cost reproduces the published calibration points") {
    const CostTable iv = cost_preset("internvideo");

    // 13 of 128 clips with the preview term
    CHECK(instance_cost(13, 128, iv) == Catch::Approx(27482.07).margin(1e-9));

    // full selection without the preview term: c_v * 128 + c_fixed, which is
    // 267.6 TFLOPs at the table's precision
    const double all_gflops = instance_cost(128, 128, iv, false);
    CHECK(all_gflops == Catch::Approx(2090.8 * 128 + 7.27).margin(1e-9));
    CHECK(std::round(all_gflops / 1000.0 * 10.0) / 10.0 == 267.6);

    // zero-selection floor keeps the preview + fixed terms
    CHECK(instance_cost(0, 128, iv) == Catch::Approx(2.3 * 128 + 7.27));

    const CostTable ev = cost_preset("egovlp");
    const double ev_tflops = instance_cost(128, 128, ev, false) / 1000.0;
    CHECK(std::abs(ev_tflops - 23.7) / 23.7 < 0.01);

    const CostTable rl = cost_preset("reler");
    CHECK(rl.c_v == 220.9);
    CHECK(rl.c_fixed == 215.5);

    CHECK_THROWS_AS(cost_preset("nope"), std::invalid_argument);
    CHECK_THROWS_AS(instance_cost(129, 128, iv), std::invalid_argument);
}

TEST_CASE("cost is affine and strictly increasing in the selected count") {
    const CostTable iv = cost_preset("internvideo");
    const double c0 = instance_cost(0, 128, iv);
    const double c1 = instance_cost(1, 128, iv);
    const double step = c1 - c0;
    CHECK(step == Catch::Approx(iv.c_v));
    for (int k = 2; k <= 128; k += 7)
        CHECK(instance_cost(k, 128, iv) == Catch::Approx(c0 + k * step));
    // halving the mean selection halves the per-clip term exactly
    const double full = instance_cost(100, 128, iv) - c0;
    const double half = instance_cost(50, 128, iv) - c0;
    CHECK(full == Catch::Approx(2.0 * half));
}

TEST_CASE("dataset_cost_report aggregates per-query costs and efficiency") {
    const CostTable iv = cost_preset("internvideo");
    const auto zero = dataset_cost_report({0, 0}, {128, 128}, iv);
    CHECK(zero.eta == 100.0);
    CHECK(zero.mean_tflops == Catch::Approx(instance_cost(0, 128, iv) / 1000.0));

    const auto all = dataset_cost_report({128, 128}, {128, 128}, iv, false);
    CHECK(all.eta == 0.0);
    CHECK(std::round(all.mean_tflops * 10.0) / 10.0 == 267.6);

    const auto mixed = dataset_cost_report({13, 13}, {128, 128}, iv);
    CHECK(mixed.eta == Catch::Approx(89.84375));
    CHECK(mixed.mean_tflops == Catch::Approx(27.48207));
}
