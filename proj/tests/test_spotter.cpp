#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "clipspot/baselines.hpp"
#include "clipspot/spotter.hpp"
#include "oracles.hpp"

using namespace clipspot;
namespace a = clipspot::ad;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.hidden = 16;
    c.encoder_layers = 1;
    c.attention_heads = 4;
    c.dropout = 0.0;
    c.query_embed_dim = 8;
    c.vocab = 12;
    c.d_cheap = 6;
    c.d_expensive = 10;
    return c;
}

struct TinyPolicyModel {
    ParamStore<double> store;
    EmParamHandles h;
    ModelConfig cfg;

    explicit TinyPolicyModel(std::uint64_t seed = 3) : cfg(tiny_config()) {
        Rng rng(seed);
        h = build_em_params(store, cfg, rng, true);
    }
};

}  // namespace

TEST_CASE("gumbel_binary_sample: eval thresholding and symmetric noise") {
    Rng rng(1);
    const BinarySample e = gumbel_binary_sample(0.9, 1.0, false, rng, 0.5);
    CHECK(e.hard == 1);
    CHECK(e.relaxed == 0.9);
    const BinarySample e2 = gumbel_binary_sample(0.49, 1.0, false, rng, 0.5);
    CHECK(e2.hard == 0);

    // equal noise on both classes with pi = 0.5 gives a perfectly split sample
    const BinarySample s = gumbel_binary_sample_with_noise(0.5, 1.0, 0.37, 0.37);
    CHECK(s.relaxed == Catch::Approx(0.5));

    CHECK_THROWS_WITH(gumbel_binary_sample(0.5, 0.0, true, rng),
                      Catch::Matchers::ContainsSubstring("temperature"));
    CHECK_THROWS_AS(gumbel_binary_sample(0.5, -1.0, true, rng), std::invalid_argument);
}

TEST_CASE("gumbel_binary_sample: hard marginal matches the probability") {
    Rng rng(1234);
    for (double pi : {0.2, 0.5, 0.8}) {
        int hits = 0;
        const int n = 100000;
        for (int i = 0; i < n; ++i) hits += gumbel_binary_sample(pi, 1.0, true, rng).hard;
        const double freq = static_cast<double>(hits) / n;
        CHECK(std::abs(freq - pi) < 0.01);
    }
}

TEST_CASE("gumbel relaxed sample is consistent with hard argmax") {
    Rng rng(55);
    for (int i = 0; i < 2000; ++i) {
        const double pi = rng.uniform_pos();
        const BinarySample s =
            gumbel_binary_sample_with_noise(pi, 0.7, rng.gumbel(), rng.gumbel());
        CHECK(s.hard == (s.relaxed > 0.5 ? 1 : 0));
        CHECK(s.relaxed > 0.0);
        CHECK(s.relaxed < 1.0);
    }
}

TEST_CASE("select_step: full exclusion returns an all-zero mask") {
    TinyPolicyModel m;
    a::Tape<double> t;
    BoundParams<double> b = bind(t, m.store, false);
    Forward<double> f{t, b, m.h, m.cfg, false, nullptr};
    Rng rng(2);
    const int L = 8;
    a::Var<double> c = a::constant(t, gaussian_mat<double>(L, m.cfg.hidden, 1.0, rng));
    SelectionMask prev = select_all(L);
    SpotterConfig cfg;
    cfg.budget = 0.5;
    StepSelection<double> s = select_step(f, c, prev, cfg, RunMode::eval, nullptr);
    CHECK(s.mask.count() == 0);
    for (double p : s.probs) CHECK(p == 0.0);
}

TEST_CASE("select_step: zeroed policy weights select everything at threshold 0.5") {
    TinyPolicyModel m;
    m.store.entry(m.h.policy.h1.w).value.setZero();
    m.store.entry(m.h.policy.h1.b).value.setZero();
    m.store.entry(m.h.policy.h2.w).value.setZero();
    m.store.entry(m.h.policy.h2.b).value.setZero();
    a::Tape<double> t;
    BoundParams<double> b = bind(t, m.store, false);
    Forward<double> f{t, b, m.h, m.cfg, false, nullptr};
    Rng rng(3);
    const int L = 8;
    a::Var<double> c = a::constant(t, gaussian_mat<double>(L, m.cfg.hidden, 1.0, rng));
    SelectionMask prev = select_zero(L);
    SpotterConfig cfg;
    cfg.budget = 0.5;
    StepSelection<double> s = select_step(f, c, prev, cfg, RunMode::eval, nullptr);
    CHECK(s.mask.count() == L);  // pi = 0.5 everywhere, >= threshold rule
    for (double p : s.probs) CHECK(p == Catch::Approx(0.5));
}

TEST_CASE("select_step: train mask is binary and disjoint from the exclusion set") {
    TinyPolicyModel m;
    a::Tape<double> t;
    BoundParams<double> b = bind(t, m.store, true);
    Forward<double> f{t, b, m.h, m.cfg, true, nullptr};
    Rng rng(4);
    const int L = 12;
    a::Var<double> c = a::constant(t, gaussian_mat<double>(L, m.cfg.hidden, 1.0, rng));
    SelectionMask prev = select_zero(L);
    prev.bits[1] = prev.bits[5] = prev.bits[9] = 1;
    SpotterConfig cfg;
    cfg.budget = 0.5;
    StepSelection<double> s = select_step(f, c, prev, cfg, RunMode::train_st, &rng);
    for (int l = 0; l < L; ++l) {
        CHECK((s.mask.bits[l] == 0 || s.mask.bits[l] == 1));
        if (prev.bits[l]) {
            CHECK(s.mask.bits[l] == 0);
            CHECK(s.gate.val()(l, 0) == 0.0);
        }
    }
}

TEST_CASE("run_recursive: step masks are disjoint and the joint mask is their OR") {
    TinyPolicyModel m;
    const int L = 16;
    Rng data_rng(5);
    MatD cheap = gaussian_mat<double>(L, m.cfg.d_cheap, 1.0, data_rng);
    MatD expensive = gaussian_mat<double>(L, m.cfg.d_expensive, 1.0, data_rng);

    for (RunMode mode : {RunMode::eval, RunMode::train_st}) {
        a::Tape<double> t;
        BoundParams<double> b = bind(t, m.store, mode != RunMode::eval);
        Rng rng(6);
        Forward<double> f{t, b, m.h, m.cfg, mode != RunMode::eval, &rng};
        SpotterConfig cfg;
        cfg.steps = 3;
        cfg.budget = 0.5;
        RecursiveResult<double> r = run_recursive(f, cheap, expensive,
                                                  encode_query(f, {0, 1, 2, 3}), cfg, mode,
                                                  &rng);
        REQUIRE(r.trace.per_step.size() == 3);
        SelectionMask acc = select_zero(L);
        int total = 0;
        for (const auto& step : r.trace.per_step) {
            for (int l = 0; l < L; ++l) {
                if (step.bits[l]) {
                    CHECK(acc.bits[l] == 0);  // pairwise disjoint
                }
            }
            acc = mask_or(acc, step);
            total += step.count();
        }
        CHECK(acc == r.trace.joint);
        CHECK(total == r.trace.joint.count());
    }
}

TEST_CASE("run_recursive: N=1 runs exactly one round; eval rows zero off-mask") {
    TinyPolicyModel m;
    const int L = 10;
    Rng data_rng(7);
    MatD cheap = gaussian_mat<double>(L, m.cfg.d_cheap, 1.0, data_rng);
    MatD expensive = gaussian_mat<double>(L, m.cfg.d_expensive, 1.0, data_rng);

    a::Tape<double> t;
    BoundParams<double> b = bind(t, m.store, false);
    Forward<double> f{t, b, m.h, m.cfg, false, nullptr};
    SpotterConfig cfg;
    cfg.steps = 1;
    cfg.budget = 0.5;
    RecursiveResult<double> r = run_recursive(f, cheap, expensive,
                                              encode_query(f, {0, 1, 2, 3}), cfg,
                                              RunMode::eval, nullptr);
    CHECK(r.trace.per_step.size() == 1);
    for (int l = 0; l < L; ++l) {
        if (r.trace.joint.bits[l])
            CHECK(r.revealed.val().row(l) == expensive.row(l));
        else
            CHECK(r.revealed.val().row(l).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("run_recursive: per-step cap bounds the joint selection") {
    TinyPolicyModel m;
    const int L = 8;
    Rng data_rng(8);
    MatD cheap = gaussian_mat<double>(L, m.cfg.d_cheap, 1.0, data_rng);
    MatD expensive = gaussian_mat<double>(L, m.cfg.d_expensive, 1.0, data_rng);

    a::Tape<double> t;
    BoundParams<double> b = bind(t, m.store, false);
    Forward<double> f{t, b, m.h, m.cfg, false, nullptr};
    SpotterConfig cfg;
    cfg.steps = 2;
    cfg.budget = 1.0;
    cfg.per_step_cap = 2;
    RecursiveResult<double> r = run_recursive(f, cheap, expensive,
                                              encode_query(f, {0, 1, 2, 3}), cfg,
                                              RunMode::eval, nullptr);
    CHECK(r.trace.joint.count() <= 4);
    for (const auto& step : r.trace.per_step) CHECK(step.count() <= 2);
}

TEST_CASE("run_recursive: eval selection is deterministic") {
    TinyPolicyModel m;
    const int L = 12;
    Rng data_rng(9);
    MatD cheap = gaussian_mat<double>(L, m.cfg.d_cheap, 1.0, data_rng);
    MatD expensive = gaussian_mat<double>(L, m.cfg.d_expensive, 1.0, data_rng);
    SpotterConfig cfg;
    cfg.steps = 2;
    cfg.budget = 0.3;

    const auto run = [&]() {
        a::Tape<double> t;
        BoundParams<double> b = bind(t, m.store, false);
        Forward<double> f{t, b, m.h, m.cfg, false, nullptr};
        return run_recursive(f, cheap, expensive, encode_query(f, {0, 1, 2, 3}), cfg,
                             RunMode::eval, nullptr)
            .trace.joint;
    };
    CHECK(run() == run());
}

TEST_CASE("run_recursive: training gradient reaches the policy head") {
    TinyPolicyModel m;
    const int L = 8;
    Rng data_rng(10);
    MatD cheap = gaussian_mat<double>(L, m.cfg.d_cheap, 1.0, data_rng);
    MatD expensive = gaussian_mat<double>(L, m.cfg.d_expensive, 1.0, data_rng);

    a::Tape<double> t;
    BoundParams<double> b = bind(t, m.store, true);
    Rng rng(11);
    Forward<double> f{t, b, m.h, m.cfg, true, &rng};
    SpotterConfig cfg;
    cfg.steps = 2;
    cfg.budget = 0.4;
    RecursiveResult<double> r = run_recursive(f, cheap, expensive,
                                              encode_query(f, {0, 1, 2, 3}), cfg,
                                              RunMode::train_st, &rng);
    // any loss that depends on revealed features must move the policy weights
    a::Var<double> loss = a::mean_all(a::mul(r.revealed, r.revealed));
    t.backward(loss.id);
    GradBuffer<double> g;
    g.init(m.store);
    harvest_grads(t, b, g);
    const int w1 = m.store.index_of("policy.1.w");
    CHECK(g.g[w1].cwiseAbs().maxCoeff() > 0.0);
}
