#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "clipspot/model.hpp"
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

struct TinyModel {
    ParamStore<double> store;
    EmParamHandles h;
    ModelConfig cfg;

    explicit TinyModel(ModelConfig c, std::uint64_t seed = 3, bool policy = false) : cfg(c) {
        Rng rng(seed);
        h = build_em_params(store, cfg, rng, policy);
    }
};

}  // namespace

TEST_CASE("encode_query: shape, determinism, permutation behavior") {
    TinyModel m(tiny_config());
    a::Tape<double> t;
    BoundParams<double> b = bind(t, m.store, false);
    Forward<double> f{t, b, m.h, m.cfg, false, nullptr};

    a::Var<double> q1 = encode_query(f, {1, 5, 3, 7});
    CHECK(q1.rows() == 4);
    CHECK(q1.cols() == 8);
    a::Var<double> q2 = encode_query(f, {1, 5, 3, 7});
    CHECK(q1.val() == q2.val());

    // permuting tokens permutes rows
    a::Var<double> qp = encode_query(f, {7, 3, 5, 1});
    for (int i = 0; i < 4; ++i) CHECK(qp.val().row(i) == q1.val().row(3 - i));

    CHECK_THROWS_AS(encode_query(f, {12}), std::out_of_range);
}

TEST_CASE("cross_modal_encode: output shape and zero-reveal acceptance") {
    TinyModel m(tiny_config());
    a::Tape<double> t;
    BoundParams<double> b = bind(t, m.store, false);
    Forward<double> f{t, b, m.h, m.cfg, false, nullptr};

    const int L = 8;
    Rng rng(4);
    MatD cheap = gaussian_mat<double>(L, m.cfg.d_cheap, 1.0, rng);
    MatD zeros = MatD::Zero(L, m.cfg.d_expensive);
    a::Var<double> visual = a::concat_cols<double>(
        {a::constant(t, cheap), a::constant(t, zeros)});
    a::Var<double> q = encode_query(f, {0, 1, 2, 3});
    a::Var<double> c = cross_modal_encode(f, visual, q);
    CHECK(c.rows() == L);
    CHECK(c.cols() == m.cfg.hidden);
    CHECK(c.val().allFinite());
}

TEST_CASE("degenerate encoder: single-clip change stays row-local") {
    ModelConfig cfg = tiny_config();
    cfg.encoder_layers = 1;
    cfg.attention_heads = 1;
    TinyModel m(cfg);

    // zero all cross-row mixing: attention output projections and the
    // query-to-context block of the fused projection
    const auto zero_param = [&](int idx) { m.store.entry(idx).value.setZero(); };
    zero_param(m.h.enc[0].wo.w);
    zero_param(m.h.enc[0].wo.b);
    auto& cqa_w = m.store.entry(m.h.cqa_proj.w).value;
    cqa_w.middleRows(3 * cfg.hidden, cfg.hidden).setZero();

    const int L = 6, l_changed = 3;
    Rng rng(8);
    MatD cheap = gaussian_mat<double>(L, cfg.d_cheap, 1.0, rng);
    MatD exp1 = gaussian_mat<double>(L, cfg.d_expensive, 1.0, rng);
    MatD exp2 = exp1;
    exp2.row(l_changed).array() += 1.5;

    const auto run = [&](const MatD& expensive) {
        a::Tape<double> t;
        BoundParams<double> b = bind(t, m.store, false);
        Forward<double> f{t, b, m.h, cfg, false, nullptr};
        a::Var<double> visual = a::concat_cols<double>(
            {a::constant(t, cheap), a::constant(t, expensive)});
        return cross_modal_encode(f, visual, encode_query(f, {0, 1, 2, 3})).val();
    };
    const MatD c1 = run(exp1), c2 = run(exp2);
    for (int l = 0; l < L; ++l) {
        const double diff = (c1.row(l) - c2.row(l)).cwiseAbs().maxCoeff();
        if (l == l_changed)
            CHECK(diff > 1e-6);
        else
            CHECK(diff < 1e-12);
    }
}

TEST_CASE("qgh: pinned reweight examples and zero-weight sigmoid") {
    TinyModel m(tiny_config());
    // zero conv weights and bias -> sigmoid(0) = 0.5 everywhere
    m.store.entry(m.h.qgh_w).value.setZero();
    m.store.entry(m.h.qgh_b).value.setZero();

    a::Tape<double> t;
    BoundParams<double> b = bind(t, m.store, false);
    Forward<double> f{t, b, m.h, m.cfg, false, nullptr};
    Rng rng(5);
    a::Var<double> c = a::constant(t, gaussian_mat<double>(7, m.cfg.hidden, 1.0, rng));
    a::Var<double> s = qgh_scores(f, c);
    CHECK(s.rows() == 7);
    for (int l = 0; l < 7; ++l) CHECK(s.val()(l, 0) == 0.5);

    // reweight scales rows
    a::Var<double> all_one = a::constant(t, MatD(MatD::Ones(7, 1)));
    CHECK(qgh_reweight(c, all_one).val() == c.val());
    a::Var<double> half = a::constant(t, MatD(MatD::Constant(7, 1, 0.5)));
    CHECK(qgh_reweight(c, half).val() == MatD(0.5 * c.val()));
}

TEST_CASE("span_predict: normalized log-probabilities and L=1 degenerate case") {
    TinyModel m(tiny_config());
    a::Tape<double> t;
    BoundParams<double> b = bind(t, m.store, false);
    Forward<double> f{t, b, m.h, m.cfg, false, nullptr};
    Rng rng(6);

    a::Var<double> c = a::constant(t, gaussian_mat<double>(9, m.cfg.hidden, 1.0, rng));
    auto [ps, pe] = span_predict(f, c);
    CHECK(ps.cols() == 9);
    CHECK(std::abs(ps.val().array().exp().sum() - 1.0) < 1e-5);
    CHECK(std::abs(pe.val().array().exp().sum() - 1.0) < 1e-5);

    a::Var<double> c1 = a::constant(t, gaussian_mat<double>(1, m.cfg.hidden, 1.0, rng));
    auto [ps1, pe1] = span_predict(f, c1);
    CHECK(ps1.val()(0, 0) == 0.0);
    CHECK(pe1.val()(0, 0) == 0.0);
}

TEST_CASE("pipeline is clip-permutation-equivariant only without positions") {
    for (bool positional : {false, true}) {
        ModelConfig cfg = tiny_config();
        cfg.positional = positional;
        TinyModel m(cfg);
        const int L = 6;
        Rng rng(9);
        MatD cheap = gaussian_mat<double>(L, cfg.d_cheap, 1.0, rng);
        MatD expensive = gaussian_mat<double>(L, cfg.d_expensive, 1.0, rng);
        std::vector<int> perm = {3, 0, 5, 1, 4, 2};
        MatD cheap_p(L, cfg.d_cheap), exp_p(L, cfg.d_expensive);
        for (int i = 0; i < L; ++i) {
            cheap_p.row(i) = cheap.row(perm[i]);
            exp_p.row(i) = expensive.row(perm[i]);
        }

        const auto run = [&](const MatD& ch, const MatD& ex) {
            a::Tape<double> t;
            BoundParams<double> b = bind(t, m.store, false);
            Forward<double> f{t, b, m.h, cfg, false, nullptr};
            EmHeads<double> em =
                em_forward(f, ch, a::constant(t, ex), encode_query(f, {0, 1, 2, 3}));
            return em.p_s.val();
        };
        const MatD base = run(cheap, expensive);
        const MatD permuted = run(cheap_p, exp_p);

        double max_diff = 0.0;
        for (int i = 0; i < L; ++i)
            max_diff = std::max(max_diff, std::abs(permuted(0, i) - base(0, perm[i])));
        if (positional)
            CHECK(max_diff > 1e-8);
        else
            CHECK(max_diff < 1e-10);
    }
}

TEST_CASE("propose_spans: pinned examples") {
    // one-hot start at 2, end at 5 (as probabilities -> logs)
    std::vector<double> ps(8, -1e30), pe(8, -1e30);
    ps[2] = 0.0;
    pe[5] = 0.0;
    auto top = propose_spans(ps, pe, 1, 8);
    REQUIRE(top.size() == 1);
    CHECK(top[0] == TimeWindow{2, 5});

    // uniform distributions: deterministic tie-break picks [0,0]
    std::vector<double> u(8, std::log(1.0 / 8.0));
    top = propose_spans(u, u, 1, 8);
    CHECK(top[0] == TimeWindow{0, 0});

    // k larger than the number of feasible spans returns all of them
    std::vector<double> v(3, std::log(1.0 / 3.0));
    top = propose_spans(v, v, 100, 2);
    CHECK(top.size() == 5);  // [0,0],[0,1],[1,1],[1,2],[2,2]
}

TEST_CASE("propose_spans matches exhaustive enumeration") {
    Rng rng(77);
    for (int L : {4, 8, 16, 32}) {
        for (int rep = 0; rep < 50; ++rep) {
            std::vector<double> ps(L), pe(L);
            for (int i = 0; i < L; ++i) {
                ps[i] = rng.normal();
                pe[i] = rng.normal();
            }
            const int maxlen = 1 + static_cast<int>(rng.uniform_int(L));
            const int k = 1 + static_cast<int>(rng.uniform_int(10));
            const auto got = propose_spans(ps, pe, k, maxlen);
            const auto want = oracles::brute_force_spans(ps, pe, k, maxlen);
            REQUIRE(got.size() == want.size());
            for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);
        }
    }
}

TEST_CASE("checkpoint round-trips byte-exactly") {
    TinyModel m(tiny_config(), 11, true);
    const auto dir = std::filesystem::temp_directory_path() / "clipspot_ckpt_test";
    std::filesystem::remove_all(dir);
    write_checkpoint(m.store, m.cfg.to_json(), dir);
    TinyModel m2(tiny_config(), 99, true);  // different init
    read_checkpoint(m2.store, dir);
    const auto dir2 = std::filesystem::temp_directory_path() / "clipspot_ckpt_test2";
    std::filesystem::remove_all(dir2);
    write_checkpoint(m2.store, m2.cfg.to_json(), dir2);
    CHECK(io::read_text(dir / "params.f32") == io::read_text(dir2 / "params.f32"));
    CHECK(io::read_text(dir / "params.json") == io::read_text(dir2 / "params.json"));
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("model config validation") {
    ModelConfig c = tiny_config();
    c.hidden = 15;  // not divisible by 4 heads
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.qgh_kernel_width = 2;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
