#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "clipspot/autodiff.hpp"
#include "clipspot/core.hpp"
#include "clipspot/params.hpp"
#include "clipspot/rng.hpp"
#include "clipspot/serialize.hpp"

namespace clipspot {

struct ModelConfig {
    int hidden = 128;          // D_h
    int encoder_layers = 2;
    int attention_heads = 4;
    double dropout = 0.1;
    int query_embed_dim = 32;  // D_q
    int max_span_length = 0;   // 0 resolves to ceil(0.25 * L)
    int qgh_kernel_width = 1;
    int ffn_mult = 4;
    bool positional = true;

    // input contract, filled from the dataset
    int vocab = 0;
    int d_cheap = 0;
    int d_expensive = 0;

    int resolved_max_span(int clips) const {
        return max_span_length > 0 ? max_span_length
                                   : static_cast<int>(std::ceil(0.25 * clips));
    }

    void validate() const {
        if (hidden < 1 || encoder_layers < 1 || attention_heads < 1)
            throw std::invalid_argument("config error: model sizes must be positive");
        if (hidden % attention_heads != 0)
            throw std::invalid_argument("config error: hidden size not divisible by heads");
        if (qgh_kernel_width < 1 || qgh_kernel_width % 2 == 0)
            throw std::invalid_argument("config error: qgh kernel width must be odd");
        if (vocab < 1 || d_cheap < 1 || d_expensive < 1)
            throw std::invalid_argument("config error: input dims unset");
    }

    io::json to_json() const {
        io::json j;
        j["hidden"] = hidden;
        j["encoder_layers"] = encoder_layers;
        j["attention_heads"] = attention_heads;
        j["dropout"] = dropout;
        j["query_embed_dim"] = query_embed_dim;
        j["max_span_length"] = max_span_length;
        j["qgh_kernel_width"] = qgh_kernel_width;
        j["ffn_mult"] = ffn_mult;
        j["positional"] = positional;
        j["vocab"] = vocab;
        j["d_cheap"] = d_cheap;
        j["d_expensive"] = d_expensive;
        return j;
    }

    static ModelConfig from_json(const io::json& j) {
        ModelConfig c;
        c.hidden = j.at("hidden").get<int>();
        c.encoder_layers = j.at("encoder_layers").get<int>();
        c.attention_heads = j.at("attention_heads").get<int>();
        c.dropout = j.at("dropout").get<double>();
        c.query_embed_dim = j.at("query_embed_dim").get<int>();
        c.max_span_length = j.at("max_span_length").get<int>();
        c.qgh_kernel_width = j.at("qgh_kernel_width").get<int>();
        c.ffn_mult = j.at("ffn_mult").get<int>();
        c.positional = j.at("positional").get<bool>();
        c.vocab = j.at("vocab").get<int>();
        c.d_cheap = j.at("d_cheap").get<int>();
        c.d_expensive = j.at("d_expensive").get<int>();
        return c;
    }
};

// Head outputs for one instance: per-clip highlight probability and start/end
// log-probabilities over clip positions.
struct LocalizerOutputs {
    std::vector<double> highlight;
    std::vector<double> start_logp;
    std::vector<double> end_logp;
};

namespace handles {

struct Linear {
    int w = -1, b = -1;
};
struct LayerNorm {
    int g = -1, b = -1;
};
struct EncoderLayer {
    LayerNorm ln1, ln2;
    Linear wq, wk, wv, wo, ff1, ff2;
};
struct Mlp2 {
    Linear h1, h2;
};

}  // namespace handles

// Parameter registry for the span-localization model. One shared transformer
// encoder updates both streams; it is reused by every selection step.
struct EmParamHandles {
    int token_table = -1;
    handles::Linear in_visual, in_query;
    std::vector<handles::EncoderLayer> enc;
    handles::LayerNorm enc_final;
    handles::Linear cqa_proj;
    int qgh_w = -1, qgh_b = -1;
    handles::EncoderLayer span_enc;
    handles::LayerNorm span_final;
    handles::Mlp2 start_head, end_head;
    handles::Mlp2 policy;  // selection policy; registered only when requested
    bool has_policy = false;
};

namespace detail {

template <class S>
handles::Linear add_linear(ParamStore<S>& p, const std::string& name, int in, int out, Rng& rng) {
    handles::Linear h;
    h.w = p.add(name + ".w", glorot_mat<S>(in, out, rng));
    h.b = p.add(name + ".b", Mat<S>::Zero(1, out));
    return h;
}

template <class S>
handles::LayerNorm add_layernorm(ParamStore<S>& p, const std::string& name, int dim) {
    handles::LayerNorm h;
    h.g = p.add(name + ".g", Mat<S>::Ones(1, dim));
    h.b = p.add(name + ".b", Mat<S>::Zero(1, dim));
    return h;
}

template <class S>
handles::EncoderLayer add_encoder_layer(ParamStore<S>& p, const std::string& name, int dim,
                                        int ffn_mult, Rng& rng) {
    handles::EncoderLayer h;
    h.ln1 = add_layernorm(p, name + ".ln1", dim);
    h.wq = add_linear(p, name + ".wq", dim, dim, rng);
    h.wk = add_linear(p, name + ".wk", dim, dim, rng);
    h.wv = add_linear(p, name + ".wv", dim, dim, rng);
    h.wo = add_linear(p, name + ".wo", dim, dim, rng);
    h.ln2 = add_layernorm(p, name + ".ln2", dim);
    h.ff1 = add_linear(p, name + ".ff1", dim, dim * ffn_mult, rng);
    h.ff2 = add_linear(p, name + ".ff2", dim * ffn_mult, dim, rng);
    return h;
}

template <class S>
handles::Mlp2 add_mlp2(ParamStore<S>& p, const std::string& name, int in, int hidden, int out,
                       Rng& rng) {
    handles::Mlp2 h;
    h.h1 = add_linear(p, name + ".1", in, hidden, rng);
    h.h2 = add_linear(p, name + ".2", hidden, out, rng);
    return h;
}

}  // namespace detail

template <class S>
EmParamHandles build_em_params(ParamStore<S>& p, const ModelConfig& cfg, Rng& rng,
                               bool with_policy) {
    cfg.validate();
    EmParamHandles h;
    h.token_table = p.add("token_table", gaussian_mat<S>(cfg.vocab, cfg.query_embed_dim, 0.2, rng));
    h.in_visual = detail::add_linear(p, "in_visual", cfg.d_cheap + cfg.d_expensive, cfg.hidden, rng);
    h.in_query = detail::add_linear(p, "in_query", cfg.query_embed_dim, cfg.hidden, rng);
    for (int l = 0; l < cfg.encoder_layers; ++l)
        h.enc.push_back(detail::add_encoder_layer(p, "enc" + std::to_string(l), cfg.hidden,
                                                  cfg.ffn_mult, rng));
    h.enc_final = detail::add_layernorm(p, "enc_final", cfg.hidden);
    h.cqa_proj = detail::add_linear(p, "cqa_proj", 4 * cfg.hidden, cfg.hidden, rng);
    h.qgh_w = p.add("qgh.w", glorot_mat<S>(cfg.qgh_kernel_width, cfg.hidden, rng));
    h.qgh_b = p.add("qgh.b", Mat<S>::Zero(1, 1));
    h.span_enc = detail::add_encoder_layer(p, "span_enc", cfg.hidden, cfg.ffn_mult, rng);
    h.span_final = detail::add_layernorm(p, "span_final", cfg.hidden);
    h.start_head = detail::add_mlp2(p, "start_head", cfg.hidden, cfg.hidden, 1, rng);
    h.end_head = detail::add_mlp2(p, "end_head", cfg.hidden, cfg.hidden, 1, rng);
    if (with_policy) {
        h.policy = detail::add_mlp2(p, "policy", cfg.hidden, cfg.hidden, 2, rng);
        h.has_policy = true;
    }
    return h;
}

// Per-forward context: one tape, one bound parameter set, one dropout stream.
template <class S>
struct Forward {
    ad::Tape<S>& tape;
    const BoundParams<S>& params;
    const EmParamHandles& h;
    const ModelConfig& cfg;
    bool training = false;
    Rng* dropout_rng = nullptr;

    ad::Var<S> var(int handle) const { return params[handle]; }
    ad::Var<S> maybe_dropout(ad::Var<S> x) const {
        if (training && cfg.dropout > 0.0 && dropout_rng)
            return ad::dropout(x, cfg.dropout, *dropout_rng);
        return x;
    }
};

namespace nn {

template <class S>
ad::Var<S> linear(const Forward<S>& f, const handles::Linear& h, ad::Var<S> x) {
    return ad::add_rowvec(ad::matmul(x, f.var(h.w)), f.var(h.b));
}

template <class S>
ad::Var<S> layernorm(const Forward<S>& f, const handles::LayerNorm& h, ad::Var<S> x) {
    return ad::layernorm_rows(x, f.var(h.g), f.var(h.b));
}

template <class S>
ad::Var<S> mlp2(const Forward<S>& f, const handles::Mlp2& h, ad::Var<S> x) {
    return linear(f, h.h2, ad::relu(linear(f, h.h1, x)));
}

template <class S>
ad::Var<S> self_attention(const Forward<S>& f, const handles::EncoderLayer& h, ad::Var<S> x) {
    const int dim = f.cfg.hidden;
    const int heads = f.cfg.attention_heads;
    const int dh = dim / heads;
    ad::Var<S> q = linear(f, h.wq, x), k = linear(f, h.wk, x), v = linear(f, h.wv, x);
    std::vector<ad::Var<S>> outs;
    outs.reserve(heads);
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (int i = 0; i < heads; ++i) {
        ad::Var<S> qi = ad::slice_cols(q, i * dh, dh);
        ad::Var<S> ki = ad::slice_cols(k, i * dh, dh);
        ad::Var<S> vi = ad::slice_cols(v, i * dh, dh);
        ad::Var<S> a = ad::softmax_rows(ad::smul(ad::matmul_nt(qi, ki), scale));
        outs.push_back(ad::matmul(a, vi));
    }
    return linear(f, h.wo, ad::concat_cols(outs));
}

template <class S>
ad::Var<S> encoder_layer(const Forward<S>& f, const handles::EncoderLayer& h, ad::Var<S> x) {
    x = ad::add(x, f.maybe_dropout(self_attention(f, h, layernorm(f, h.ln1, x))));
    ad::Var<S> ff = linear(f, h.ff2, ad::relu(linear(f, h.ff1, layernorm(f, h.ln2, x))));
    return ad::add(x, f.maybe_dropout(ff));
}

}  // namespace nn

// ---- model operations -----------------------------------------------------------

// Token-id rows from the trainable embedding table (position-free).
template <class S>
ad::Var<S> encode_query(const Forward<S>& f, const std::vector<std::int32_t>& tokens) {
    std::vector<int> ids(tokens.begin(), tokens.end());
    return ad::embedding(f.var(f.h.token_table), ids);
}

namespace detail {

template <class S>
ad::Var<S> with_positions(const Forward<S>& f, ad::Var<S> x) {
    if (!f.cfg.positional) return x;
    return ad::add(x, ad::constant(f.tape, positional_table<S>(x.rows(), x.cols())));
}

// Shared transformer stack; applied to each stream independently.
template <class S>
ad::Var<S> encode_stream(const Forward<S>& f, ad::Var<S> x) {
    for (const auto& layer : f.h.enc) x = nn::encoder_layer(f, layer, x);
    return nn::layernorm(f, f.h.enc_final, x);
}

// Bidirectional context-query attention; fuses the query into each clip row.
template <class S>
ad::Var<S> context_query_attention(const Forward<S>& f, ad::Var<S> v, ad::Var<S> q) {
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(f.cfg.hidden)));
    ad::Var<S> sim = ad::smul(ad::matmul_nt(v, q), scale);          // L x T
    ad::Var<S> c2q = ad::matmul(ad::softmax_rows(sim), q);          // L x D
    ad::Var<S> col = ad::rowwise_max(sim);                          // L x 1
    ad::Var<S> beta = ad::softmax_rows(ad::transpose(col));         // 1 x L
    ad::Var<S> q2c = ad::tile_rows(ad::matmul(beta, v), v.rows());  // L x D
    ad::Var<S> fused = ad::concat_cols<S>(
        {v, c2q, ad::mul(v, c2q), ad::mul(v, q2c)});
    return nn::linear(f, f.h.cqa_proj, fused);
}

}  // namespace detail

// visual: L x (D_s + D_v) concatenated cheap/expensive features;
// q_embed: T x D_q token embeddings.  Returns the cross-modal features c (L x D_h).
template <class S>
ad::Var<S> cross_modal_encode(const Forward<S>& f, ad::Var<S> visual, ad::Var<S> q_embed) {
    if (visual.cols() != f.cfg.d_cheap + f.cfg.d_expensive)
        throw std::invalid_argument("cross_modal_encode: visual width mismatch");
    if (q_embed.cols() != f.cfg.query_embed_dim)
        throw std::invalid_argument("cross_modal_encode: query width mismatch");
    ad::Var<S> v_in = detail::with_positions(f, nn::linear(f, f.h.in_visual, visual));
    ad::Var<S> q_in = detail::with_positions(f, nn::linear(f, f.h.in_query, q_embed));
    ad::Var<S> v_enc = detail::encode_stream(f, v_in);
    ad::Var<S> q_enc = detail::encode_stream(f, q_in);
    return detail::context_query_attention(f, v_enc, q_enc);
}

// Highlight scores in (0,1): sigmoid of a width-k 1-D convolution over c.
template <class S>
ad::Var<S> qgh_scores(const Forward<S>& f, ad::Var<S> c) {
    return ad::sigmoid(ad::conv1d_col(c, f.var(f.h.qgh_w), f.var(f.h.qgh_b)));
}

template <class S>
ad::Var<S> qgh_reweight(ad::Var<S> c, ad::Var<S> s_hat) {
    return ad::mul_colvec(c, s_hat);
}

// Start/end log-probability rows (1 x L each) from highlighted features.
template <class S>
std::pair<ad::Var<S>, ad::Var<S>> span_predict(const Forward<S>& f, ad::Var<S> c_h) {
    ad::Var<S> x = nn::layernorm(
        f, f.h.span_final, nn::encoder_layer(f, f.h.span_enc, c_h));
    ad::Var<S> s_logits = ad::transpose(nn::mlp2(f, f.h.start_head, x));  // 1 x L
    ad::Var<S> e_logits = ad::transpose(nn::mlp2(f, f.h.end_head, x));
    return {ad::log_softmax_rows(s_logits), ad::log_softmax_rows(e_logits)};
}

// Full localization pass given the (possibly partially revealed) expensive
// features: cross-modal encoding, highlighting, span heads.
template <class S>
struct EmHeads {
    ad::Var<S> c;      // cross-modal features, L x D_h
    ad::Var<S> s_hat;  // highlight probabilities, L x 1
    ad::Var<S> p_s;    // start log-probabilities, 1 x L
    ad::Var<S> p_e;    // end log-probabilities, 1 x L
};

template <class S>
EmHeads<S> em_forward(const Forward<S>& f, const Mat<S>& cheap, ad::Var<S> revealed,
                      ad::Var<S> q_embed) {
    ad::Var<S> visual = ad::concat_cols<S>({ad::constant(f.tape, cheap), revealed});
    EmHeads<S> r;
    r.c = cross_modal_encode(f, visual, q_embed);
    r.s_hat = qgh_scores(f, r.c);
    auto [ps, pe] = span_predict(f, qgh_reweight(r.c, r.s_hat));
    r.p_s = ps;
    r.p_e = pe;
    return r;
}

// ---- span proposal ---------------------------------------------------------------

// Top-k windows [i, j], j - i + 1 <= max_span_length, by start/end
// log-probability sum; ties by smaller i, then smaller j.
inline std::vector<TimeWindow> propose_spans(const std::vector<double>& start_logp,
                                             const std::vector<double>& end_logp, int k,
                                             int max_span_length) {
    if (k < 1) throw std::invalid_argument("propose_spans: k must be >= 1");
    const int n = static_cast<int>(start_logp.size());
    struct Cand {
        double score;
        int i, j;
    };
    std::vector<Cand> cands;
    cands.reserve(static_cast<std::size_t>(n) * std::min(n, max_span_length));
    for (int i = 0; i < n; ++i) {
        const int j_hi = std::min(n - 1, i + max_span_length - 1);
        for (int j = i; j <= j_hi; ++j)
            cands.push_back({start_logp[i] + end_logp[j], i, j});
    }
    const auto better = [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    };
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + take, cands.end(), better);
    std::vector<TimeWindow> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) out.push_back({cands[i].i, cands[i].j});
    return out;
}

// ---- plain-value extraction --------------------------------------------------------

template <class S>
std::vector<double> to_vector(const Mat<S>& m) {
    std::vector<double> v(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) v[i] = static_cast<double>(m.data()[i]);
    return v;
}

template <class S>
LocalizerOutputs extract_outputs(ad::Var<S> s_hat, ad::Var<S> p_s, ad::Var<S> p_e) {
    LocalizerOutputs o;
    o.highlight = to_vector(s_hat.val());
    o.start_logp = to_vector(p_s.val());
    o.end_logp = to_vector(p_e.val());
    return o;
}

}  // namespace clipspot
