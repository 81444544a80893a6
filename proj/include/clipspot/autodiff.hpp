#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "clipspot/rng.hpp"
#include "clipspot/tensor.hpp"

namespace clipspot::ad {

// Reverse-mode tape over dense row-major matrices. One tape per forward pass;
// nodes are immutable after creation and backward() walks them in reverse
// creation order, so any DAG built through these ops differentiates correctly.
template <class S>
class Tape {
public:
    struct Node {
        Mat<S> value;
        Mat<S> grad;
        bool requires_grad = false;
        bool grad_ready = false;
        std::function<void(Tape&)> back;
    };

    int push(Mat<S> value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, false, nullptr});
        return static_cast<int>(nodes_.size()) - 1;
    }

    void set_back(int i, std::function<void(Tape&)> fn) { nodes_[i].back = std::move(fn); }

    const Mat<S>& val(int i) const { return nodes_[i].value; }

    Mat<S>& grad(int i) {
        Node& n = nodes_[i];
        if (!n.grad_ready) {
            n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
            n.grad_ready = true;
        }
        return n.grad;
    }

    bool has_grad(int i) const { return nodes_[i].grad_ready; }
    bool requires_grad(int i) const { return nodes_[i].requires_grad; }

    void backward(int root) {
        if (val(root).size() != 1) throw std::logic_error("backward: root must be scalar");
        grad(root)(0, 0) = S(1);
        for (int i = root; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.grad_ready && n.back) n.back(*this);
        }
    }

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }
    void reserve(std::size_t n) { nodes_.reserve(n); }

private:
    std::vector<Node> nodes_;
};

template <class S>
struct Var {
    Tape<S>* tape = nullptr;
    int id = -1;

    const Mat<S>& val() const { return tape->val(id); }
    int rows() const { return static_cast<int>(val().rows()); }
    int cols() const { return static_cast<int>(val().cols()); }
    S scalar() const { return val()(0, 0); }
    bool defined() const { return tape != nullptr; }
};

template <class S>
Var<S> constant(Tape<S>& t, Mat<S> v) {
    return {&t, t.push(std::move(v), false)};
}

template <class S>
Var<S> scalar(Tape<S>& t, S v) {
    Mat<S> m(1, 1);
    m(0, 0) = v;
    return constant(t, std::move(m));
}

template <class S>
Var<S> leaf(Tape<S>& t, Mat<S> v, bool requires_grad = true) {
    return {&t, t.push(std::move(v), requires_grad)};
}

namespace detail {

template <class S>
bool rg(const Var<S>& a) {
    return a.tape->requires_grad(a.id);
}

// Registers a unary op. dv(t, out_id, a_id) adds the contribution to a's grad.
template <class S, class Back>
Var<S> unary(Var<S> a, Mat<S> value, Back back) {
    Tape<S>& t = *a.tape;
    const bool req = rg(a);
    const int out = t.push(std::move(value), req);
    if (req) {
        const int ia = a.id;
        t.set_back(out, [out, ia, back](Tape<S>& t) { back(t, out, ia); });
    }
    return {&t, out};
}

template <class S, class Back>
Var<S> binary(Var<S> a, Var<S> b, Mat<S> value, Back back) {
    Tape<S>& t = *a.tape;
    const bool ra = rg(a), rb = rg(b);
    const int out = t.push(std::move(value), ra || rb);
    if (ra || rb) {
        const int ia = a.id, ib = b.id;
        t.set_back(out, [out, ia, ib, ra, rb, back](Tape<S>& t) { back(t, out, ia, ib, ra, rb); });
    }
    return {&t, out};
}

}  // namespace detail

// ---- arithmetic -------------------------------------------------------------

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
    assert(a.val().rows() == b.val().rows() && a.val().cols() == b.val().cols());
    return detail::binary(a, b, Mat<S>(a.val() + b.val()),
                          [](Tape<S>& t, int out, int ia, int ib, bool ra, bool rb) {
                              if (ra) t.grad(ia) += t.grad(out);
                              if (rb) t.grad(ib) += t.grad(out);
                          });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
    assert(a.val().rows() == b.val().rows() && a.val().cols() == b.val().cols());
    return detail::binary(a, b, Mat<S>(a.val() - b.val()),
                          [](Tape<S>& t, int out, int ia, int ib, bool ra, bool rb) {
                              if (ra) t.grad(ia) += t.grad(out);
                              if (rb) t.grad(ib) -= t.grad(out);
                          });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {  // elementwise
    assert(a.val().rows() == b.val().rows() && a.val().cols() == b.val().cols());
    return detail::binary(a, b, Mat<S>(a.val().cwiseProduct(b.val())),
                          [](Tape<S>& t, int out, int ia, int ib, bool ra, bool rb) {
                              if (ra) t.grad(ia) += t.grad(out).cwiseProduct(t.val(ib));
                              if (rb) t.grad(ib) += t.grad(out).cwiseProduct(t.val(ia));
                          });
}

template <class S>
Var<S> smul(Var<S> a, S k) {  // scale by compile-time constant
    return detail::unary(a, Mat<S>(a.val() * k), [k](Tape<S>& t, int out, int ia) {
        t.grad(ia) += t.grad(out) * k;
    });
}

template <class S>
Var<S> neg(Var<S> a) {
    return smul(a, S(-1));
}

// broadcast a 1xC row over all rows of a (bias add)
template <class S>
Var<S> add_rowvec(Var<S> a, Var<S> r) {
    assert(r.val().rows() == 1 && r.val().cols() == a.val().cols());
    Mat<S> v = a.val();
    v.rowwise() += Eigen::RowVector<S, Eigen::Dynamic>(r.val().row(0));
    return detail::binary(a, r, std::move(v),
                          [](Tape<S>& t, int out, int ia, int ib, bool ra, bool rb) {
                              if (ra) t.grad(ia) += t.grad(out);
                              if (rb) t.grad(ib) += t.grad(out).colwise().sum();
                          });
}

// scale row l of a by c(l, 0); c is Lx1
template <class S>
Var<S> mul_colvec(Var<S> a, Var<S> c) {
    assert(c.val().cols() == 1 && c.val().rows() == a.val().rows());
    Mat<S> v = a.val();
    v.array().colwise() *= c.val().col(0).array();
    return detail::binary(a, c, std::move(v),
                          [](Tape<S>& t, int out, int ia, int ib, bool ra, bool rb) {
                              if (ra) {
                                  Mat<S> g = t.grad(out);
                                  g.array().colwise() *= t.val(ib).col(0).array();
                                  t.grad(ia) += g;
                              }
                              if (rb)
                                  t.grad(ib).col(0) +=
                                      t.grad(out).cwiseProduct(t.val(ia)).rowwise().sum();
                          });
}

// ---- matrix products --------------------------------------------------------

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
    assert(a.val().cols() == b.val().rows());
    return detail::binary(a, b, Mat<S>(a.val() * b.val()),
                          [](Tape<S>& t, int out, int ia, int ib, bool ra, bool rb) {
                              if (ra) t.grad(ia) += t.grad(out) * t.val(ib).transpose();
                              if (rb) t.grad(ib) += t.val(ia).transpose() * t.grad(out);
                          });
}

template <class S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {  // a * b^T
    assert(a.val().cols() == b.val().cols());
    return detail::binary(a, b, Mat<S>(a.val() * b.val().transpose()),
                          [](Tape<S>& t, int out, int ia, int ib, bool ra, bool rb) {
                              if (ra) t.grad(ia) += t.grad(out) * t.val(ib);
                              if (rb) t.grad(ib) += t.grad(out).transpose() * t.val(ia);
                          });
}

template <class S>
Var<S> transpose(Var<S> a) {
    return detail::unary(a, Mat<S>(a.val().transpose()), [](Tape<S>& t, int out, int ia) {
        t.grad(ia) += t.grad(out).transpose();
    });
}

// ---- elementwise nonlinearities ----------------------------------------------

template <class S>
Var<S> sigmoid(Var<S> a) {
    Mat<S> v = a.val().unaryExpr([](S x) { return S(1) / (S(1) + std::exp(-x)); });
    return detail::unary(a, std::move(v), [](Tape<S>& t, int out, int ia) {
        const Mat<S>& y = t.val(out);
        t.grad(ia) += t.grad(out).cwiseProduct(
            y.cwiseProduct(Mat<S>(Mat<S>::Ones(y.rows(), y.cols()) - y)));
    });
}

template <class S>
Var<S> tanh_(Var<S> a) {
    Mat<S> v = a.val().unaryExpr([](S x) { return std::tanh(x); });
    return detail::unary(a, std::move(v), [](Tape<S>& t, int out, int ia) {
        const Mat<S>& y = t.val(out);
        t.grad(ia) += t.grad(out).cwiseProduct(
            Mat<S>(Mat<S>::Ones(y.rows(), y.cols()) - y.cwiseProduct(y)));
    });
}

template <class S>
Var<S> relu(Var<S> a) {
    Mat<S> v = a.val().cwiseMax(S(0));
    return detail::unary(a, std::move(v), [](Tape<S>& t, int out, int ia) {
        const Mat<S>& x = t.val(ia);
        t.grad(ia) += t.grad(out).cwiseProduct(
            Mat<S>(x.unaryExpr([](S e) { return e > S(0) ? S(1) : S(0); })));
    });
}

template <class S>
Var<S> exp_(Var<S> a) {
    Mat<S> v = a.val().array().exp().matrix();
    return detail::unary(a, std::move(v), [](Tape<S>& t, int out, int ia) {
        t.grad(ia) += t.grad(out).cwiseProduct(t.val(out));
    });
}

template <class S>
Var<S> log_(Var<S> a) {  // caller guarantees positivity
    Mat<S> v = a.val().array().log().matrix();
    return detail::unary(a, std::move(v), [](Tape<S>& t, int out, int ia) {
        t.grad(ia) += t.grad(out).cwiseQuotient(t.val(ia));
    });
}

template <class S>
Var<S> abs_(Var<S> a) {
    Mat<S> v = a.val().cwiseAbs();
    return detail::unary(a, std::move(v), [](Tape<S>& t, int out, int ia) {
        const Mat<S>& x = t.val(ia);
        t.grad(ia) += t.grad(out).cwiseProduct(Mat<S>(
            x.unaryExpr([](S e) { return e > S(0) ? S(1) : (e < S(0) ? S(-1) : S(0)); })));
    });
}

template <class S>
Var<S> clamp(Var<S> a, S lo, S hi) {
    Mat<S> v = a.val().cwiseMax(lo).cwiseMin(hi);
    return detail::unary(a, std::move(v), [lo, hi](Tape<S>& t, int out, int ia) {
        const Mat<S>& x = t.val(ia);
        Mat<S> pass = x.unaryExpr([lo, hi](S e) { return (e > lo && e < hi) ? S(1) : S(0); });
        t.grad(ia) += t.grad(out).cwiseProduct(pass);
    });
}

// ---- softmax family (row-wise) -----------------------------------------------

template <class S>
Var<S> softmax_rows(Var<S> a) {
    Mat<S> v = a.val();
    for (int r = 0; r < v.rows(); ++r) {
        const S m = v.row(r).maxCoeff();
        v.row(r) = (v.row(r).array() - m).exp();
        v.row(r) /= v.row(r).sum();
    }
    return detail::unary(a, std::move(v), [](Tape<S>& t, int out, int ia) {
        const Mat<S>& y = t.val(out);
        const Mat<S>& g = t.grad(out);
        Mat<S>& ga = t.grad(ia);
        for (int r = 0; r < y.rows(); ++r) {
            const S dot = y.row(r).dot(g.row(r));
            ga.row(r) += (g.row(r).array() - dot).matrix().cwiseProduct(y.row(r));
        }
    });
}

template <class S>
Var<S> log_softmax_rows(Var<S> a) {
    Mat<S> v = a.val();
    for (int r = 0; r < v.rows(); ++r) {
        const S m = v.row(r).maxCoeff();
        const S lse = m + std::log((v.row(r).array() - m).exp().sum());
        v.row(r).array() -= lse;
    }
    return detail::unary(a, std::move(v), [](Tape<S>& t, int out, int ia) {
        const Mat<S>& ls = t.val(out);
        const Mat<S>& g = t.grad(out);
        Mat<S>& ga = t.grad(ia);
        for (int r = 0; r < ls.rows(); ++r) {
            const S gsum = g.row(r).sum();
            ga.row(r) += g.row(r) - gsum * ls.row(r).array().exp().matrix();
        }
    });
}

// row-wise max -> Lx1; gradient routed to (first) argmax per row
template <class S>
Var<S> rowwise_max(Var<S> a) {
    const Mat<S>& x = a.val();
    Mat<S> v(x.rows(), 1);
    std::vector<int> arg(x.rows());
    for (int r = 0; r < x.rows(); ++r) {
        int c = 0;
        v(r, 0) = x.row(r).maxCoeff(&c);
        arg[r] = c;
    }
    return detail::unary(a, std::move(v), [arg](Tape<S>& t, int out, int ia) {
        Mat<S>& ga = t.grad(ia);
        const Mat<S>& g = t.grad(out);
        for (int r = 0; r < g.rows(); ++r) ga(r, arg[r]) += g(r, 0);
    });
}

// ---- reductions ---------------------------------------------------------------

template <class S>
Var<S> sum_all(Var<S> a) {
    Mat<S> v(1, 1);
    v(0, 0) = a.val().sum();
    return detail::unary(a, std::move(v), [](Tape<S>& t, int out, int ia) {
        t.grad(ia).array() += t.grad(out)(0, 0);
    });
}

template <class S>
Var<S> mean_all(Var<S> a) {
    const S n = static_cast<S>(a.val().size());
    Mat<S> v(1, 1);
    v(0, 0) = a.val().sum() / n;
    return detail::unary(a, std::move(v), [n](Tape<S>& t, int out, int ia) {
        t.grad(ia).array() += t.grad(out)(0, 0) / n;
    });
}

template <class S>
Var<S> mean_over_rows(Var<S> a) {  // 1xC column means
    const S n = static_cast<S>(a.val().rows());
    Mat<S> v = a.val().colwise().sum() / n;
    return detail::unary(a, std::move(v), [n](Tape<S>& t, int out, int ia) {
        t.grad(ia) += (Mat<S>::Ones(t.val(ia).rows(), 1) * t.grad(out)) / n;
    });
}

template <class S>
Var<S> pick(Var<S> a, int r, int c) {  // single element as 1x1
    Mat<S> v(1, 1);
    v(0, 0) = a.val()(r, c);
    return detail::unary(a, std::move(v), [r, c](Tape<S>& t, int out, int ia) {
        t.grad(ia)(r, c) += t.grad(out)(0, 0);
    });
}

// ---- shape ops -----------------------------------------------------------------

template <class S>
Var<S> slice_cols(Var<S> a, int c0, int n) {
    Mat<S> v = a.val().middleCols(c0, n);
    return detail::unary(a, std::move(v), [c0, n](Tape<S>& t, int out, int ia) {
        t.grad(ia).middleCols(c0, n) += t.grad(out);
    });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    assert(!parts.empty());
    Tape<S>& t = *parts[0].tape;
    const int rows = parts[0].rows();
    int cols = 0;
    bool req = false;
    for (const auto& p : parts) {
        assert(p.rows() == rows);
        cols += p.cols();
        req = req || detail::rg(p);
    }
    Mat<S> v(rows, cols);
    std::vector<int> ids, offs;
    int off = 0;
    for (const auto& p : parts) {
        v.middleCols(off, p.cols()) = p.val();
        ids.push_back(p.id);
        offs.push_back(off);
        off += p.cols();
    }
    const int out = t.push(std::move(v), req);
    if (req) {
        t.set_back(out, [out, ids, offs](Tape<S>& t) {
            for (std::size_t k = 0; k < ids.size(); ++k) {
                if (!t.requires_grad(ids[k])) continue;
                const int n = static_cast<int>(t.val(ids[k]).cols());
                t.grad(ids[k]) += t.grad(out).middleCols(offs[k], n);
            }
        });
    }
    return {&t, out};
}

// broadcast a 1xC row to R identical rows
template <class S>
Var<S> tile_rows(Var<S> r, int rows) {
    assert(r.val().rows() == 1);
    Mat<S> v = Mat<S>::Ones(rows, 1) * r.val();
    return detail::unary(r, std::move(v), [](Tape<S>& t, int out, int ia) {
        t.grad(ia) += t.grad(out).colwise().sum();
    });
}

// ---- normalization --------------------------------------------------------------

template <class S>
Var<S> layernorm_rows(Var<S> a, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
    assert(gain.val().rows() == 1 && gain.val().cols() == a.val().cols());
    const Mat<S>& x = a.val();
    const int R = static_cast<int>(x.rows()), C = static_cast<int>(x.cols());
    Mat<S> xhat(R, C);
    std::vector<S> inv_std(R);
    for (int r = 0; r < R; ++r) {
        const S mean = x.row(r).mean();
        const S var = (x.row(r).array() - mean).square().sum() / S(C);
        inv_std[r] = S(1) / std::sqrt(var + eps);
        xhat.row(r) = (x.row(r).array() - mean) * inv_std[r];
    }
    Mat<S> v = xhat;
    v.array().rowwise() *= gain.val().row(0).array();
    v.rowwise() += Eigen::RowVector<S, Eigen::Dynamic>(bias.val().row(0));

    Tape<S>& t = *a.tape;
    const bool ra = detail::rg(a), rgn = detail::rg(gain), rb = detail::rg(bias);
    const int out = t.push(std::move(v), ra || rgn || rb);
    if (ra || rgn || rb) {
        const int ia = a.id, ig = gain.id, ib = bias.id;
        t.set_back(out, [out, ia, ig, ib, ra, rgn, rb, xhat, inv_std](Tape<S>& t) {
            const Mat<S>& g = t.grad(out);
            const int R = static_cast<int>(g.rows()), C = static_cast<int>(g.cols());
            if (rb) t.grad(ib) += g.colwise().sum();
            if (rgn) t.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
            if (ra) {
                const auto& gamma = t.val(ig);
                Mat<S>& ga = t.grad(ia);
                for (int r = 0; r < R; ++r) {
                    Eigen::RowVector<S, Eigen::Dynamic> gy =
                        g.row(r).cwiseProduct(gamma.row(0));
                    const S s1 = gy.sum();
                    const S s2 = gy.dot(xhat.row(r));
                    ga.row(r) += (inv_std[r] / S(C)) *
                                 (S(C) * gy.array() - s1 - xhat.row(r).array() * s2).matrix();
                }
            }
        });
    }
    return {&t, out};
}

// ---- lookup / conv ---------------------------------------------------------------

template <class S>
Var<S> embedding(Var<S> table, const std::vector<int>& ids) {
    const Mat<S>& tab = table.val();
    Mat<S> v(static_cast<int>(ids.size()), tab.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tab.rows())
            throw std::out_of_range("embedding: token id out of vocabulary");
        v.row(static_cast<int>(i)) = tab.row(ids[i]);
    }
    return detail::unary(table, std::move(v), [ids](Tape<S>& t, int out, int ia) {
        Mat<S>& g = t.grad(ia);
        const Mat<S>& go = t.grad(out);
        for (std::size_t i = 0; i < ids.size(); ++i)
            g.row(ids[i]) += go.row(static_cast<int>(i));
    });
}

// 1-D convolution along rows (time); kernel is KxC, zero padded, output Lx1.
template <class S>
Var<S> conv1d_col(Var<S> a, Var<S> kernel, Var<S> bias) {
    const Mat<S>& x = a.val();
    const Mat<S>& w = kernel.val();
    assert(w.cols() == x.cols());
    assert(bias.val().size() == 1);
    const int L = static_cast<int>(x.rows());
    const int K = static_cast<int>(w.rows());
    const int half = K / 2;
    Mat<S> v(L, 1);
    for (int l = 0; l < L; ++l) {
        S acc = bias.val()(0, 0);
        for (int k = 0; k < K; ++k) {
            const int p = l + k - half;
            if (p >= 0 && p < L) acc += w.row(k).dot(x.row(p));
        }
        v(l, 0) = acc;
    }
    Tape<S>& t = *a.tape;
    const bool ra = detail::rg(a), rw = detail::rg(kernel), rb = detail::rg(bias);
    const int out = t.push(std::move(v), ra || rw || rb);
    if (ra || rw || rb) {
        const int ia = a.id, iw = kernel.id, ib = bias.id;
        t.set_back(out, [out, ia, iw, ib, ra, rw, rb, L, K, half](Tape<S>& t) {
            const Mat<S>& g = t.grad(out);
            if (rb) t.grad(ib)(0, 0) += g.sum();
            for (int l = 0; l < L; ++l) {
                const S gl = g(l, 0);
                if (gl == S(0)) continue;
                for (int k = 0; k < K; ++k) {
                    const int p = l + k - half;
                    if (p < 0 || p >= L) continue;
                    if (rw) t.grad(iw).row(k) += gl * t.val(ia).row(p);
                    if (ra) t.grad(ia).row(p) += gl * t.val(iw).row(k);
                }
            }
        });
    }
    return {&t, out};
}

// ---- gradient flow control --------------------------------------------------------

template <class S>
Var<S> stopgrad(Var<S> a) {
    return constant(*a.tape, a.val());
}

// Straight-through: forward takes `hard`, backward routes grad into `relaxed`.
template <class S>
Var<S> straight_through(const Mat<S>& hard, Var<S> relaxed) {
    assert(hard.rows() == relaxed.val().rows() && hard.cols() == relaxed.val().cols());
    return detail::unary(relaxed, Mat<S>(hard), [](Tape<S>& t, int out, int ia) {
        t.grad(ia) += t.grad(out);
    });
}

// Inverted dropout; draws one mask per call from rng.
template <class S>
Var<S> dropout(Var<S> a, double p, Rng& rng) {
    if (p <= 0.0) return a;
    const S keep = static_cast<S>(1.0 / (1.0 - p));
    Mat<S> mask(a.rows(), a.cols());
    for (int r = 0; r < mask.rows(); ++r)
        for (int c = 0; c < mask.cols(); ++c)
            mask(r, c) = rng.uniform() < p ? S(0) : keep;
    return mul(a, constant(*a.tape, std::move(mask)));
}

}  // namespace clipspot::ad
