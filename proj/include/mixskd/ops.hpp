#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mixskd/graph.hpp"
#include "mixskd/tensor.hpp"

namespace mixskd {

// ---------------------------------------------------------------------------
// Kernels: plain tensor math shared by the tape ops and the pruned inference
// path. Keeping one implementation per primitive is what makes the pruned
// net bitwise-equal to the training-graph backbone.
// ---------------------------------------------------------------------------
namespace kernels {

template <typename Real>
Tensor<Real> conv2d_fwd(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b, int stride, int padding) {
    if (x.rank() != 4) throw InvalidShapeError("conv2d: input must be [N,Cin,H,W], got " + x.shape_str());
    if (w.rank() != 4) throw InvalidShapeError("conv2d: weight must be [Cout,Cin,kh,kw], got " + w.shape_str());
    const int N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    if (w.shape[1] != Cin)
        throw InvalidShapeError("conv2d: weight Cin " + std::to_string(w.shape[1]) + " != input Cin " + std::to_string(Cin));
    if (b.rank() != 1 || b.shape[0] != Cout) throw InvalidShapeError("conv2d: bias must be [Cout]");
    const int Ho = conv_out_extent(H, kh, stride, padding);
    const int Wo = conv_out_extent(W, kw, stride, padding);

    Tensor<Real> out = Tensor<Real>::zeros({N, Cout, Ho, Wo});
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
            const Real* wbase = &w.data[static_cast<std::size_t>(co) * Cin * kh * kw];
            for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow) {
                    Real acc = b.data[static_cast<std::size_t>(co)];
                    const int ih0 = oh * stride - padding;
                    const int iw0 = ow * stride - padding;
                    for (int ci = 0; ci < Cin; ++ci) {
                        const Real* xplane = &x.data[(static_cast<std::size_t>(n) * Cin + ci) * H * W];
                        const Real* wplane = wbase + static_cast<std::size_t>(ci) * kh * kw;
                        for (int r = 0; r < kh; ++r) {
                            const int ih = ih0 + r;
                            if (ih < 0 || ih >= H) continue;
                            for (int c = 0; c < kw; ++c) {
                                const int iw = iw0 + c;
                                if (iw < 0 || iw >= W) continue;
                                acc += xplane[static_cast<std::size_t>(ih) * W + iw] * wplane[static_cast<std::size_t>(r) * kw + c];
                            }
                        }
                    }
                    out.at4(n, co, oh, ow) = acc;
                }
            }
        }
    }
    return out;
}

// Accumulates into whichever of dx/dw/db is non-null.
template <typename Real>
void conv2d_bwd(const Tensor<Real>& x, const Tensor<Real>& w, int stride, int padding, const Tensor<Real>& gout,
                Tensor<Real>* dx, Tensor<Real>* dw, Tensor<Real>* db) {
    const int N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const int Ho = gout.shape[2], Wo = gout.shape[3];
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
            for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow) {
                    const Real g = gout.at4(n, co, oh, ow);
                    if (db) db->data[static_cast<std::size_t>(co)] += g;
                    if (!dx && !dw) continue;
                    const int ih0 = oh * stride - padding;
                    const int iw0 = ow * stride - padding;
                    for (int ci = 0; ci < Cin; ++ci) {
                        for (int r = 0; r < kh; ++r) {
                            const int ih = ih0 + r;
                            if (ih < 0 || ih >= H) continue;
                            for (int c = 0; c < kw; ++c) {
                                const int iw = iw0 + c;
                                if (iw < 0 || iw >= W) continue;
                                const std::size_t xi = ((static_cast<std::size_t>(n) * Cin + ci) * H + ih) * W + iw;
                                const std::size_t wi = ((static_cast<std::size_t>(co) * Cin + ci) * kh + r) * kw + c;
                                if (dx) dx->data[xi] += g * w.data[wi];
                                if (dw) dw->data[wi] += g * x.data[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename Real>
Tensor<Real> linear_fwd(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
    if (x.rank() != 2) throw InvalidShapeError("linear: input must be [N,Cin], got " + x.shape_str());
    if (w.rank() != 2) throw InvalidShapeError("linear: weight must be [Cout,Cin], got " + w.shape_str());
    const int N = x.shape[0], Cin = x.shape[1], Cout = w.shape[0];
    if (w.shape[1] != Cin)
        throw InvalidShapeError("linear: weight Cin " + std::to_string(w.shape[1]) + " != input Cin " + std::to_string(Cin));
    if (b.rank() != 1 || b.shape[0] != Cout) throw InvalidShapeError("linear: bias must be [Cout]");
    Tensor<Real> out = Tensor<Real>::zeros({N, Cout});
    for (int n = 0; n < N; ++n) {
        const Real* xrow = &x.data[static_cast<std::size_t>(n) * Cin];
        for (int o = 0; o < Cout; ++o) {
            const Real* wrow = &w.data[static_cast<std::size_t>(o) * Cin];
            Real acc = b.data[static_cast<std::size_t>(o)];
            for (int i = 0; i < Cin; ++i) acc += xrow[i] * wrow[i];
            out.at2(n, o) = acc;
        }
    }
    return out;
}

template <typename Real>
Tensor<Real> relu_fwd(const Tensor<Real>& x) {
    Tensor<Real> out = x;
    for (auto& v : out.data) v = v > Real(0) ? v : Real(0);
    return out;
}

template <typename Real>
Tensor<Real> gap_fwd(const Tensor<Real>& x) {
    if (x.rank() != 4) throw InvalidShapeError("global_avg_pool: input must be [N,C,H,W], got " + x.shape_str());
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    if (H < 1 || W < 1) throw InvalidShapeError("global_avg_pool: empty spatial extent");
    Tensor<Real> out = Tensor<Real>::zeros({N, C});
    const Real inv = Real(1) / static_cast<Real>(H * W);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const Real* plane = &x.data[(static_cast<std::size_t>(n) * C + c) * H * W];
            Real acc = 0;
            for (int i = 0; i < H * W; ++i) acc += plane[i];
            out.at2(n, c) = acc * inv;
        }
    return out;
}

// Rows of softmax(z/T), max-subtracted.
template <typename Real>
Tensor<Real> softmax_t_fwd(const Tensor<Real>& z, Real T) {
    if (z.rank() != 2) throw InvalidShapeError("softmax_t: logits must be [N,C], got " + z.shape_str());
    if (!(T > Real(0))) throw InvalidConfigError("softmax_t: temperature must be positive");
    const int N = z.shape[0], C = z.shape[1];
    Tensor<Real> out = Tensor<Real>::zeros({N, C});
    for (int n = 0; n < N; ++n) {
        const Real* row = &z.data[static_cast<std::size_t>(n) * C];
        Real m = row[0];
        for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
        Real denom = 0;
        Real* orow = &out.data[static_cast<std::size_t>(n) * C];
        for (int c = 0; c < C; ++c) {
            orow[c] = std::exp((row[c] - m) / T);
            denom += orow[c];
        }
        for (int c = 0; c < C; ++c) orow[c] /= denom;
    }
    return out;
}

template <typename Real>
Tensor<Real> log_softmax_t_fwd(const Tensor<Real>& z, Real T) {
    if (z.rank() != 2) throw InvalidShapeError("log_softmax_t: logits must be [N,C], got " + z.shape_str());
    if (!(T > Real(0))) throw InvalidConfigError("log_softmax_t: temperature must be positive");
    const int N = z.shape[0], C = z.shape[1];
    Tensor<Real> out = Tensor<Real>::zeros({N, C});
    for (int n = 0; n < N; ++n) {
        const Real* row = &z.data[static_cast<std::size_t>(n) * C];
        Real m = row[0];
        for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
        Real denom = 0;
        for (int c = 0; c < C; ++c) denom += std::exp((row[c] - m) / T);
        const Real lse = std::log(denom);
        Real* orow = &out.data[static_cast<std::size_t>(n) * C];
        for (int c = 0; c < C; ++c) orow[c] = (row[c] - m) / T - lse;
    }
    return out;
}

template <typename Real>
Real sigmoid_scalar(Real v) {
    if (v >= Real(0)) return Real(1) / (Real(1) + std::exp(-v));
    const Real e = std::exp(v);
    return e / (Real(1) + e);
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Tape ops.
// ---------------------------------------------------------------------------
namespace ops {

template <typename Real>
void require_same_shape(Graph<Real>& g, Var a, Var b, const char* what) {
    if (!g.value(a).same_shape(g.value(b)))
        throw InvalidShapeError(std::string(what) + ": " + g.value(a).shape_str() + " vs " + g.value(b).shape_str());
}

template <typename Real>
Var add(Graph<Real>& g, Var a, Var b) {
    require_same_shape(g, a, b, "add");
    Tensor<Real> out = g.value(a);
    out.add_(g.value(b));
    const bool req = g.requires_grad(a) || g.requires_grad(b);
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), req, [a, b, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        if (gg.requires_grad(a)) gg.scratch_grad(s, a).add_(go);
        if (gg.requires_grad(b)) gg.scratch_grad(s, b).add_(go);
    });
}

template <typename Real>
Var sub(Graph<Real>& g, Var a, Var b) {
    require_same_shape(g, a, b, "sub");
    Tensor<Real> out = g.value(a);
    const Tensor<Real>& bv = g.value(b);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
    const bool req = g.requires_grad(a) || g.requires_grad(b);
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), req, [a, b, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        if (gg.requires_grad(a)) gg.scratch_grad(s, a).add_(go);
        if (gg.requires_grad(b)) {
            Tensor<Real>& gb = gg.scratch_grad(s, b);
            for (std::size_t i = 0; i < gb.data.size(); ++i) gb.data[i] -= go.data[i];
        }
    });
}

template <typename Real>
Var mul(Graph<Real>& g, Var a, Var b) {
    require_same_shape(g, a, b, "mul");
    Tensor<Real> out = g.value(a);
    const Tensor<Real>& bv = g.value(b);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    const bool req = g.requires_grad(a) || g.requires_grad(b);
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), req, [a, b, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        if (gg.requires_grad(a)) {
            Tensor<Real>& ga = gg.scratch_grad(s, a);
            const Tensor<Real>& bv2 = gg.value(b);
            for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += go.data[i] * bv2.data[i];
        }
        if (gg.requires_grad(b)) {
            Tensor<Real>& gb = gg.scratch_grad(s, b);
            const Tensor<Real>& av = gg.value(a);
            for (std::size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += go.data[i] * av.data[i];
        }
    });
}

// out = a*x + b (elementwise, scalar coefficients)
template <typename Real>
Var affine(Graph<Real>& g, Var x, Real a, Real b) {
    Tensor<Real> out = g.value(x);
    for (auto& v : out.data) v = a * v + b;
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), g.requires_grad(x), [x, a, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        Tensor<Real>& gx = gg.scratch_grad(s, x);
        for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += a * go.data[i];
    });
}

template <typename Real>
Var scale(Graph<Real>& g, Var x, Real a) {
    return affine(g, x, a, Real(0));
}

// out = a*x + b*y; the convex-combination workhorse (Eq. interpolations use
// a = lambda, b = 1 - lambda).
template <typename Real>
Var axpby(Graph<Real>& g, Real a, Var x, Real b, Var y) {
    require_same_shape(g, x, y, "axpby");
    const Tensor<Real>& xv = g.value(x);
    const Tensor<Real>& yv = g.value(y);
    Tensor<Real> out = Tensor<Real>::zeros(xv.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * xv.data[i] + b * yv.data[i];
    const bool req = g.requires_grad(x) || g.requires_grad(y);
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), req, [x, y, a, b, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        if (gg.requires_grad(x)) {
            Tensor<Real>& gx = gg.scratch_grad(s, x);
            for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += a * go.data[i];
        }
        if (gg.requires_grad(y)) {
            Tensor<Real>& gy = gg.scratch_grad(s, y);
            for (std::size_t i = 0; i < gy.data.size(); ++i) gy.data[i] += b * go.data[i];
        }
    });
}

// Row-wise convex combination: out[n,...] = lam[n]*x[n,...] + (1-lam[n])*y[n,...].
// lam is a constant [N] tensor (per-sample mixup mode).
template <typename Real>
Var axpby_rows(Graph<Real>& g, const Tensor<Real>& lam, Var x, Var y) {
    require_same_shape(g, x, y, "axpby_rows");
    const Tensor<Real>& xv = g.value(x);
    if (lam.rank() != 1 || xv.rank() < 1 || lam.shape[0] != xv.shape[0])
        throw InvalidShapeError("axpby_rows: lambda must be [N] matching the batch extent");
    const int N = xv.shape[0];
    const std::int64_t row = xv.numel() / N;
    Tensor<Real> out = Tensor<Real>::zeros(xv.shape);
    const Tensor<Real>& yv = g.value(y);
    for (int n = 0; n < N; ++n) {
        const Real a = lam.data[static_cast<std::size_t>(n)];
        const Real b = Real(1) - a;
        for (std::int64_t i = 0; i < row; ++i) {
            const std::size_t k = static_cast<std::size_t>(n * row + i);
            out.data[k] = a * xv.data[k] + b * yv.data[k];
        }
    }
    const bool req = g.requires_grad(x) || g.requires_grad(y);
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), req, [x, y, lam, N, row, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        for (int pass = 0; pass < 2; ++pass) {
            const Var target = pass == 0 ? x : y;
            if (!gg.requires_grad(target)) continue;
            Tensor<Real>& gt = gg.scratch_grad(s, target);
            for (int n = 0; n < N; ++n) {
                const Real a = lam.data[static_cast<std::size_t>(n)];
                const Real coef = pass == 0 ? a : Real(1) - a;
                for (std::int64_t i = 0; i < row; ++i) {
                    const std::size_t k = static_cast<std::size_t>(n * row + i);
                    gt.data[k] += coef * go.data[k];
                }
            }
        }
    });
}

template <typename Real>
Var relu(Graph<Real>& g, Var x) {
    Tensor<Real> out = kernels::relu_fwd(g.value(x));
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), g.requires_grad(x), [x, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        const Tensor<Real>& xv = gg.value(x);
        Tensor<Real>& gx = gg.scratch_grad(s, x);
        // subgradient 0 at exactly 0
        for (std::size_t i = 0; i < gx.data.size(); ++i)
            if (xv.data[i] > Real(0)) gx.data[i] += go.data[i];
    });
}

template <typename Real>
Var conv2d(Graph<Real>& g, Var x, Var w, Var b, int stride, int padding) {
    Tensor<Real> out = kernels::conv2d_fwd(g.value(x), g.value(w), g.value(b), stride, padding);
    const bool req = g.requires_grad(x) || g.requires_grad(w) || g.requires_grad(b);
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), req, [x, w, b, stride, padding, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        Tensor<Real>* dx = gg.requires_grad(x) ? &gg.scratch_grad(s, x) : nullptr;
        Tensor<Real>* dw = gg.requires_grad(w) ? &gg.scratch_grad(s, w) : nullptr;
        Tensor<Real>* db = gg.requires_grad(b) ? &gg.scratch_grad(s, b) : nullptr;
        kernels::conv2d_bwd(gg.value(x), gg.value(w), stride, padding, go, dx, dw, db);
    });
}

template <typename Real>
Var linear(Graph<Real>& g, Var x, Var w, Var b) {
    Tensor<Real> out = kernels::linear_fwd(g.value(x), g.value(w), g.value(b));
    const bool req = g.requires_grad(x) || g.requires_grad(w) || g.requires_grad(b);
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), req, [x, w, b, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        const Tensor<Real>& xv = gg.value(x);
        const Tensor<Real>& wv = gg.value(w);
        const int N = xv.shape[0], Cin = xv.shape[1], Cout = wv.shape[0];
        if (gg.requires_grad(x)) {
            Tensor<Real>& gx = gg.scratch_grad(s, x);
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < Cout; ++o) {
                    const Real gv = go.at2(n, o);
                    const Real* wrow = &wv.data[static_cast<std::size_t>(o) * Cin];
                    Real* gxrow = &gx.data[static_cast<std::size_t>(n) * Cin];
                    for (int i = 0; i < Cin; ++i) gxrow[i] += gv * wrow[i];
                }
        }
        if (gg.requires_grad(w)) {
            Tensor<Real>& gw = gg.scratch_grad(s, w);
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < Cout; ++o) {
                    const Real gv = go.at2(n, o);
                    const Real* xrow = &xv.data[static_cast<std::size_t>(n) * Cin];
                    Real* gwrow = &gw.data[static_cast<std::size_t>(o) * Cin];
                    for (int i = 0; i < Cin; ++i) gwrow[i] += gv * xrow[i];
                }
        }
        if (gg.requires_grad(b)) {
            Tensor<Real>& gb = gg.scratch_grad(s, b);
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < Cout; ++o) gb.data[static_cast<std::size_t>(o)] += go.at2(n, o);
        }
    });
}

template <typename Real>
Var global_avg_pool(Graph<Real>& g, Var x) {
    Tensor<Real> out = kernels::gap_fwd(g.value(x));
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), g.requires_grad(x), [x, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        const Tensor<Real>& xv = gg.value(x);
        const int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
        const Real inv = Real(1) / static_cast<Real>(H * W);
        Tensor<Real>& gx = gg.scratch_grad(s, x);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const Real gv = go.at2(n, c) * inv;
                Real* plane = &gx.data[(static_cast<std::size_t>(n) * C + c) * H * W];
                for (int i = 0; i < H * W; ++i) plane[i] += gv;
            }
    });
}

template <typename Real>
Var softmax_t(Graph<Real>& g, Var z, Real T) {
    Tensor<Real> out = kernels::softmax_t_fwd(g.value(z), T);
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), g.requires_grad(z), [z, T, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        const Tensor<Real>& p = gg.value(outv);
        const int N = p.shape[0], C = p.shape[1];
        Tensor<Real>& gz = gg.scratch_grad(s, z);
        for (int n = 0; n < N; ++n) {
            const Real* prow = &p.data[static_cast<std::size_t>(n) * C];
            const Real* grow = &go.data[static_cast<std::size_t>(n) * C];
            Real dot = 0;
            for (int c = 0; c < C; ++c) dot += prow[c] * grow[c];
            Real* out_row = &gz.data[static_cast<std::size_t>(n) * C];
            for (int c = 0; c < C; ++c) out_row[c] += prow[c] * (grow[c] - dot) / T;
        }
    });
}

template <typename Real>
Var log_softmax_t(Graph<Real>& g, Var z, Real T) {
    Tensor<Real> out = kernels::log_softmax_t_fwd(g.value(z), T);
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), g.requires_grad(z), [z, T, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        const Tensor<Real>& ls = gg.value(outv);
        const int N = ls.shape[0], C = ls.shape[1];
        Tensor<Real>& gz = gg.scratch_grad(s, z);
        for (int n = 0; n < N; ++n) {
            const Real* lsrow = &ls.data[static_cast<std::size_t>(n) * C];
            const Real* grow = &go.data[static_cast<std::size_t>(n) * C];
            Real gsum = 0;
            for (int c = 0; c < C; ++c) gsum += grow[c];
            Real* out_row = &gz.data[static_cast<std::size_t>(n) * C];
            for (int c = 0; c < C; ++c) out_row[c] += (grow[c] - std::exp(lsrow[c]) * gsum) / T;
        }
    });
}

template <typename Real>
Var sigmoid(Graph<Real>& g, Var x) {
    Tensor<Real> out = g.value(x);
    for (auto& v : out.data) v = kernels::sigmoid_scalar(v);
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), g.requires_grad(x), [x, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        const Tensor<Real>& sv = gg.value(outv);
        Tensor<Real>& gx = gg.scratch_grad(s, x);
        for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += go.data[i] * sv.data[i] * (Real(1) - sv.data[i]);
    });
}

// Gradient passes through strictly inside (lo, hi) and is clipped to zero
// where the value was clamped.
template <typename Real>
Var clamp(Graph<Real>& g, Var x, Real lo, Real hi) {
    Tensor<Real> out = g.value(x);
    for (auto& v : out.data) v = std::min(hi, std::max(lo, v));
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), g.requires_grad(x), [x, lo, hi, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        const Tensor<Real>& xv = gg.value(x);
        Tensor<Real>& gx = gg.scratch_grad(s, x);
        for (std::size_t i = 0; i < gx.data.size(); ++i)
            if (xv.data[i] > lo && xv.data[i] < hi) gx.data[i] += go.data[i];
    });
}

template <typename Real>
Var log(Graph<Real>& g, Var x) {
    Tensor<Real> out = g.value(x);
    for (auto& v : out.data) v = std::log(v);
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), g.requires_grad(x), [x, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        const Tensor<Real>& xv = gg.value(x);
        Tensor<Real>& gx = gg.scratch_grad(s, x);
        for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += go.data[i] / xv.data[i];
    });
}

template <typename Real>
Var sum(Graph<Real>& g, Var x) {
    Real acc = 0;
    for (Real v : g.value(x).data) acc += v;
    Var outv{static_cast<int>(g.size())};
    return g.make(Tensor<Real>::scalar(acc), g.requires_grad(x), [x, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Real gv = gg.upstream(s, outv).data[0];
        Tensor<Real>& gx = gg.scratch_grad(s, x);
        for (auto& v : gx.data) v += gv;
    });
}

template <typename Real>
Var mean(Graph<Real>& g, Var x) {
    const std::int64_t n = g.value(x).numel();
    if (n == 0) throw InvalidShapeError("mean of empty tensor");
    return scale(g, sum(g, x), Real(1) / static_cast<Real>(n));
}

template <typename Real>
Var reshape(Graph<Real>& g, Var x, std::vector<int> shape) {
    const Tensor<Real>& xv = g.value(x);
    if (Tensor<Real>::numel_of(shape) != xv.numel())
        throw InvalidShapeError("reshape: numel mismatch " + xv.shape_str());
    Tensor<Real> out;
    out.shape = std::move(shape);
    out.data = xv.data;
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), g.requires_grad(x), [x, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        Tensor<Real>& gx = gg.scratch_grad(s, x);
        for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += go.data[i];
    });
}

template <typename Real>
Var flatten(Graph<Real>& g, Var x) {
    const Tensor<Real>& xv = g.value(x);
    if (xv.rank() < 2) throw InvalidShapeError("flatten: need at least a batch axis");
    return reshape(g, x, {xv.shape[0], static_cast<int>(xv.numel() / xv.shape[0])});
}

template <typename Real>
Var concat_channels(Graph<Real>& g, const std::vector<Var>& parts) {
    if (parts.empty()) throw InvalidConfigError("concat_channels: no inputs");
    const Tensor<Real>& first = g.value(parts[0]);
    if (first.rank() != 4) throw InvalidShapeError("concat_channels: inputs must be [N,C,H,W]");
    const int N = first.shape[0], H = first.shape[2], W = first.shape[3];
    int Ctot = 0;
    bool req = false;
    for (Var p : parts) {
        const Tensor<Real>& t = g.value(p);
        if (t.rank() != 4 || t.shape[0] != N || t.shape[2] != H || t.shape[3] != W)
            throw InvalidShapeError("concat_channels: mismatched shapes " + first.shape_str() + " vs " + t.shape_str());
        Ctot += t.shape[1];
        req = req || g.requires_grad(p);
    }
    Tensor<Real> out = Tensor<Real>::zeros({N, Ctot, H, W});
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        std::int64_t coff = 0;
        for (Var p : parts) {
            const Tensor<Real>& t = g.value(p);
            const int C = t.shape[1];
            std::copy_n(&t.data[static_cast<std::size_t>(n) * C * plane], static_cast<std::size_t>(C * plane),
                        &out.data[static_cast<std::size_t>((n * Ctot + coff) * plane)]);
            coff += C;
        }
    }
    Var outv{static_cast<int>(g.size())};
    std::vector<Var> held = parts;
    return g.make(std::move(out), req, [held, N, Ctot, plane, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        for (int n = 0; n < N; ++n) {
            std::int64_t coff = 0;
            for (Var p : held) {
                const int C = gg.value(p).shape[1];
                if (gg.requires_grad(p)) {
                    Tensor<Real>& gp = gg.scratch_grad(s, p);
                    const Real* src = &go.data[static_cast<std::size_t>((n * Ctot + coff) * plane)];
                    Real* dst = &gp.data[static_cast<std::size_t>(n) * C * plane];
                    for (std::int64_t i = 0; i < C * plane; ++i) dst[i] += src[i];
                }
                coff += C;
            }
        }
    });
}

// Same values, no gradient path back to the source.
template <typename Real>
Var detach(Graph<Real>& g, Var x) {
    return g.constant(g.value(x));
}

// Identity forward; backward multiplies the upstream gradient by -scale.
// Sits between features and discriminators in the generator objective.
template <typename Real>
Var grad_reverse(Graph<Real>& g, Var x, Real scale_coef) {
    Tensor<Real> out = g.value(x);
    Var outv{static_cast<int>(g.size())};
    return g.make(std::move(out), g.requires_grad(x), [x, scale_coef, outv](Graph<Real>& gg, typename Graph<Real>::GradStore& s) {
        const Tensor<Real>& go = gg.upstream(s, outv);
        Tensor<Real>& gx = gg.scratch_grad(s, x);
        for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] -= scale_coef * go.data[i];
    });
}

}  // namespace ops

}  // namespace mixskd
