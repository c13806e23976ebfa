#pragma once

#include <vector>

#include "mixskd/ops.hpp"
#include "mixskd/rng.hpp"
#include "mixskd/tensor.hpp"

namespace mixskd {

struct MixupConfig {
    double alpha = 0.4;
    bool per_batch_lambda = true;
};

// lambda ~ Beta(alpha, alpha), via the ratio of two Gamma(alpha) draws.
inline double sample_lambda(double alpha, Rng& rng) {
    if (alpha <= 0.0) throw InvalidConfigError("sample_lambda: alpha must be positive");
    const double g1 = rng.gamma(alpha);
    const double g2 = rng.gamma(alpha);
    const double s = g1 + g2;
    if (s <= 0.0) return 0.5;  // both draws underflowed
    double lam = g1 / s;
    if (lam < 0.0) lam = 0.0;
    if (lam > 1.0) lam = 1.0;
    return lam;
}

// Scalar-or-per-row lambda. Per-row mode carries one weight per batch entry.
template <typename Real>
struct LambdaSpec {
    Real scalar = Real(1);
    Tensor<Real> rows;  // [N] when per_sample
    bool per_sample = false;

    static LambdaSpec batch(Real lam) { return LambdaSpec{lam, {}, false}; }
    static LambdaSpec per_row(Tensor<Real> lams) { return LambdaSpec{Real(0), std::move(lams), true}; }

    Real row(int n) const { return per_sample ? rows.data[static_cast<std::size_t>(n)] : scalar; }
    double mean() const {
        if (!per_sample) return static_cast<double>(scalar);
        double acc = 0;
        for (Real v : rows.data) acc += static_cast<double>(v);
        return acc / static_cast<double>(rows.data.size());
    }
};

// One Mixup draw: the paired inputs, the mixing weight, and the virtual
// sample with its interpolated soft label.
template <typename Real>
struct MixBatch {
    Tensor<Real> xi, xj;
    std::vector<int> yi, yj;
    double lambda = 1.0;  // per-sample mode stores the batch mean here
    LambdaSpec<Real> lam;
    Tensor<Real> x_tilde;
    Tensor<Real> y_tilde;  // [N,C]
};

template <typename Real>
Tensor<Real> one_hot(const std::vector<int>& labels, int num_classes) {
    Tensor<Real> t = Tensor<Real>::zeros({static_cast<int>(labels.size()), num_classes});
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] < 0 || labels[n] >= num_classes) throw InvalidConfigError("one_hot: label out of range");
        t.at2(static_cast<int>(n), labels[n]) = Real(1);
    }
    return t;
}

template <typename Real>
MixBatch<Real> make_mix_batch(const Tensor<Real>& xi, const Tensor<Real>& xj, const std::vector<int>& yi,
                              const std::vector<int>& yj, LambdaSpec<Real> lam, int num_classes) {
    if (!xi.same_shape(xj)) throw InvalidShapeError("make_mix_batch: image shapes differ");
    if (xi.rank() < 1 || xi.shape[0] != static_cast<int>(yi.size()) || yi.size() != yj.size())
        throw InvalidShapeError("make_mix_batch: label counts do not match the batch extent");
    const int N = xi.shape[0];
    for (int n = 0; n < N; ++n) {
        const Real l = lam.row(n);
        if (!(l >= Real(0) && l <= Real(1))) throw InvalidConfigError("make_mix_batch: lambda outside [0,1]");
    }

    MixBatch<Real> mb;
    mb.xi = xi;
    mb.xj = xj;
    mb.yi = yi;
    mb.yj = yj;
    mb.lam = std::move(lam);
    mb.lambda = mb.lam.mean();

    mb.x_tilde = Tensor<Real>::zeros(xi.shape);
    const std::int64_t row = xi.numel() / N;
    for (int n = 0; n < N; ++n) {
        const Real a = mb.lam.row(n);
        const Real b = Real(1) - a;
        for (std::int64_t i = 0; i < row; ++i) {
            const std::size_t k = static_cast<std::size_t>(n * row + i);
            mb.x_tilde.data[k] = a * xi.data[k] + b * xj.data[k];
        }
    }

    mb.y_tilde = Tensor<Real>::zeros({N, num_classes});
    for (int n = 0; n < N; ++n) {
        if (yi[static_cast<std::size_t>(n)] < 0 || yi[static_cast<std::size_t>(n)] >= num_classes ||
            yj[static_cast<std::size_t>(n)] < 0 || yj[static_cast<std::size_t>(n)] >= num_classes)
            throw InvalidConfigError("make_mix_batch: label out of range");
        const Real a = mb.lam.row(n);
        mb.y_tilde.at2(n, yi[static_cast<std::size_t>(n)]) += a;
        mb.y_tilde.at2(n, yj[static_cast<std::size_t>(n)]) += Real(1) - a;
    }
    return mb;
}

template <typename Real>
MixBatch<Real> make_mix_batch(const Tensor<Real>& xi, const Tensor<Real>& xj, const std::vector<int>& yi,
                              const std::vector<int>& yj, Real lambda, int num_classes) {
    return make_mix_batch(xi, xj, yi, yj, LambdaSpec<Real>::batch(lambda), num_classes);
}

template <typename Real>
Var interpolate_logits(Graph<Real>& g, Var li, Var lj, const LambdaSpec<Real>& lam) {
    if (lam.per_sample) return ops::axpby_rows(g, lam.rows, li, lj);
    return ops::axpby(g, lam.scalar, li, Real(1) - lam.scalar, lj);
}

template <typename Real>
std::vector<Var> interpolate_features(Graph<Real>& g, const std::vector<Var>& fi, const std::vector<Var>& fj,
                                      const LambdaSpec<Real>& lam) {
    if (fi.size() != fj.size()) throw InvalidShapeError("interpolate_features: stage counts differ");
    std::vector<Var> out;
    out.reserve(fi.size());
    for (std::size_t k = 0; k < fi.size(); ++k) out.push_back(interpolate_logits(g, fi[k], fj[k], lam));
    return out;
}

}  // namespace mixskd
