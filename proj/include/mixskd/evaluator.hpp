#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "mixskd/data.hpp"
#include "mixskd/losses.hpp"
#include "mixskd/network.hpp"

namespace mixskd {

struct MissRateCurve {
    std::vector<double> lambdas;
    std::vector<double> miss_rate;
};

struct AttackReport {
    std::vector<double> epsilons;
    std::vector<double> accuracy;
    double clean_accuracy = 0.0;
};

struct LogProbHistogram {
    std::vector<double> bin_edges;         // bins+1 edges over [log(1e-7), 0]
    std::vector<std::int64_t> pred_counts;  // predicted-label log-probs
    std::vector<std::int64_t> true_counts;  // ground-truth-label log-probs
    std::int64_t misclassified = 0;
    bool empty = true;
};

namespace detail {

inline int eval_threads() {
    if (const char* env = std::getenv("MIXSKD_THREADS")) {
        const int v = std::atoi(env);
        if (v >= 1) return v;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

// Runs fn(first, last) over contiguous index ranges; results must be merged
// by the caller in range order so thread count never changes the outcome.
template <typename Fn>
void parallel_ranges(int total, int chunk, Fn&& fn) {
    std::vector<std::pair<int, int>> ranges;
    for (int start = 0; start < total; start += chunk) ranges.emplace_back(start, std::min(total, start + chunk));
    const int workers = std::min<int>(eval_threads(), static_cast<int>(ranges.size()));
    if (workers <= 1) {
        for (auto& [a, b] : ranges) fn(a, b);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= ranges.size()) return;
                fn(ranges[i].first, ranges[i].second);
            }
        });
    for (auto& t : pool) t.join();
}

template <typename Real>
std::vector<int> predict_batch(const InferenceNet<Real>& net, const Tensor<Real>& images) {
    const Tensor<Real> logits = net.infer(images);
    const int N = logits.shape[0], C = logits.shape[1];
    std::vector<int> pred(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        int best = 0;
        for (int c = 1; c < C; ++c)
            if (logits.at2(n, c) > logits.at2(n, best)) best = c;
        pred[static_cast<std::size_t>(n)] = best;
    }
    return pred;
}

template <typename Real>
std::vector<int> predict_all(const InferenceNet<Real>& net, const Dataset<Real>& ds, int batch = 128) {
    std::vector<int> pred(static_cast<std::size_t>(ds.size()));
    parallel_ranges(ds.size(), batch, [&](int first, int last) {
        std::vector<int> idx(static_cast<std::size_t>(last - first));
        for (int i = first; i < last; ++i) idx[static_cast<std::size_t>(i - first)] = i;
        auto p = predict_batch(net, gather_images(ds, idx));
        std::copy(p.begin(), p.end(), pred.begin() + first);
    });
    return pred;
}

}  // namespace detail

template <typename Real>
double top1_accuracy(const InferenceNet<Real>& net, const Dataset<Real>& ds) {
    ds.validate();
    if (ds.num_classes != net.arch.num_classes)
        throw InvalidConfigError("top1_accuracy: dataset classes " + std::to_string(ds.num_classes) +
                                 " != net classes " + std::to_string(net.arch.num_classes));
    const std::vector<int> pred = detail::predict_all(net, ds);
    std::int64_t hit = 0;
    for (int i = 0; i < ds.size(); ++i)
        if (pred[static_cast<std::size_t>(i)] == ds.labels[static_cast<std::size_t>(i)]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(ds.size());
}

// Fig. 3b protocol: random cross-class pairs, mixed at each grid lambda; a
// prediction is a miss when it lands outside {y_i, y_j}.
template <typename Real>
MissRateCurve miss_rate_curve(const InferenceNet<Real>& net, const Dataset<Real>& ds,
                              const std::vector<double>& lambda_grid, int pairs_per_point, Rng& rng) {
    ds.validate();
    for (double l : lambda_grid)
        if (l < 0.0 || l > 1.0) throw InvalidConfigError("miss_rate_curve: lambda grid outside [0,1]");
    if (pairs_per_point < 1) throw InvalidConfigError("miss_rate_curve: need at least one pair");

    // Cross-class pairs only; same-class pairs would reduce the miss to a
    // plain misclassification.
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<std::size_t>(pairs_per_point));
    for (int p = 0; p < pairs_per_point; ++p) {
        int a = static_cast<int>(rng.below(ds.size()));
        int b = static_cast<int>(rng.below(ds.size()));
        int guard = 0;
        while (ds.labels[static_cast<std::size_t>(b)] == ds.labels[static_cast<std::size_t>(a)] && guard++ < 1000)
            b = static_cast<int>(rng.below(ds.size()));
        if (ds.labels[static_cast<std::size_t>(a)] == ds.labels[static_cast<std::size_t>(b)])
            throw InvalidConfigError("miss_rate_curve: dataset appears single-class");
        pairs.emplace_back(a, b);
    }

    MissRateCurve curve;
    curve.lambdas = lambda_grid;
    std::sort(curve.lambdas.begin(), curve.lambdas.end());
    curve.miss_rate.resize(curve.lambdas.size(), 0.0);

    const int C = ds.images.shape[1], H = ds.images.shape[2], W = ds.images.shape[3];
    const std::int64_t row = static_cast<std::int64_t>(C) * H * W;
    for (std::size_t gi = 0; gi < curve.lambdas.size(); ++gi) {
        const Real lam = static_cast<Real>(curve.lambdas[gi]);
        std::vector<std::int64_t> misses_per_chunk((pairs.size() + 255) / 256, 0);
        detail::parallel_ranges(static_cast<int>(pairs.size()), 256, [&](int first, int last) {
            Tensor<Real> batch = Tensor<Real>::zeros({last - first, C, H, W});
            for (int p = first; p < last; ++p) {
                const auto [a, b] = pairs[static_cast<std::size_t>(p)];
                const Real* xa = &ds.images.data[static_cast<std::size_t>(a) * row];
                const Real* xb = &ds.images.data[static_cast<std::size_t>(b) * row];
                Real* dst = &batch.data[static_cast<std::size_t>(p - first) * row];
                for (std::int64_t i = 0; i < row; ++i) dst[i] = lam * xa[i] + (Real(1) - lam) * xb[i];
            }
            const std::vector<int> pred = detail::predict_batch(net, batch);
            std::int64_t misses = 0;
            for (int p = first; p < last; ++p) {
                const auto [a, b] = pairs[static_cast<std::size_t>(p)];
                const int yhat = pred[static_cast<std::size_t>(p - first)];
                if (yhat != ds.labels[static_cast<std::size_t>(a)] && yhat != ds.labels[static_cast<std::size_t>(b)]) ++misses;
            }
            misses_per_chunk[static_cast<std::size_t>(first / 256)] = misses;
        });
        std::int64_t total = 0;
        for (auto m : misses_per_chunk) total += m;
        curve.miss_rate[gi] = static_cast<double>(total) / static_cast<double>(pairs.size());
    }
    return curve;
}

// Single-step white-box attack: x_adv = clamp(x + eps * sign(dL/dx), 0, 1),
// evaluated on the pruned net. Epsilons are in normalized pixel units.
template <typename Real>
AttackReport fgsm_attack(const InferenceNet<Real>& net, const Dataset<Real>& ds, const std::vector<double>& epsilons) {
    ds.validate();
    for (double e : epsilons)
        if (e < 0.0) throw InvalidConfigError("fgsm_attack: epsilon must be non-negative");

    AttackReport report;
    report.epsilons = epsilons;
    report.clean_accuracy = top1_accuracy(net, ds);

    const int C = ds.images.shape[1], H = ds.images.shape[2], W = ds.images.shape[3];
    // Input gradients are shared across epsilons; compute once per batch.
    Tensor<Real> grads = Tensor<Real>::zeros(ds.images.shape);
    const std::int64_t row = static_cast<std::int64_t>(C) * H * W;
    detail::parallel_ranges(ds.size(), 64, [&](int first, int last) {
        std::vector<int> idx(static_cast<std::size_t>(last - first));
        std::vector<int> labels(static_cast<std::size_t>(last - first));
        for (int i = first; i < last; ++i) {
            idx[static_cast<std::size_t>(i - first)] = i;
            labels[static_cast<std::size_t>(i - first)] = ds.labels[static_cast<std::size_t>(i)];
        }
        Graph<Real> g;
        Var x = g.leaf(gather_images(ds, idx), true);
        Var logits = net.forward(g, x);
        Var loss = cross_entropy(g, logits, one_hot<Real>(labels, ds.num_classes));
        g.backward(loss);
        const Tensor<Real>& gx = g.grad(x);
        std::copy(gx.data.begin(), gx.data.end(), grads.data.begin() + static_cast<std::ptrdiff_t>(first) * row);
    });

    for (double eps : epsilons) {
        if (eps == 0.0) {
            report.accuracy.push_back(report.clean_accuracy);
            continue;
        }
        Dataset<Real> adv = ds;
        for (std::size_t i = 0; i < adv.images.data.size(); ++i) {
            const Real gv = grads.data[i];
            const Real sign = gv > Real(0) ? Real(1) : (gv < Real(0) ? Real(-1) : Real(0));
            Real v = adv.images.data[i] + static_cast<Real>(eps) * sign;
            adv.images.data[i] = std::min(Real(1), std::max(Real(0), v));
        }
        report.accuracy.push_back(top1_accuracy(net, adv));
    }
    return report;
}

// Fig. 3a protocol: histograms of log softmax probabilities (predicted and
// ground-truth label entries) over misclassified samples. The mask selects
// which samples count as misclassified; by default it is this net's own
// mistakes, intersection mode passes the conjunction of two nets' mistakes.
template <typename Real>
LogProbHistogram logprob_histogram(const InferenceNet<Real>& net, const Dataset<Real>& ds, int bins,
                                   const std::vector<bool>* mask = nullptr) {
    ds.validate();
    if (bins < 1) throw InvalidConfigError("logprob_histogram: bins must be >= 1");
    LogProbHistogram hist;
    const double lo = std::log(kProbClamp), hi = 0.0;
    hist.bin_edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int b = 0; b <= bins; ++b)
        hist.bin_edges[static_cast<std::size_t>(b)] = lo + (hi - lo) * b / bins;
    hist.pred_counts.assign(static_cast<std::size_t>(bins), 0);
    hist.true_counts.assign(static_cast<std::size_t>(bins), 0);

    auto bin_of = [&](double v) {
        const double clamped = std::min(hi, std::max(lo, v));
        int b = static_cast<int>((clamped - lo) / (hi - lo) * bins);
        return std::min(b, bins - 1);
    };

    detail::parallel_ranges(ds.size(), 128, [&, bins](int first, int last) {
        std::vector<int> idx(static_cast<std::size_t>(last - first));
        for (int i = first; i < last; ++i) idx[static_cast<std::size_t>(i - first)] = i;
        const Tensor<Real> logits = net.infer(gather_images(ds, idx));
        const Tensor<Real> probs = kernels::softmax_t_fwd(logits, Real(1));
        std::vector<std::int64_t> local_pred(static_cast<std::size_t>(bins), 0), local_true(static_cast<std::size_t>(bins), 0);
        std::int64_t local_miss = 0;
        const int C = logits.shape[1];
        for (int i = first; i < last; ++i) {
            const int n = i - first;
            int best = 0;
            for (int c = 1; c < C; ++c)
                if (logits.at2(n, c) > logits.at2(n, best)) best = c;
            const int truth = ds.labels[static_cast<std::size_t>(i)];
            const bool miss = mask ? (*mask)[static_cast<std::size_t>(i)] : best != truth;
            if (!miss || best == truth) continue;
            ++local_miss;
            local_pred[static_cast<std::size_t>(bin_of(std::log(std::max<double>(kProbClamp, probs.at2(n, best)))))]++;
            local_true[static_cast<std::size_t>(bin_of(std::log(std::max<double>(kProbClamp, probs.at2(n, truth)))))]++;
        }
        static std::mutex merge_mutex;
        std::lock_guard<std::mutex> lock(merge_mutex);
        hist.misclassified += local_miss;
        for (int b = 0; b < bins; ++b) {
            hist.pred_counts[static_cast<std::size_t>(b)] += local_pred[static_cast<std::size_t>(b)];
            hist.true_counts[static_cast<std::size_t>(b)] += local_true[static_cast<std::size_t>(b)];
        }
    });
    hist.empty = hist.misclassified == 0;
    return hist;
}

// Mask of samples misclassified by the net; used for intersection mode.
template <typename Real>
std::vector<bool> misclassified_mask(const InferenceNet<Real>& net, const Dataset<Real>& ds) {
    const std::vector<int> pred = detail::predict_all(net, ds);
    std::vector<bool> mask(static_cast<std::size_t>(ds.size()));
    for (int i = 0; i < ds.size(); ++i)
        mask[static_cast<std::size_t>(i)] = pred[static_cast<std::size_t>(i)] != ds.labels[static_cast<std::size_t>(i)];
    return mask;
}

}  // namespace mixskd
