#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mixskd/mixup.hpp"
#include "mixskd/network.hpp"
#include "mixskd/ops.hpp"

namespace mixskd {

inline constexpr double kProbClamp = 1e-7;

struct LossWeights {
    double beta = 1.0;
    double gamma = 1.0;
    double mu = 1.0;
    double T = 3.0;
    bool t2_scaling = true;  // multiply KL terms by T^2

    void validate() const {
        if (!(T > 0.0)) throw InvalidConfigError("weights: temperature must be positive");
        if (!(beta >= 0.0) || !(gamma >= 0.0) || !(mu >= 0.0) || !std::isfinite(beta) || !std::isfinite(gamma) ||
            !std::isfinite(mu))
            throw InvalidConfigError("weights: beta/gamma/mu must be finite and non-negative");
    }
};

struct LossReport {
    double cls_mixup = 0.0;
    double feature = 0.0;
    double dis = 0.0;
    double b_logit = 0.0;
    double cls_h = 0.0;
    double f_logit = 0.0;
    double total = 0.0;
    double lambda = 1.0;
    double lr = 0.0;
    long step = 0;
};

// Mean over the batch of -sum_c target_c * log softmax(logits)_c.
// Targets are constant rows summing to 1 (one-hot or mixed).
template <typename Real>
Var cross_entropy(Graph<Real>& g, Var logits, const Tensor<Real>& targets) {
    const Tensor<Real>& lv = g.value(logits);
    if (lv.rank() != 2) throw InvalidShapeError("cross_entropy: logits must be [N,C]");
    if (targets.shape != lv.shape)
        throw InvalidShapeError("cross_entropy: targets " + targets.shape_str() + " vs logits " + lv.shape_str());
    for (Real v : lv.data)
        if (std::isnan(static_cast<double>(v))) throw EvaluationError("cross_entropy: NaN logits");
    const int N = lv.shape[0];
    Var ls = ops::log_softmax_t(g, logits, Real(1));
    Var weighted = ops::mul(g, ls, g.constant(targets));
    return ops::scale(g, ops::sum(g, weighted), Real(-1) / static_cast<Real>(N));
}

// Mean over the batch of KL(softmax(teacher/T) || softmax(student/T)),
// scaled by T^2 when t2_scaling is on. The detached (target) side is always
// the second argument; the caller controls whether gradient reaches it.
template <typename Real>
Var kl_div(Graph<Real>& g, Var student_logits, Var teacher_logits, Real T, bool t2_scaling = true) {
    if (!(T > Real(0))) throw InvalidConfigError("kl_div: temperature must be positive");
    const Tensor<Real>& sv = g.value(student_logits);
    const Tensor<Real>& tv = g.value(teacher_logits);
    if (sv.rank() != 2 || sv.shape != tv.shape)
        throw InvalidShapeError("kl_div: logits " + sv.shape_str() + " vs " + tv.shape_str());
    const int N = sv.shape[0];
    Var ls_student = ops::log_softmax_t(g, student_logits, T);
    Var ls_teacher = ops::log_softmax_t(g, teacher_logits, T);
    Var p_teacher = ops::softmax_t(g, teacher_logits, T);
    Var diff = ops::sub(g, ls_teacher, ls_student);
    Var weighted = ops::mul(g, p_teacher, diff);
    Real coef = Real(1) / static_cast<Real>(N);
    if (t2_scaling) coef *= T * T;
    return ops::scale(g, ops::sum(g, weighted), coef);
}

// L_cls_b_f: cross-entropy through the backbone and every auxiliary branch.
template <typename Real>
Var classification_loss(Graph<Real>& g, const TrainOutputs& outs, const Tensor<Real>& targets) {
    Var total = cross_entropy(g, outs.backbone_logits, targets);
    for (Var bl : outs.branch_logits) total = ops::add(g, total, cross_entropy(g, bl, targets));
    return total;
}

template <typename Real>
struct ClsMixupResult {
    Var loss;
    TrainOutputs out_i, out_j, out_mix;
};

// Task loss over (x_i, y_i), (x_j, y_j) and the mixup image; the three
// forward bundles are returned for reuse by every other loss term.
template <typename Real>
ClsMixupResult<Real> loss_cls_mixup(Graph<Real>& g, BoundNet<Real>& net, const MixBatch<Real>& mix) {
    ClsMixupResult<Real> r;
    r.out_i = net.forward_train(g.constant(mix.xi));
    r.out_j = net.forward_train(g.constant(mix.xj));
    r.out_mix = net.forward_train(g.constant(mix.x_tilde));
    const int C = mix.y_tilde.shape[1];
    Var li = classification_loss(g, r.out_i, one_hot<Real>(mix.yi, C));
    Var lj = classification_loss(g, r.out_j, one_hot<Real>(mix.yj, C));
    Var lm = classification_loss(g, r.out_mix, mix.y_tilde);
    r.loss = ops::add(g, ops::add(g, li, lj), lm);
    return r;
}

// Per-stage squared l2 distance between interpolated and mixup features,
// normalized per element and averaged over the batch.
template <typename Real>
Var loss_feature(Graph<Real>& g, const std::vector<Var>& f_tilde, const std::vector<Var>& f_mix) {
    if (f_tilde.size() != f_mix.size() || f_tilde.empty())
        throw InvalidShapeError("loss_feature: stage counts differ");
    Var total{};
    for (std::size_t k = 0; k < f_tilde.size(); ++k) {
        ops::require_same_shape(g, f_tilde[k], f_mix[k], "loss_feature");
        const Tensor<Real>& fv = g.value(f_tilde[k]);
        if (fv.rank() != 4) throw InvalidShapeError("loss_feature: features must be [N,C,H,W]");
        Var diff = ops::sub(g, f_tilde[k], f_mix[k]);
        Var sq = ops::mul(g, diff, diff);
        // mean over batch and the HWC normalization of Eq. (7) in one shot
        Var term = ops::mean(g, sq);
        total = k == 0 ? term : ops::add(g, total, term);
    }
    return total;
}

// Eq. (8), batch-averaged, with probabilities clamped before the logs.
// Callers choose what the discriminators see: detached features for the
// discriminator update, gradient-reversed features for the generator.
template <typename Real>
Var loss_dis(Graph<Real>& g, BoundNet<Real>& net, const std::vector<Var>& f_tilde, const std::vector<Var>& f_mix) {
    const int K = net.net().arch.K();
    if (static_cast<int>(f_tilde.size()) != K || static_cast<int>(f_mix.size()) != K)
        throw InvalidConfigError("loss_dis: expected " + std::to_string(K) + " feature maps");
    Var total{};
    for (int k = 0; k < K; ++k) {
        Var d_tilde = net.forward_discriminator(k + 1, f_tilde[static_cast<std::size_t>(k)]);
        Var d_mix = net.forward_discriminator(k + 1, f_mix[static_cast<std::size_t>(k)]);
        Var log_real = ops::log(g, ops::clamp(g, d_tilde, Real(kProbClamp), Real(1.0 - kProbClamp)));
        Var one_minus = ops::affine(g, d_mix, Real(-1), Real(1));
        Var log_fake = ops::log(g, ops::clamp(g, one_minus, Real(kProbClamp), Real(1.0 - kProbClamp)));
        Var term = ops::scale(g, ops::add(g, ops::mean(g, log_real), ops::mean(g, log_fake)), Real(-1));
        total = k == 0 ? term : ops::add(g, total, term);
    }
    return total;
}

// Eq. (10): symmetric temperature-scaled KL between interpolated branch
// logits and mixup branch logits, each direction against a detached copy of
// the other side.
template <typename Real>
Var loss_b_logit(Graph<Real>& g, const std::vector<Var>& branch_i, const std::vector<Var>& branch_j,
                 const std::vector<Var>& branch_mix, const LambdaSpec<Real>& lam, Real T, bool t2_scaling = true) {
    if (branch_i.size() != branch_j.size() || branch_i.size() != branch_mix.size())
        throw InvalidShapeError("loss_b_logit: branch counts differ");
    if (branch_i.empty()) throw InvalidConfigError("loss_b_logit: no auxiliary branches");
    Var total{};
    for (std::size_t k = 0; k < branch_i.size(); ++k) {
        Var interp = interpolate_logits(g, branch_i[k], branch_j[k], lam);
        Var term_a = kl_div(g, interp, ops::detach(g, branch_mix[k]), T, t2_scaling);
        Var term_b = kl_div(g, branch_mix[k], ops::detach(g, interp), T, t2_scaling);
        Var term = ops::add(g, term_a, term_b);
        total = k == 0 ? term : ops::add(g, total, term);
    }
    return total;
}

template <typename Real>
struct ClsTeacherResult {
    Var loss;
    Var h_tilde;  // h(x_i, x_j): teacher on interpolated features
    Var h_mix;    // h(x~_ij): teacher on mixup-image features
};

// Eq. (11): the self-teacher is trained on both feature ensembles against
// the interpolated label. grad_to_features=false detaches the features so
// only teacher parameters learn.
template <typename Real>
ClsTeacherResult<Real> loss_cls_h(Graph<Real>& g, BoundNet<Real>& net, const std::vector<Var>& f_tilde,
                                  const std::vector<Var>& f_mix, const Tensor<Real>& y_tilde,
                                  bool grad_to_features = true) {
    auto maybe_detach = [&](const std::vector<Var>& fs) {
        if (grad_to_features) return fs;
        std::vector<Var> detached;
        detached.reserve(fs.size());
        for (Var f : fs) detached.push_back(ops::detach(g, f));
        return detached;
    };
    ClsTeacherResult<Real> r;
    r.h_tilde = net.forward_teacher(maybe_detach(f_tilde));
    r.h_mix = net.forward_teacher(maybe_detach(f_mix));
    r.loss = ops::add(g, cross_entropy(g, r.h_tilde, y_tilde), cross_entropy(g, r.h_mix, y_tilde));
    return r;
}

// Eq. (12): the teacher's mixup logits supervise the interpolated backbone
// logits and vice versa. Teacher logits arrive already detached.
template <typename Real>
Var loss_f_logit(Graph<Real>& g, Var f_i, Var f_j, Var f_mix, Var h_tilde_detached, Var h_mix_detached,
                 const LambdaSpec<Real>& lam, Real T, bool t2_scaling = true) {
    Var f_interp = interpolate_logits(g, f_i, f_j, lam);
    Var term_a = kl_div(g, f_interp, h_mix_detached, T, t2_scaling);
    Var term_b = kl_div(g, f_mix, h_tilde_detached, T, t2_scaling);
    return ops::add(g, term_a, term_b);
}

template <typename Real>
struct LossComponents {
    std::optional<Var> cls_mixup, feature, dis, b_logit, cls_h, f_logit;
};

template <typename Real>
struct TotalLoss {
    Var value;
    LossReport report;
};

// Weighted Eq. (13) combination. Absent components contribute zero; any NaN
// component aborts with its name.
template <typename Real>
TotalLoss<Real> total_loss(Graph<Real>& g, const LossComponents<Real>& parts, const LossWeights& weights) {
    weights.validate();
    TotalLoss<Real> out;
    auto component_value = [&](const std::optional<Var>& v, const char* name) {
        if (!v.has_value()) return 0.0;
        const double val = static_cast<double>(g.value(*v).data[0]);
        if (std::isnan(val)) throw EvaluationError(std::string("loss component '") + name + "' is NaN");
        return val;
    };
    out.report.cls_mixup = component_value(parts.cls_mixup, "cls_mixup");
    out.report.feature = component_value(parts.feature, "feature");
    out.report.dis = component_value(parts.dis, "dis");
    out.report.b_logit = component_value(parts.b_logit, "b_logit");
    out.report.cls_h = component_value(parts.cls_h, "cls_h");
    out.report.f_logit = component_value(parts.f_logit, "f_logit");
    out.report.total = out.report.cls_mixup + weights.beta * out.report.feature + weights.gamma * out.report.dis +
                       weights.mu * (out.report.b_logit + out.report.cls_h + out.report.f_logit);

    Var acc{};
    bool have = false;
    auto accumulate = [&](const std::optional<Var>& v, double w) {
        if (!v.has_value() || w == 0.0) return;
        Var scaled = w == 1.0 ? *v : ops::scale(g, *v, static_cast<Real>(w));
        acc = have ? ops::add(g, acc, scaled) : scaled;
        have = true;
    };
    accumulate(parts.cls_mixup, 1.0);
    accumulate(parts.feature, weights.beta);
    accumulate(parts.dis, weights.gamma);
    accumulate(parts.b_logit, weights.mu);
    accumulate(parts.cls_h, weights.mu);
    accumulate(parts.f_logit, weights.mu);
    out.value = have ? acc : g.constant(Tensor<Real>::scalar(Real(0)));
    return out;
}

}  // namespace mixskd
