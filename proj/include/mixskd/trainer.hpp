#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mixskd/data.hpp"
#include "mixskd/evaluator.hpp"
#include "mixskd/losses.hpp"
#include "mixskd/mixup.hpp"
#include "mixskd/network.hpp"

namespace mixskd {

enum class ScheduleKind { Step, Cosine };
enum class AdversarialMode { Simultaneous, Alternating };

struct ScheduleConfig {
    ScheduleKind kind = ScheduleKind::Step;
    std::vector<int> milestones{18, 25};  // epochs at which lr is multiplied by factor
    double factor = 0.1;
};

struct AblationFlags {
    bool mixup = true;  // off = plain cross-entropy baseline (backbone only)
    bool feature = true;
    bool dis = true;
    bool b_logit = true;
    bool h = true;
    bool f_logit = true;

    bool any_selfkd() const { return feature || dis || b_logit || h || f_logit; }
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 64;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int warmup_epochs = 2;
    ScheduleConfig schedule;
    double alpha = 0.4;
    bool per_batch_lambda = true;
    LossWeights weights;
    AblationFlags flags;
    std::uint64_t seed = 1;
    double grl_scale = 1.0;
    AdversarialMode adversarial_mode = AdversarialMode::Simultaneous;
    bool teacher_grad_to_features = true;
    bool augment = false;
    int checkpoint_every = 1;  // epochs; 0 disables periodic checkpoints

    void validate() const {
        if (epochs < 0) throw InvalidConfigError("train: epochs must be >= 0");
        if (batch_size < 1) throw InvalidConfigError("train: batch_size must be positive");
        if (!(lr > 0.0)) throw InvalidConfigError("train: lr must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidConfigError("train: momentum must be in [0,1)");
        if (weight_decay < 0.0) throw InvalidConfigError("train: weight_decay must be >= 0");
        if (warmup_epochs < 0 || (epochs > 0 && warmup_epochs >= epochs))
            throw InvalidConfigError("train: warmup_epochs must be < epochs");
        if (!(alpha > 0.0)) throw InvalidConfigError("train: alpha must be positive");
        if (schedule.factor <= 0.0) throw InvalidConfigError("train: decay factor must be positive");
        weights.validate();
    }

    std::string method_tag() const {
        if (!flags.mixup) return "ce-baseline";
        if (!flags.any_selfkd()) return "mixup-baseline";
        return "mixskd";
    }
};

// Per-parameter momentum buffers, zero on first touch.
template <typename Real>
struct SgdState {
    std::unordered_map<const Param<Real>*, Tensor<Real>> velocity;

    Tensor<Real>& velocity_for(const Param<Real>& p) {
        auto it = velocity.find(&p);
        if (it == velocity.end()) it = velocity.emplace(&p, Tensor<Real>::zeros(p.value.shape)).first;
        return it->second;
    }
};

// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v
template <typename Real>
void sgd_step(const std::vector<Param<Real>*>& params, SgdState<Real>& state, double lr, double momentum,
              double weight_decay) {
    for (Param<Real>* p : params) {
        if (p->grad.shape != p->value.shape) throw InvalidShapeError("sgd_step: grad/param shape mismatch");
        Tensor<Real>& v = state.velocity_for(*p);
        for (std::size_t i = 0; i < v.data.size(); ++i) {
            v.data[i] = static_cast<Real>(momentum) * v.data[i] + p->grad.data[i] +
                        static_cast<Real>(weight_decay) * p->value.data[i];
            p->value.data[i] -= static_cast<Real>(lr) * v.data[i];
        }
    }
}

// Linear warmup from 0 to lr over warmup_epochs, then step decay or cosine.
inline double lr_at(long step, int steps_per_epoch, const TrainConfig& cfg) {
    if (step < 0) throw InvalidConfigError("lr_at: negative step");
    const long warmup_steps = static_cast<long>(cfg.warmup_epochs) * steps_per_epoch;
    if (warmup_steps > 0 && step < warmup_steps)
        return cfg.lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (cfg.schedule.kind == ScheduleKind::Cosine) {
        const long total = static_cast<long>(cfg.epochs) * steps_per_epoch;
        if (total <= warmup_steps) return cfg.lr;
        const double progress =
            std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(total - warmup_steps));
        return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    }
    const int epoch = steps_per_epoch > 0 ? static_cast<int>(step / steps_per_epoch) : 0;
    double lr = cfg.lr;
    for (int m : cfg.schedule.milestones)
        if (epoch >= m) lr *= cfg.schedule.factor;
    return lr;
}

// Named gradient snapshots taken between the generator and discriminator
// backward passes; lets tests assert the two updates never cross.
template <typename Real>
struct StepDiagnostics {
    std::map<std::string, Tensor<Real>> generator_grads;
    std::map<std::string, Tensor<Real>> discriminator_grads;
};

namespace detail {

template <typename Real>
std::vector<Param<Real>*> generator_params(NetworkGraph<Real>& net) {
    std::vector<Param<Real>*> out;
    net.visit_generator_params([&](Param<Real>& p) { out.push_back(&p); });
    return out;
}

template <typename Real>
std::vector<Param<Real>*> discriminator_params(NetworkGraph<Real>& net) {
    std::vector<Param<Real>*> out;
    net.visit_discriminator_params([&](Param<Real>& p) { out.push_back(&p); });
    return out;
}

// Backbone path only: stem, stages, fc. The cross-entropy baseline updates
// just these so auxiliary components stay at their initialization.
template <typename Real>
std::vector<Param<Real>*> backbone_params(NetworkGraph<Real>& net) {
    std::vector<Param<Real>*> out;
    auto add_conv = [&](mixskd::detail::ConvLayer<Real>& c) {
        out.push_back(&c.w);
        out.push_back(&c.b);
    };
    add_conv(net.stem);
    for (auto& stage : net.stage_blocks)
        for (auto& blk : stage) add_conv(blk);
    out.push_back(&net.fc.w);
    out.push_back(&net.fc.b);
    return out;
}

}  // namespace detail

struct StepContext {
    long step = 0;
    int epoch = 0;
    int steps_per_epoch = 1;
};

// One optimization step: draw lambda, build the MixBatch, run the three
// forwards, assemble the enabled Eq. (13) terms, then apply the two-sided
// update. The discriminators minimize the Eq. (8) value on detached
// features; the features receive the reversed gradient through a
// grad_reverse junction inside the generator total. Both gradients are
// taken at the same parameter state and applied together.
template <typename Real>
LossReport train_step(NetworkGraph<Real>& net, SgdState<Real>& opt, const PairBatch<Real>& pair,
                      const TrainConfig& cfg, Rng& rng, const StepContext& ctx,
                      StepDiagnostics<Real>* diag = nullptr) {
    cfg.weights.validate();
    const int C = net.arch.num_classes;
    const int N = pair.xi.shape[0];

    LambdaSpec<Real> lam;
    if (cfg.flags.mixup) {
        if (cfg.per_batch_lambda) {
            lam = LambdaSpec<Real>::batch(static_cast<Real>(sample_lambda(cfg.alpha, rng)));
        } else {
            Tensor<Real> rows = Tensor<Real>::zeros({N});
            for (auto& v : rows.data) v = static_cast<Real>(sample_lambda(cfg.alpha, rng));
            lam = LambdaSpec<Real>::per_row(std::move(rows));
        }
    } else {
        lam = LambdaSpec<Real>::batch(Real(1));
    }

    const double lr = lr_at(ctx.step, ctx.steps_per_epoch, cfg);
    net.zero_grads();

    if (!cfg.flags.mixup) {
        // Plain backbone cross-entropy; auxiliary components stay untouched.
        Graph<Real> g;
        BoundNet<Real> bound(g, net, BindOptions{true, false});
        TrainOutputs outs = bound.forward_train(g.constant(pair.xi));
        Var loss = cross_entropy(g, outs.backbone_logits, one_hot<Real>(pair.yi, C));
        LossComponents<Real> parts;
        parts.cls_mixup = loss;
        TotalLoss<Real> total = total_loss(g, parts, cfg.weights);
        g.backward(total.value);
        bound.pull_grads();
        if (diag) {
            net.visit_params([&](Param<Real>& p) { diag->generator_grads.emplace(p.name, p.grad); });
            net.visit_params([&](Param<Real>& p) {
                diag->discriminator_grads.emplace(p.name, Tensor<Real>::zeros(p.value.shape));
            });
        }
        auto backbone = detail::backbone_params(net);
        sgd_step(backbone, opt, lr, cfg.momentum, cfg.weight_decay);
        total.report.lambda = 1.0;
        total.report.lr = lr;
        total.report.step = ctx.step;
        return total.report;
    }

    MixBatch<Real> mix = make_mix_batch(pair.xi, pair.xj, pair.yi, pair.yj, lam, C);

    Graph<Real> g;
    BoundNet<Real> gen(g, net, BindOptions{true, false});

    ClsMixupResult<Real> cls = loss_cls_mixup(g, gen, mix);
    std::vector<Var> f_tilde = interpolate_features(g, cls.out_i.features, cls.out_j.features, mix.lam);
    const std::vector<Var>& f_mix = cls.out_mix.features;

    LossComponents<Real> parts;
    parts.cls_mixup = cls.loss;
    if (cfg.flags.feature) parts.feature = loss_feature(g, f_tilde, f_mix);
    if (cfg.flags.dis) {
        std::vector<Var> rev_tilde, rev_mix;
        for (Var f : f_tilde) rev_tilde.push_back(ops::grad_reverse(g, f, static_cast<Real>(cfg.grl_scale)));
        for (Var f : f_mix) rev_mix.push_back(ops::grad_reverse(g, f, static_cast<Real>(cfg.grl_scale)));
        parts.dis = loss_dis(g, gen, rev_tilde, rev_mix);
    }
    if (cfg.flags.b_logit)
        parts.b_logit = loss_b_logit(g, cls.out_i.branch_logits, cls.out_j.branch_logits, cls.out_mix.branch_logits,
                                     mix.lam, static_cast<Real>(cfg.weights.T), cfg.weights.t2_scaling);
    Var h_tilde{}, h_mix{};
    if (cfg.flags.h) {
        ClsTeacherResult<Real> teacher = loss_cls_h(g, gen, f_tilde, f_mix, mix.y_tilde, cfg.teacher_grad_to_features);
        parts.cls_h = teacher.loss;
        h_tilde = teacher.h_tilde;
        h_mix = teacher.h_mix;
    } else if (cfg.flags.f_logit) {
        h_tilde = gen.forward_teacher(f_tilde);
        h_mix = gen.forward_teacher(f_mix);
    }
    if (cfg.flags.f_logit)
        parts.f_logit = loss_f_logit(g, cls.out_i.backbone_logits, cls.out_j.backbone_logits,
                                     cls.out_mix.backbone_logits, ops::detach(g, h_tilde), ops::detach(g, h_mix),
                                     mix.lam, static_cast<Real>(cfg.weights.T), cfg.weights.t2_scaling);

    TotalLoss<Real> total = total_loss(g, parts, cfg.weights);
    g.backward(total.value);
    gen.pull_grads();

    if (diag)
        net.visit_params([&](Param<Real>& p) { diag->generator_grads.emplace(p.name, p.grad); });

    // Discriminator pass: Eq. (8) on detached features, discriminator
    // parameters live, everything else frozen.
    const bool disc_active =
        cfg.flags.dis && (cfg.adversarial_mode == AdversarialMode::Simultaneous || ctx.epoch % 2 == 0);
    if (disc_active) {
        BoundNet<Real> disc(g, net, BindOptions{false, true});
        std::vector<Var> det_tilde, det_mix;
        for (Var f : f_tilde) det_tilde.push_back(ops::detach(g, f));
        for (Var f : f_mix) det_mix.push_back(ops::detach(g, f));
        Var d_loss = loss_dis(g, disc, det_tilde, det_mix);
        g.backward(d_loss);
        disc.pull_grads();
    }

    if (diag)
        net.visit_params([&](Param<Real>& p) {
            Tensor<Real> delta = p.grad;
            auto it = diag->generator_grads.find(p.name);
            for (std::size_t i = 0; i < delta.data.size(); ++i) delta.data[i] -= it->second.data[i];
            diag->discriminator_grads.emplace(p.name, std::move(delta));
        });

    auto gen_params = detail::generator_params(net);
    sgd_step(gen_params, opt, lr, cfg.momentum, cfg.weight_decay);
    if (disc_active) {
        auto disc_params = detail::discriminator_params(net);
        sgd_step(disc_params, opt, lr, cfg.momentum, cfg.weight_decay);
    }

    total.report.lambda = mix.lam.mean();
    total.report.lr = lr;
    total.report.step = ctx.step;
    return total.report;
}

struct EpochRecord {
    int epoch = 0;
    double test_accuracy = -1.0;  // -1 when no test split was provided
};

struct FitSinks {
    std::function<void(const LossReport&)> on_step;
    std::function<void(const EpochRecord&)> on_epoch;
    std::function<void(int /*epoch*/)> on_checkpoint;
};

struct FitResult {
    long steps = 0;
    double final_test_accuracy = -1.0;
    double final_train_accuracy = -1.0;
};

// Full optimization loop; deterministic for a fixed (seed, config, data).
template <typename Real>
FitResult fit(NetworkGraph<Real>& net, const Dataset<Real>& train, const Dataset<Real>* test, const TrainConfig& cfg,
              const FitSinks& sinks = {}) {
    cfg.validate();
    train.validate();
    if (train.num_classes != net.arch.num_classes)
        throw InvalidConfigError("fit: dataset classes do not match the network");

    Rng rng(derive_seed(cfg.seed, 0x57E9));
    SgdState<Real> opt;
    const int steps_per_epoch = train.size() / cfg.batch_size;
    if (cfg.epochs > 0 && steps_per_epoch == 0)
        throw InvalidConfigError("fit: batch_size exceeds the dataset size");

    FitResult result;
    StepContext ctx;
    ctx.steps_per_epoch = steps_per_epoch;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        ctx.epoch = epoch;
        EpochPairs<Real> pairs(train, cfg.batch_size, rng, cfg.augment);
        PairBatch<Real> pb;
        while (pairs.next(pb)) {
            LossReport report = train_step(net, opt, pb, cfg, rng, ctx);
            if (sinks.on_step) sinks.on_step(report);
            ++ctx.step;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        if (test) {
            InferenceNet<Real> pruned = prune_for_inference(net);
            rec.test_accuracy = top1_accuracy(pruned, *test);
        }
        if (sinks.on_epoch) sinks.on_epoch(rec);
        if (sinks.on_checkpoint && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
            sinks.on_checkpoint(epoch);
    }
    result.steps = ctx.step;
    {
        InferenceNet<Real> pruned = prune_for_inference(net);
        result.final_train_accuracy = top1_accuracy(pruned, train);
        if (test) result.final_test_accuracy = top1_accuracy(pruned, *test);
    }
    return result;
}

}  // namespace mixskd
