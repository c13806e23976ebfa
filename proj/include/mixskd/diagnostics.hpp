#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "mixskd/gradcheck.hpp"
#include "mixskd/losses.hpp"
#include "mixskd/mixup.hpp"
#include "mixskd/network.hpp"

namespace mixskd {

struct CheckLine {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

namespace diag {

inline Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                                    double keepout = 0.0) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.data) {
        do {
            v = rng.uniform(lo, hi);
        } while (std::abs(v) < keepout);
    }
    return t;
}

// Sweeps every differentiable primitive with `instances` random cases each.
// detach and grad_reverse are excluded by definition: their declared
// gradients intentionally differ from the derivative of their values.
inline std::vector<CheckLine> primitive_gradchecks(int instances, double eps, double rel_tol, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<CheckLine> results;

    auto run = [&](const std::string& name,
                   const std::function<std::pair<Tensor<double>, std::function<Var(Graph<double>&, Var)>>(Rng&)>& gen) {
        CheckLine line{name, 0.0, true};
        for (int i = 0; i < instances; ++i) {
            auto [x0, builder] = gen(rng);
            GradCheckReport r = finite_diff_gradcheck<double>(builder, x0, eps, rel_tol);
            line.max_rel_err = std::max(line.max_rel_err, r.max_rel_err);
            line.pass = line.pass && r.pass;
        }
        results.push_back(std::move(line));
    };

    // scalarize through a random weighting so upstream grads are non-uniform
    auto weighted_sum = [](Graph<double>& g, Var v, const Tensor<double>& w) {
        return ops::sum(g, ops::mul(g, v, g.constant(w)));
    };

    run("conv2d/input", [&](Rng& r) {
        auto x = random_tensor({2, 3, 6, 6}, r);
        auto w = random_tensor({4, 3, 3, 3}, r);
        auto b = random_tensor({4}, r);
        auto out_w = random_tensor({2, 4, 3, 3}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             Var c = ops::conv2d(g, xv, g.constant(w), g.constant(b), 2, 1);
                             return weighted_sum(g, c, out_w);
                         })};
    });
    run("conv2d/weight", [&](Rng& r) {
        auto x = random_tensor({2, 3, 6, 6}, r);
        auto w = random_tensor({4, 3, 3, 3}, r);
        auto b = random_tensor({4}, r);
        auto out_w = random_tensor({2, 4, 6, 6}, r);
        return std::pair{w, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var wv) {
                             Var c = ops::conv2d(g, g.constant(x), wv, g.constant(b), 1, 1);
                             return weighted_sum(g, c, out_w);
                         })};
    });
    run("conv2d/bias", [&](Rng& r) {
        auto x = random_tensor({2, 3, 5, 5}, r);
        auto w = random_tensor({4, 3, 3, 3}, r);
        auto b = random_tensor({4}, r);
        auto out_w = random_tensor({2, 4, 5, 5}, r);
        return std::pair{b, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var bv) {
                             Var c = ops::conv2d(g, g.constant(x), g.constant(w), bv, 1, 1);
                             return weighted_sum(g, c, out_w);
                         })};
    });
    run("linear/input", [&](Rng& r) {
        auto x = random_tensor({3, 5}, r);
        auto w = random_tensor({4, 5}, r);
        auto b = random_tensor({4}, r);
        auto out_w = random_tensor({3, 4}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::linear(g, xv, g.constant(w), g.constant(b)), out_w);
                         })};
    });
    run("linear/weight", [&](Rng& r) {
        auto x = random_tensor({3, 5}, r);
        auto w = random_tensor({4, 5}, r);
        auto b = random_tensor({4}, r);
        auto out_w = random_tensor({3, 4}, r);
        return std::pair{w, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var wv) {
                             return weighted_sum(g, ops::linear(g, g.constant(x), wv, g.constant(b)), out_w);
                         })};
    });
    run("linear/bias", [&](Rng& r) {
        auto x = random_tensor({3, 5}, r);
        auto w = random_tensor({4, 5}, r);
        auto b = random_tensor({4}, r);
        auto out_w = random_tensor({3, 4}, r);
        return std::pair{b, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var bv) {
                             return weighted_sum(g, ops::linear(g, g.constant(x), g.constant(w), bv), out_w);
                         })};
    });
    run("relu", [&](Rng& r) {
        auto x = random_tensor({4, 7}, r, -1.0, 1.0, 1e-2);  // keep away from the kink
        auto out_w = random_tensor({4, 7}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::relu(g, xv), out_w);
                         })};
    });
    run("global_avg_pool", [&](Rng& r) {
        auto x = random_tensor({2, 3, 4, 4}, r);
        auto out_w = random_tensor({2, 3}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::global_avg_pool(g, xv), out_w);
                         })};
    });
    run("softmax_t", [&](Rng& r) {
        auto x = random_tensor({3, 5}, r, -2.0, 2.0);
        auto out_w = random_tensor({3, 5}, r);
        const double T = r.uniform(0.5, 4.0);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::softmax_t(g, xv, T), out_w);
                         })};
    });
    run("log_softmax_t", [&](Rng& r) {
        auto x = random_tensor({3, 5}, r, -2.0, 2.0);
        auto out_w = random_tensor({3, 5}, r);
        const double T = r.uniform(0.5, 4.0);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::log_softmax_t(g, xv, T), out_w);
                         })};
    });
    run("sigmoid", [&](Rng& r) {
        auto x = random_tensor({4, 6}, r, -3.0, 3.0);
        auto out_w = random_tensor({4, 6}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::sigmoid(g, xv), out_w);
                         })};
    });
    run("clamp", [&](Rng& r) {
        auto x = random_tensor({4, 6}, r, -2.0, 2.0, 1e-2);  // bounds at +-1, margin via keepout on |v|-1
        for (auto& v : x.data)
            if (std::abs(std::abs(v) - 1.0) < 5e-3) v *= 1.1;
        auto out_w = random_tensor({4, 6}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::clamp(g, xv, -1.0, 1.0), out_w);
                         })};
    });
    run("log", [&](Rng& r) {
        auto x = random_tensor({4, 6}, r, 0.1, 2.0);
        auto out_w = random_tensor({4, 6}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::log(g, xv), out_w);
                         })};
    });
    run("add", [&](Rng& r) {
        auto x = random_tensor({3, 4}, r);
        auto y = random_tensor({3, 4}, r);
        auto out_w = random_tensor({3, 4}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::add(g, xv, g.constant(y)), out_w);
                         })};
    });
    run("sub", [&](Rng& r) {
        auto x = random_tensor({3, 4}, r);
        auto y = random_tensor({3, 4}, r);
        auto out_w = random_tensor({3, 4}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::sub(g, g.constant(y), xv), out_w);
                         })};
    });
    run("mul", [&](Rng& r) {
        auto x = random_tensor({3, 4}, r);
        auto y = random_tensor({3, 4}, r);
        auto out_w = random_tensor({3, 4}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::mul(g, xv, g.constant(y)), out_w);
                         })};
    });
    run("affine", [&](Rng& r) {
        auto x = random_tensor({3, 4}, r);
        auto out_w = random_tensor({3, 4}, r);
        const double a = r.uniform(-2.0, 2.0), b = r.uniform(-1.0, 1.0);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::affine(g, xv, a, b), out_w);
                         })};
    });
    run("axpby", [&](Rng& r) {
        auto x = random_tensor({3, 4}, r);
        auto y = random_tensor({3, 4}, r);
        auto out_w = random_tensor({3, 4}, r);
        const double lam = r.uniform01();
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::axpby(g, lam, xv, 1.0 - lam, g.constant(y)), out_w);
                         })};
    });
    run("axpby_rows", [&](Rng& r) {
        auto x = random_tensor({3, 4}, r);
        auto y = random_tensor({3, 4}, r);
        auto lam = random_tensor({3}, r, 0.0, 1.0);
        auto out_w = random_tensor({3, 4}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::axpby_rows(g, lam, xv, g.constant(y)), out_w);
                         })};
    });
    run("concat_channels", [&](Rng& r) {
        auto x = random_tensor({2, 2, 3, 3}, r);
        auto y = random_tensor({2, 3, 3, 3}, r);
        auto out_w = random_tensor({2, 5, 3, 3}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::concat_channels(g, {xv, g.constant(y)}), out_w);
                         })};
    });
    run("reshape", [&](Rng& r) {
        auto x = random_tensor({2, 3, 2, 2}, r);
        auto out_w = random_tensor({2, 12}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return weighted_sum(g, ops::flatten(g, xv), out_w);
                         })};
    });
    run("sum", [&](Rng& r) {
        auto x = random_tensor({3, 4}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>(
                                [](Graph<double>& g, Var xv) { return ops::sum(g, xv); })};
    });
    run("mean", [&](Rng& r) {
        auto x = random_tensor({3, 4}, r);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>(
                                [](Graph<double>& g, Var xv) { return ops::mean(g, xv); })};
    });
    run("cross_entropy", [&](Rng& r) {
        auto x = random_tensor({3, 4}, r, -2.0, 2.0);
        std::vector<int> labels;
        for (int i = 0; i < 3; ++i) labels.push_back(static_cast<int>(r.below(4)));
        auto t = one_hot<double>(labels, 4);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return cross_entropy(g, xv, t);
                         })};
    });
    run("kl_div/student", [&](Rng& r) {
        auto x = random_tensor({3, 4}, r, -2.0, 2.0);
        auto teacher = random_tensor({3, 4}, r, -2.0, 2.0);
        const double T = r.uniform(0.5, 4.0);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return kl_div(g, xv, g.constant(teacher), T);
                         })};
    });
    run("kl_div/teacher", [&](Rng& r) {
        auto x = random_tensor({3, 4}, r, -2.0, 2.0);
        auto student = random_tensor({3, 4}, r, -2.0, 2.0);
        const double T = r.uniform(0.5, 4.0);
        return std::pair{x, std::function<Var(Graph<double>&, Var)>([=](Graph<double>& g, Var xv) {
                             return kl_div(g, g.constant(student), xv, T);
                         })};
    });
    return results;
}

// Fixed toy problem for whole-objective checks: 2-stage net, batch of two,
// fixed lambda. Targets of the stop-gradient terms are frozen at the base
// parameter point, matching the declared-differentiable-paths contract.
class Eq13Probe {
public:
    Eq13Probe() {
        NetArch arch;
        arch.stages = {{4, 1, false}, {6, 1, true}};
        arch.num_classes = 3;
        arch.disc_hidden = 4;
        arch.input_hw = 8;
        net_ = build_network<double>(arch, 7);

        Rng rng(derive_seed(11, 0xE013));
        Tensor<double> xi = random_tensor({2, 3, 8, 8}, rng, 0.05, 0.95);
        Tensor<double> xj = random_tensor({2, 3, 8, 8}, rng, 0.05, 0.95);
        mix_ = make_mix_batch<double>(xi, xj, {0, 1}, {1, 2}, 0.35, arch.num_classes);
        freeze_targets();
    }

    NetworkGraph<double>& net() { return net_; }

    static std::vector<std::string> component_names() {
        return {"cls_mixup", "feature", "dis", "b_logit", "cls_h", "f_logit", "total"};
    }

    // Frozen-target objective value at the current parameters.
    double eval(const std::string& name) {
        if (name == "total") {
            double total = eval("cls_mixup");
            total += weights_.beta * eval("feature");
            total += weights_.gamma * eval("dis");
            total += weights_.mu * (eval("b_logit") + eval("cls_h") + eval("f_logit"));
            return total;
        }
        Graph<double> g;
        BoundNet<double> bound(g, net_, BindOptions{false, false});
        return value_of(g, build_component(g, bound, name, true));
    }

    // Analytic gradient of the shipped training composition (with its
    // internal detach nodes), flattened over all parameters in visit order.
    std::vector<double> analytic_grad(const std::string& name) {
        net_.zero_grads();
        Graph<double> g;
        BoundNet<double> bound(g, net_, BindOptions{true, true});
        Var loss{};
        if (name == "total") {
            LossComponents<double> parts = build_all(g, bound, false);
            loss = total_loss(g, parts, weights_).value;
        } else {
            loss = build_component(g, bound, name, false);
        }
        g.backward(loss);
        bound.pull_grads();
        std::vector<double> flat;
        net_.visit_params([&](Param<double>& p) {
            for (double v : p.grad.data) flat.push_back(v);
        });
        return flat;
    }

    // Central-difference check over every parameter coordinate.
    CheckLine check(const std::string& name, double eps, double rel_tol, bool inject_fault = false) {
        std::vector<double> analytic = analytic_grad(name);
        if (inject_fault && !analytic.empty()) analytic[0] += 0.05;

        std::vector<double*> coords;
        net_.visit_params([&](Param<double>& p) {
            for (auto& v : p.value.data) coords.push_back(&v);
        });

        CheckLine line{name, 0.0, true};
        for (std::size_t i = 0; i < coords.size(); ++i) {
            const double keep = *coords[i];
            *coords[i] = keep + eps;
            const double fp = eval(name);
            *coords[i] = keep - eps;
            const double fm = eval(name);
            *coords[i] = keep;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[i];
            const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
            line.max_rel_err = std::max(line.max_rel_err, std::abs(a - numeric) / denom);
        }
        line.pass = line.max_rel_err <= rel_tol;
        return line;
    }

private:
    double value_of(Graph<double>& g, Var v) { return g.value(v).data[0]; }

    void freeze_targets() {
        Graph<double> g;
        BoundNet<double> bound(g, net_, BindOptions{false, false});
        TrainOutputs oi = bound.forward_train(g.constant(mix_.xi));
        TrainOutputs oj = bound.forward_train(g.constant(mix_.xj));
        TrainOutputs om = bound.forward_train(g.constant(mix_.x_tilde));
        for (std::size_t k = 0; k < oi.branch_logits.size(); ++k) {
            Var interp = interpolate_logits(g, oi.branch_logits[k], oj.branch_logits[k], mix_.lam);
            frozen_branch_interp_.push_back(g.value(interp));
            frozen_branch_mix_.push_back(g.value(om.branch_logits[k]));
        }
        std::vector<Var> f_tilde = interpolate_features(g, oi.features, oj.features, mix_.lam);
        frozen_h_tilde_ = g.value(bound.forward_teacher(f_tilde));
        frozen_h_mix_ = g.value(bound.forward_teacher(om.features));
    }

    LossComponents<double> build_all(Graph<double>& g, BoundNet<double>& bound, bool frozen) {
        LossComponents<double> parts;
        parts.cls_mixup = build_component(g, bound, "cls_mixup", frozen);
        parts.feature = build_component(g, bound, "feature", frozen);
        parts.dis = build_component(g, bound, "dis", frozen);
        parts.b_logit = build_component(g, bound, "b_logit", frozen);
        parts.cls_h = build_component(g, bound, "cls_h", frozen);
        parts.f_logit = build_component(g, bound, "f_logit", frozen);
        return parts;
    }

    Var build_component(Graph<double>& g, BoundNet<double>& bound, const std::string& name, bool frozen) {
        ClsMixupResult<double> cls = loss_cls_mixup(g, bound, mix_);
        if (name == "cls_mixup") return cls.loss;
        std::vector<Var> f_tilde = interpolate_features(g, cls.out_i.features, cls.out_j.features, mix_.lam);
        const std::vector<Var>& f_mix = cls.out_mix.features;
        if (name == "feature") return loss_feature(g, f_tilde, f_mix);
        if (name == "dis") return loss_dis(g, bound, f_tilde, f_mix);
        if (name == "b_logit") {
            if (!frozen)
                return loss_b_logit(g, cls.out_i.branch_logits, cls.out_j.branch_logits, cls.out_mix.branch_logits,
                                    mix_.lam, weights_.T, weights_.t2_scaling);
            Var total{};
            for (std::size_t k = 0; k < cls.out_i.branch_logits.size(); ++k) {
                Var interp = interpolate_logits(g, cls.out_i.branch_logits[k], cls.out_j.branch_logits[k], mix_.lam);
                Var a = kl_div(g, interp, g.constant(frozen_branch_mix_[k]), weights_.T, weights_.t2_scaling);
                Var b = kl_div(g, cls.out_mix.branch_logits[k], g.constant(frozen_branch_interp_[k]), weights_.T,
                               weights_.t2_scaling);
                Var term = ops::add(g, a, b);
                total = k == 0 ? term : ops::add(g, total, term);
            }
            return total;
        }
        if (name == "cls_h") return loss_cls_h(g, bound, f_tilde, f_mix, mix_.y_tilde).loss;
        if (name == "f_logit") {
            Var h_tilde = frozen ? g.constant(frozen_h_tilde_) : ops::detach(g, bound.forward_teacher(f_tilde));
            Var h_mix = frozen ? g.constant(frozen_h_mix_) : ops::detach(g, bound.forward_teacher(f_mix));
            return loss_f_logit(g, cls.out_i.backbone_logits, cls.out_j.backbone_logits, cls.out_mix.backbone_logits,
                                h_tilde, h_mix, mix_.lam, weights_.T, weights_.t2_scaling);
        }
        throw InvalidConfigError("unknown loss component '" + name + "'");
    }

    NetworkGraph<double> net_;
    MixBatch<double> mix_;
    LossWeights weights_;  // defaults: beta=gamma=mu=1, T=3
    std::vector<Tensor<double>> frozen_branch_interp_, frozen_branch_mix_;
    Tensor<double> frozen_h_tilde_, frozen_h_mix_;
};

inline std::vector<CheckLine> component_gradchecks(double eps, double rel_tol, const std::string& inject_fault = "") {
    Eq13Probe probe;
    std::vector<CheckLine> lines;
    for (const std::string& name : Eq13Probe::component_names())
        lines.push_back(probe.check(name, eps, rel_tol, name == inject_fault));
    return lines;
}

}  // namespace diag

}  // namespace mixskd
