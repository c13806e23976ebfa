#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mixskd/ops.hpp"
#include "mixskd/rng.hpp"

namespace mixskd {

// One backbone stage: `blocks` conv3x3+ReLU blocks at out_channels, the
// first one stride-2 when downsample is set.
struct StageSpec {
    int out_channels = 0;
    int blocks = 1;
    bool downsample = false;
};

template <typename Real>
struct Param {
    std::string name;
    Tensor<Real> value;
    Tensor<Real> grad;

    void zero_grad() {
        if (grad.shape != value.shape) grad = Tensor<Real>::zeros(value.shape);
        grad.fill(Real(0));
    }
};

namespace detail {

template <typename Real>
struct ConvLayer {
    int in_ch = 0, out_ch = 0, kernel = 3, stride = 1, padding = 1;
    Param<Real> w, b;
};

template <typename Real>
struct LinearLayer {
    int in_dim = 0, out_dim = 0;
    Param<Real> w, b;
};

template <typename Real>
void init_conv(ConvLayer<Real>& layer, const std::string& name, Rng& rng) {
    layer.w.name = name + ".weight";
    layer.b.name = name + ".bias";
    layer.w.value = Tensor<Real>::zeros({layer.out_ch, layer.in_ch, layer.kernel, layer.kernel});
    layer.b.value = Tensor<Real>::zeros({layer.out_ch});
    const double std_dev = std::sqrt(2.0 / (static_cast<double>(layer.in_ch) * layer.kernel * layer.kernel));
    for (auto& v : layer.w.value.data) v = static_cast<Real>(rng.normal(0.0, std_dev));
    layer.w.zero_grad();
    layer.b.zero_grad();
}

template <typename Real>
void init_linear(LinearLayer<Real>& layer, const std::string& name, Rng& rng) {
    layer.w.name = name + ".weight";
    layer.b.name = name + ".bias";
    layer.w.value = Tensor<Real>::zeros({layer.out_dim, layer.in_dim});
    layer.b.value = Tensor<Real>::zeros({layer.out_dim});
    const double std_dev = std::sqrt(2.0 / static_cast<double>(layer.in_dim));
    for (auto& v : layer.w.value.data) v = static_cast<Real>(rng.normal(0.0, std_dev));
    layer.w.zero_grad();
    layer.b.zero_grad();
}

}  // namespace detail

// Structural description shared by full and pruned graphs; also the
// checkpoint metadata.
struct NetArch {
    std::vector<StageSpec> stages;
    int num_classes = 0;
    int disc_hidden = 128;
    int input_hw = 16;
    int in_channels = 3;
    bool residual = false;

    int K() const { return static_cast<int>(stages.size()); }

    int feature_hw() const {
        int hw = input_hw;  // stem is stride 1
        for (const auto& s : stages)
            if (s.downsample) hw = conv_out_extent(hw, 3, 2, 1);
        return hw;
    }
    int feature_channels() const { return stages.back().out_channels; }

    void validate() const {
        if (K() < 2) throw InvalidConfigError("network: need at least 2 stages");
        if (num_classes < 2) throw InvalidConfigError("network: need at least 2 classes");
        if (disc_hidden < 1) throw InvalidConfigError("network: disc_hidden must be positive");
        if (input_hw < 1 || in_channels < 1) throw InvalidConfigError("network: bad input geometry");
        int hw = input_hw;
        for (const auto& s : stages) {
            if (s.out_channels < 1 || s.blocks < 1) throw InvalidConfigError("network: bad stage spec");
            if (s.downsample) hw = conv_out_extent(hw, 3, 2, 1);  // throws when geometry degenerates
        }
        if (hw < 1) throw InvalidConfigError("network: spatial extent collapsed below 1");
    }
};

// The full training-time graph: stem, K stages, K-1 auxiliary branches
// (feature alignment copies of the remaining stages plus a classifier),
// the backbone classifier, the self-teacher over concatenated stage
// features, and one discriminator per stage.
template <typename Real>
struct NetworkGraph {
    NetArch arch;

    detail::ConvLayer<Real> stem;
    std::vector<std::vector<detail::ConvLayer<Real>>> stage_blocks;   // [K][blocks]
    std::vector<std::vector<detail::ConvLayer<Real>>> branch_blocks;  // [K-1][copied blocks]
    std::vector<detail::LinearLayer<Real>> branch_fc;                 // K-1
    detail::LinearLayer<Real> fc;                                     // backbone classifier g
    detail::ConvLayer<Real> teacher_conv;                             // 1x1 channel shrink
    detail::LinearLayer<Real> teacher_fc;                             // g_h
    struct Disc {
        detail::LinearLayer<Real> fc1, fc2;
    };
    std::vector<Disc> discs;  // K

    // Ordered parameter walk; names are stable and drive checkpoints.
    template <typename Fn>
    void visit_params(Fn&& fn) {
        auto conv = [&](detail::ConvLayer<Real>& c) {
            fn(c.w);
            fn(c.b);
        };
        auto lin = [&](detail::LinearLayer<Real>& l) {
            fn(l.w);
            fn(l.b);
        };
        conv(stem);
        for (auto& stage : stage_blocks)
            for (auto& block : stage) conv(block);
        for (auto& branch : branch_blocks)
            for (auto& block : branch) conv(block);
        for (auto& l : branch_fc) lin(l);
        lin(fc);
        conv(teacher_conv);
        lin(teacher_fc);
        for (auto& d : discs) {
            lin(d.fc1);
            lin(d.fc2);
        }
    }

    // Generator-side parameters: everything except the discriminators.
    template <typename Fn>
    void visit_generator_params(Fn&& fn) {
        auto conv = [&](detail::ConvLayer<Real>& c) {
            fn(c.w);
            fn(c.b);
        };
        auto lin = [&](detail::LinearLayer<Real>& l) {
            fn(l.w);
            fn(l.b);
        };
        conv(stem);
        for (auto& stage : stage_blocks)
            for (auto& block : stage) conv(block);
        for (auto& branch : branch_blocks)
            for (auto& block : branch) conv(block);
        for (auto& l : branch_fc) lin(l);
        lin(fc);
        conv(teacher_conv);
        lin(teacher_fc);
    }

    template <typename Fn>
    void visit_discriminator_params(Fn&& fn) {
        for (auto& d : discs) {
            fn(d.fc1.w);
            fn(d.fc1.b);
            fn(d.fc2.w);
            fn(d.fc2.b);
        }
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        visit_params([&](Param<Real>& p) { n += p.value.numel(); });
        return n;
    }

    void zero_grads() {
        visit_params([](Param<Real>& p) { p.zero_grad(); });
    }
};

template <typename Real>
NetworkGraph<Real> build_network(const NetArch& arch_in, std::uint64_t seed) {
    NetArch arch = arch_in;
    arch.validate();

    NetworkGraph<Real> net;
    net.arch = arch;
    Rng rng(seed);
    const int K = arch.K();

    auto make_conv = [&](int in_ch, int out_ch, int kernel, int stride, int padding, const std::string& name) {
        detail::ConvLayer<Real> c;
        c.in_ch = in_ch;
        c.out_ch = out_ch;
        c.kernel = kernel;
        c.stride = stride;
        c.padding = padding;
        detail::init_conv(c, name, rng);
        return c;
    };
    auto make_linear = [&](int in_dim, int out_dim, const std::string& name) {
        detail::LinearLayer<Real> l;
        l.in_dim = in_dim;
        l.out_dim = out_dim;
        detail::init_linear(l, name, rng);
        return l;
    };

    net.stem = make_conv(arch.in_channels, arch.stages[0].out_channels, 3, 1, 1, "stem");

    auto stage_in_channels = [&](int stage_idx) {
        return stage_idx == 0 ? arch.stages[0].out_channels : arch.stages[static_cast<std::size_t>(stage_idx - 1)].out_channels;
    };
    auto build_stage = [&](int stage_idx, const std::string& prefix) {
        const StageSpec& s = arch.stages[static_cast<std::size_t>(stage_idx)];
        std::vector<detail::ConvLayer<Real>> blocks;
        int in_ch = stage_in_channels(stage_idx);
        for (int b = 0; b < s.blocks; ++b) {
            const int stride = (b == 0 && s.downsample) ? 2 : 1;
            blocks.push_back(make_conv(in_ch, s.out_channels, 3, stride, 1,
                                       prefix + ".block" + std::to_string(b)));
            in_ch = s.out_channels;
        }
        return blocks;
    };

    for (int k = 0; k < K; ++k) net.stage_blocks.push_back(build_stage(k, "stage" + std::to_string(k + 1)));

    // Branch after stage k copies the structure (and widths) of stages k+1..K.
    for (int k = 0; k < K - 1; ++k) {
        std::vector<detail::ConvLayer<Real>> blocks;
        for (int j = k + 1; j < K; ++j) {
            auto copied = build_stage(j, "branch" + std::to_string(k + 1) + ".stage" + std::to_string(j + 1));
            for (auto& b : copied) blocks.push_back(std::move(b));
        }
        net.branch_blocks.push_back(std::move(blocks));
        net.branch_fc.push_back(
            make_linear(arch.feature_channels(), arch.num_classes, "branch" + std::to_string(k + 1) + ".fc"));
    }

    net.fc = make_linear(arch.feature_channels(), arch.num_classes, "fc");

    net.teacher_conv = make_conv(K * arch.feature_channels(), arch.feature_channels(), 1, 1, 0, "teacher.conv");
    net.teacher_fc = make_linear(arch.feature_channels(), arch.num_classes, "teacher.fc");

    const int disc_in = arch.feature_channels() * arch.feature_hw() * arch.feature_hw();
    for (int k = 0; k < K; ++k) {
        typename NetworkGraph<Real>::Disc d;
        d.fc1 = make_linear(disc_in, arch.disc_hidden, "disc" + std::to_string(k + 1) + ".fc1");
        d.fc2 = make_linear(arch.disc_hidden, 1, "disc" + std::to_string(k + 1) + ".fc2");
        net.discs.push_back(std::move(d));
    }
    return net;
}

// Per-forward bundle: branch logits, backbone logits, and the K aligned
// feature maps (branch outputs F_1..F_{K-1} plus the backbone's F_K).
struct TrainOutputs {
    std::vector<Var> branch_logits;
    Var backbone_logits;
    std::vector<Var> features;
};

struct BindOptions {
    bool generator_grad = true;
    bool discriminator_grad = true;
};

// A NetworkGraph bound onto one tape: every parameter becomes a leaf with
// the requested requires_grad, and the forward builders below produce ops
// against those leaves.
template <typename Real>
class BoundNet {
public:
    BoundNet(Graph<Real>& g, NetworkGraph<Real>& net, BindOptions opts) : g_(&g), net_(&net) {
        net.visit_generator_params([&](Param<Real>& p) { bind(p, opts.generator_grad); });
        net.visit_discriminator_params([&](Param<Real>& p) { bind(p, opts.discriminator_grad); });
    }

    Graph<Real>& graph() { return *g_; }
    NetworkGraph<Real>& net() { return *net_; }

    Var var_of(const Param<Real>& p) const {
        auto it = vars_.find(&p);
        if (it == vars_.end()) throw InvalidConfigError("parameter not bound");
        return it->second;
    }

    // Shared-prefix forward: stages are evaluated once, branches reuse the
    // stage outputs.
    TrainOutputs forward_train(Var x) {
        const NetArch& arch = net_->arch;
        check_input(x);
        const int K = arch.K();

        Var cur = block_forward(net_->stem, x);
        std::vector<Var> stage_out(static_cast<std::size_t>(K));
        for (int k = 0; k < K; ++k) {
            for (auto& blk : net_->stage_blocks[static_cast<std::size_t>(k)]) cur = block_forward(blk, cur);
            stage_out[static_cast<std::size_t>(k)] = cur;
        }

        TrainOutputs out;
        out.features.resize(static_cast<std::size_t>(K));
        out.features[static_cast<std::size_t>(K - 1)] = stage_out[static_cast<std::size_t>(K - 1)];
        for (int k = 0; k < K - 1; ++k) {
            Var f = stage_out[static_cast<std::size_t>(k)];
            for (auto& blk : net_->branch_blocks[static_cast<std::size_t>(k)]) f = block_forward(blk, f);
            out.features[static_cast<std::size_t>(k)] = f;
            Var pooled = ops::global_avg_pool(*g_, f);
            out.branch_logits.push_back(linear_forward(net_->branch_fc[static_cast<std::size_t>(k)], pooled));
        }
        Var pooled = ops::global_avg_pool(*g_, stage_out[static_cast<std::size_t>(K - 1)]);
        out.backbone_logits = linear_forward(net_->fc, pooled);
        return out;
    }

    // h({F_k}) = g_h(Conv1x1(concat_channels(F_1..F_K))), pooled before the
    // classifier.
    Var forward_teacher(const std::vector<Var>& features) {
        const NetArch& arch = net_->arch;
        if (static_cast<int>(features.size()) != arch.K())
            throw InvalidConfigError("forward_teacher: expected " + std::to_string(arch.K()) + " feature maps, got " +
                                     std::to_string(features.size()));
        Var cat = ops::concat_channels(*g_, features);
        Var mixed = ops::conv2d(*g_, cat, var_of(net_->teacher_conv.w), var_of(net_->teacher_conv.b), 1, 0);
        Var pooled = ops::global_avg_pool(*g_, mixed);
        return linear_forward(net_->teacher_fc, pooled);
    }

    // Flatten -> linear -> ReLU -> linear -> sigmoid, one score per sample.
    // k is 1-based (1..K) following the paper's D_k numbering.
    Var forward_discriminator(int k, Var feature) {
        if (k < 1 || k > net_->arch.K())
            throw InvalidConfigError("forward_discriminator: stage index " + std::to_string(k) + " out of range");
        auto& d = net_->discs[static_cast<std::size_t>(k - 1)];
        Var flat = ops::flatten(*g_, feature);
        Var hidden = ops::relu(*g_, linear_forward(d.fc1, flat));
        Var score = linear_forward(d.fc2, hidden);
        Var squeezed = ops::reshape(*g_, score, {g_->value(score).shape[0]});
        return ops::sigmoid(*g_, squeezed);
    }

    // Adds this graph's accumulated grads back into the parameter buffers.
    void pull_grads() {
        for (auto& [param, var] : bound_) {
            if (!g_->requires_grad(var)) continue;
            param->grad.add_(g_->grad(var));
        }
    }

private:
    void bind(Param<Real>& p, bool requires_grad) {
        Var v = g_->leaf(p.value, requires_grad);
        vars_.emplace(&p, v);
        bound_.emplace_back(&p, v);
    }

    void check_input(Var x) const {
        const Tensor<Real>& xv = g_->value(x);
        const NetArch& arch = net_->arch;
        if (xv.rank() != 4 || xv.shape[1] != arch.in_channels || xv.shape[2] != arch.input_hw ||
            xv.shape[3] != arch.input_hw)
            throw InvalidShapeError("forward: input " + xv.shape_str() + " does not match configured size");
    }

    Var block_forward(detail::ConvLayer<Real>& blk, Var x) {
        Var y = ops::conv2d(*g_, x, var_of(blk.w), var_of(blk.b), blk.stride, blk.padding);
        if (net_->arch.residual && blk.stride == 1 && blk.in_ch == blk.out_ch) y = ops::add(*g_, y, x);
        return ops::relu(*g_, y);
    }

    Var linear_forward(detail::LinearLayer<Real>& l, Var x) {
        return ops::linear(*g_, x, var_of(l.w), var_of(l.b));
    }

    Graph<Real>* g_;
    NetworkGraph<Real>* net_;
    std::unordered_map<const Param<Real>*, Var> vars_;
    std::vector<std::pair<Param<Real>*, Var>> bound_;
};

// Convenience single-shot forward matching the spec operation signature.
template <typename Real>
TrainOutputs forward_train(NetworkGraph<Real>& net, Graph<Real>& g, const Tensor<Real>& x, bool with_grad = true) {
    BoundNet<Real> bound(g, net, BindOptions{with_grad, with_grad});
    Var xv = g.constant(x);
    return bound.forward_train(xv);
}

// Backbone-only graph used at test time; identical arithmetic to the
// training forward's backbone path.
template <typename Real>
struct InferenceNet {
    NetArch arch;
    detail::ConvLayer<Real> stem;
    std::vector<std::vector<detail::ConvLayer<Real>>> stage_blocks;
    detail::LinearLayer<Real> fc;

    template <typename Fn>
    void visit_params(Fn&& fn) {
        fn(stem.w);
        fn(stem.b);
        for (auto& stage : stage_blocks)
            for (auto& block : stage) {
                fn(block.w);
                fn(block.b);
            }
        fn(fc.w);
        fn(fc.b);
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        visit_params([&](Param<Real>& p) { n += p.value.numel(); });
        return n;
    }

    Tensor<Real> infer(const Tensor<Real>& x) const {
        if (x.rank() != 4 || x.shape[1] != arch.in_channels || x.shape[2] != arch.input_hw || x.shape[3] != arch.input_hw)
            throw InvalidShapeError("infer: input " + x.shape_str() + " does not match configured size");
        Tensor<Real> cur = block_infer(stem, x);
        for (const auto& stage : stage_blocks)
            for (const auto& blk : stage) cur = block_infer(blk, cur);
        return kernels::linear_fwd(kernels::gap_fwd(cur), fc.w.value, fc.b.value);
    }

    // Tape forward with frozen parameters; used by FGSM for input gradients.
    Var forward(Graph<Real>& g, Var x) const {
        auto conv = [&](const detail::ConvLayer<Real>& blk, Var v) {
            Var y = ops::conv2d(g, v, g.constant(blk.w.value), g.constant(blk.b.value), blk.stride, blk.padding);
            if (arch.residual && blk.stride == 1 && blk.in_ch == blk.out_ch) y = ops::add(g, y, v);
            return ops::relu(g, y);
        };
        Var cur = conv(stem, x);
        for (const auto& stage : stage_blocks)
            for (const auto& blk : stage) cur = conv(blk, cur);
        Var pooled = ops::global_avg_pool(g, cur);
        return ops::linear(g, pooled, g.constant(fc.w.value), g.constant(fc.b.value));
    }

private:
    Tensor<Real> block_infer(const detail::ConvLayer<Real>& blk, const Tensor<Real>& x) const {
        Tensor<Real> y = kernels::conv2d_fwd(x, blk.w.value, blk.b.value, blk.stride, blk.padding);
        if (arch.residual && blk.stride == 1 && blk.in_ch == blk.out_ch) y.add_(x);
        return kernels::relu_fwd(y);
    }
};

// Discards branches, self-teacher and discriminators (test-time graph).
template <typename Real>
InferenceNet<Real> prune_for_inference(const NetworkGraph<Real>& net) {
    InferenceNet<Real> out;
    out.arch = net.arch;
    out.stem = net.stem;
    out.stage_blocks = net.stage_blocks;
    out.fc = net.fc;
    return out;
}

}  // namespace mixskd
