#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mixskd/data.hpp"
#include "mixskd/network.hpp"
#include "mixskd/trainer.hpp"

namespace mixskd {

struct DataConfig {
    std::string kind = "synthetic";  // synthetic | cifar10 | cifar100
    std::string path;                // cifar train file
    std::string test_path;           // optional cifar test file
    int classes = 4;
    int per_class = 80;
    int test_per_class = 40;
    double noise_sigma = 0.25;
};

// Everything a run needs: optimizer recipe, architecture, dataset source.
struct RunConfig {
    TrainConfig train;
    NetArch net;
    DataConfig data;

    RunConfig() {
        net.stages = {{8, 1, false}, {16, 1, true}, {32, 1, true}};
        net.num_classes = 4;
        net.disc_hidden = 64;
        net.input_hw = 16;
    }
};

namespace cfgdetail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    throw InvalidConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& v, const std::string& key) {
    std::size_t pos = 0;
    double d = 0;
    try {
        d = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw InvalidConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
    if (pos != v.size()) throw InvalidConfigError("key '" + key + "': trailing junk in '" + v + "'");
    return d;
}

inline long parse_long(const std::string& v, const std::string& key) {
    std::size_t pos = 0;
    long d = 0;
    try {
        d = std::stol(v, &pos);
    } catch (const std::exception&) {
        throw InvalidConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    }
    if (pos != v.size()) throw InvalidConfigError("key '" + key + "': trailing junk in '" + v + "'");
    return d;
}

inline std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(static_cast<int>(parse_long(item, key)));
    }
    return out;
}

inline std::string join_ints(const std::vector<int>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

}  // namespace cfgdetail

class ConfigSchema {
public:
    explicit ConfigSchema(RunConfig& cfg) : cfg_(&cfg) { register_keys(); }

    void set(const std::string& key, const std::string& value) {
        auto it = setters_.find(key);
        if (it == setters_.end()) throw InvalidConfigError("unknown config key '" + key + "'; valid keys: " + key_list());
        it->second(cfgdetail::trim(value));
    }

    std::string key_list() const {
        std::string out;
        for (const auto& [k, fn] : setters_) {
            if (!out.empty()) out += ", ";
            out += k;
        }
        return out;
    }

    // Canonical echo of the fully-resolved configuration; feeding it back in
    // reproduces the run.
    std::string echo() const {
        std::ostringstream os;
        const RunConfig& c = *cfg_;
        os << "# effective configuration (all defaults resolved)\n";
        os << "seed = " << c.train.seed << "\n";
        os << "epochs = " << c.train.epochs << "\n";
        os << "batch_size = " << c.train.batch_size << "\n";
        os << "lr = " << c.train.lr << "\n";
        os << "momentum = " << c.train.momentum << "\n";
        os << "weight_decay = " << c.train.weight_decay << "\n";
        os << "warmup_epochs = " << c.train.warmup_epochs << "\n";
        os << "schedule = " << (c.train.schedule.kind == ScheduleKind::Step ? "step" : "cosine") << "\n";
        os << "milestones = " << cfgdetail::join_ints(c.train.schedule.milestones) << "\n";
        os << "decay_factor = " << c.train.schedule.factor << "\n";
        os << "alpha = " << c.train.alpha << "\n";
        os << "per_batch_lambda = " << (c.train.per_batch_lambda ? 1 : 0) << "\n";
        os << "grl_scale = " << c.train.grl_scale << "\n";
        os << "adversarial_mode = "
           << (c.train.adversarial_mode == AdversarialMode::Simultaneous ? "simultaneous" : "alternating") << "\n";
        os << "teacher_grad_to_features = " << (c.train.teacher_grad_to_features ? 1 : 0) << "\n";
        os << "checkpoint_every = " << c.train.checkpoint_every << "\n";
        os << "weights.beta = " << c.train.weights.beta << "\n";
        os << "weights.gamma = " << c.train.weights.gamma << "\n";
        os << "weights.mu = " << c.train.weights.mu << "\n";
        os << "weights.T = " << c.train.weights.T << "\n";
        os << "weights.t2_scaling = " << (c.train.weights.t2_scaling ? 1 : 0) << "\n";
        os << "enable_mixup = " << (c.train.flags.mixup ? 1 : 0) << "\n";
        os << "enable_feature = " << (c.train.flags.feature ? 1 : 0) << "\n";
        os << "enable_dis = " << (c.train.flags.dis ? 1 : 0) << "\n";
        os << "enable_b_logit = " << (c.train.flags.b_logit ? 1 : 0) << "\n";
        os << "enable_h = " << (c.train.flags.h ? 1 : 0) << "\n";
        os << "enable_f_logit = " << (c.train.flags.f_logit ? 1 : 0) << "\n";
        std::vector<int> ch, bl, ds;
        for (const auto& s : c.net.stages) {
            ch.push_back(s.out_channels);
            bl.push_back(s.blocks);
            ds.push_back(s.downsample ? 1 : 0);
        }
        os << "net.channels = " << cfgdetail::join_ints(ch) << "\n";
        os << "net.blocks = " << cfgdetail::join_ints(bl) << "\n";
        os << "net.downsample = " << cfgdetail::join_ints(ds) << "\n";
        os << "net.disc_hidden = " << c.net.disc_hidden << "\n";
        os << "net.input_hw = " << c.net.input_hw << "\n";
        os << "net.residual = " << (c.net.residual ? 1 : 0) << "\n";
        os << "data.kind = " << c.data.kind << "\n";
        os << "data.path = " << c.data.path << "\n";
        os << "data.test_path = " << c.data.test_path << "\n";
        os << "data.classes = " << c.data.classes << "\n";
        os << "data.per_class = " << c.data.per_class << "\n";
        os << "data.test_per_class = " << c.data.test_per_class << "\n";
        os << "data.noise_sigma = " << c.data.noise_sigma << "\n";
        os << "data.augment = " << (c.train.augment ? 1 : 0) << "\n";
        return os.str();
    }

private:
    void register_keys() {
        using namespace cfgdetail;
        RunConfig* c = cfg_;
        auto reg = [&](const char* key, std::function<void(const std::string&)> fn) { setters_[key] = std::move(fn); };

        reg("seed", [c](const std::string& v) { c->train.seed = static_cast<std::uint64_t>(parse_long(v, "seed")); });
        reg("epochs", [c](const std::string& v) { c->train.epochs = static_cast<int>(parse_long(v, "epochs")); });
        reg("batch_size",
            [c](const std::string& v) { c->train.batch_size = static_cast<int>(parse_long(v, "batch_size")); });
        reg("lr", [c](const std::string& v) { c->train.lr = parse_double(v, "lr"); });
        reg("momentum", [c](const std::string& v) { c->train.momentum = parse_double(v, "momentum"); });
        reg("weight_decay", [c](const std::string& v) { c->train.weight_decay = parse_double(v, "weight_decay"); });
        reg("warmup_epochs",
            [c](const std::string& v) { c->train.warmup_epochs = static_cast<int>(parse_long(v, "warmup_epochs")); });
        reg("schedule", [c](const std::string& v) {
            if (v == "step")
                c->train.schedule.kind = ScheduleKind::Step;
            else if (v == "cosine")
                c->train.schedule.kind = ScheduleKind::Cosine;
            else
                throw InvalidConfigError("key 'schedule': expected step|cosine, got '" + v + "'");
        });
        reg("milestones",
            [c](const std::string& v) { c->train.schedule.milestones = parse_int_list(v, "milestones"); });
        reg("decay_factor", [c](const std::string& v) { c->train.schedule.factor = parse_double(v, "decay_factor"); });
        reg("alpha", [c](const std::string& v) { c->train.alpha = parse_double(v, "alpha"); });
        reg("per_batch_lambda",
            [c](const std::string& v) { c->train.per_batch_lambda = parse_bool(v, "per_batch_lambda"); });
        reg("grl_scale", [c](const std::string& v) { c->train.grl_scale = parse_double(v, "grl_scale"); });
        reg("adversarial_mode", [c](const std::string& v) {
            if (v == "simultaneous")
                c->train.adversarial_mode = AdversarialMode::Simultaneous;
            else if (v == "alternating")
                c->train.adversarial_mode = AdversarialMode::Alternating;
            else
                throw InvalidConfigError("key 'adversarial_mode': expected simultaneous|alternating, got '" + v + "'");
        });
        reg("teacher_grad_to_features",
            [c](const std::string& v) { c->train.teacher_grad_to_features = parse_bool(v, "teacher_grad_to_features"); });
        reg("checkpoint_every",
            [c](const std::string& v) { c->train.checkpoint_every = static_cast<int>(parse_long(v, "checkpoint_every")); });
        reg("weights.beta", [c](const std::string& v) { c->train.weights.beta = parse_double(v, "weights.beta"); });
        reg("weights.gamma", [c](const std::string& v) { c->train.weights.gamma = parse_double(v, "weights.gamma"); });
        reg("weights.mu", [c](const std::string& v) { c->train.weights.mu = parse_double(v, "weights.mu"); });
        reg("weights.T", [c](const std::string& v) { c->train.weights.T = parse_double(v, "weights.T"); });
        reg("weights.t2_scaling",
            [c](const std::string& v) { c->train.weights.t2_scaling = parse_bool(v, "weights.t2_scaling"); });
        reg("enable_mixup", [c](const std::string& v) { c->train.flags.mixup = parse_bool(v, "enable_mixup"); });
        reg("enable_feature", [c](const std::string& v) { c->train.flags.feature = parse_bool(v, "enable_feature"); });
        reg("enable_dis", [c](const std::string& v) { c->train.flags.dis = parse_bool(v, "enable_dis"); });
        reg("enable_b_logit", [c](const std::string& v) { c->train.flags.b_logit = parse_bool(v, "enable_b_logit"); });
        reg("enable_h", [c](const std::string& v) { c->train.flags.h = parse_bool(v, "enable_h"); });
        reg("enable_f_logit", [c](const std::string& v) { c->train.flags.f_logit = parse_bool(v, "enable_f_logit"); });
        reg("net.channels", [c](const std::string& v) {
            auto ch = parse_int_list(v, "net.channels");
            resize_stages(*c, ch.size());
            for (std::size_t i = 0; i < ch.size(); ++i) c->net.stages[i].out_channels = ch[i];
        });
        reg("net.blocks", [c](const std::string& v) {
            auto bl = parse_int_list(v, "net.blocks");
            resize_stages(*c, bl.size());
            for (std::size_t i = 0; i < bl.size(); ++i) c->net.stages[i].blocks = bl[i];
        });
        reg("net.downsample", [c](const std::string& v) {
            auto ds = parse_int_list(v, "net.downsample");
            resize_stages(*c, ds.size());
            for (std::size_t i = 0; i < ds.size(); ++i) c->net.stages[i].downsample = ds[i] != 0;
        });
        reg("net.disc_hidden",
            [c](const std::string& v) { c->net.disc_hidden = static_cast<int>(parse_long(v, "net.disc_hidden")); });
        reg("net.input_hw",
            [c](const std::string& v) { c->net.input_hw = static_cast<int>(parse_long(v, "net.input_hw")); });
        reg("net.residual", [c](const std::string& v) { c->net.residual = parse_bool(v, "net.residual"); });
        reg("data.kind", [c](const std::string& v) {
            if (v != "synthetic" && v != "cifar10" && v != "cifar100")
                throw InvalidConfigError("key 'data.kind': expected synthetic|cifar10|cifar100, got '" + v + "'");
            c->data.kind = v;
        });
        reg("data.path", [c](const std::string& v) { c->data.path = v; });
        reg("data.test_path", [c](const std::string& v) { c->data.test_path = v; });
        reg("data.classes", [c](const std::string& v) {
            c->data.classes = static_cast<int>(parse_long(v, "data.classes"));
            c->net.num_classes = c->data.classes;
        });
        reg("data.per_class",
            [c](const std::string& v) { c->data.per_class = static_cast<int>(parse_long(v, "data.per_class")); });
        reg("data.test_per_class", [c](const std::string& v) {
            c->data.test_per_class = static_cast<int>(parse_long(v, "data.test_per_class"));
        });
        reg("data.noise_sigma",
            [c](const std::string& v) { c->data.noise_sigma = parse_double(v, "data.noise_sigma"); });
        reg("data.augment", [c](const std::string& v) { c->train.augment = parse_bool(v, "data.augment"); });
    }

    static void resize_stages(RunConfig& c, std::size_t n) {
        if (c.net.stages.size() == n) return;
        std::vector<StageSpec> stages(n);
        for (std::size_t i = 0; i < n; ++i)
            stages[i] = i < c.net.stages.size() ? c.net.stages[i] : StageSpec{16, 1, i > 0};
        c.net.stages = std::move(stages);
    }

    RunConfig* cfg_;
    std::map<std::string, std::function<void(const std::string&)>> setters_;
};

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file '" + path + "'");
    ConfigSchema schema(cfg);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = cfgdetail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw InvalidConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        schema.set(cfgdetail::trim(t.substr(0, eq)), cfgdetail::trim(t.substr(eq + 1)));
    }
}

inline void apply_override(RunConfig& cfg, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InvalidConfigError("override '" + kv + "' is not of the form key=value");
    ConfigSchema schema(cfg);
    schema.set(cfgdetail::trim(kv.substr(0, eq)), cfgdetail::trim(kv.substr(eq + 1)));
}

// Builds the train/test datasets named by the config. Synthetic test splits
// derive their seed from the training seed so the two never overlap.
template <typename Real>
std::pair<Dataset<Real>, Dataset<Real>> make_datasets(const RunConfig& cfg) {
    if (cfg.data.kind == "synthetic") {
        Dataset<Real> train = gen_synthetic<Real>(cfg.data.classes, cfg.data.per_class, cfg.net.input_hw,
                                                  cfg.data.noise_sigma, derive_seed(cfg.train.seed, 1), "train");
        Dataset<Real> test = gen_synthetic<Real>(cfg.data.classes, cfg.data.test_per_class, cfg.net.input_hw,
                                                 cfg.data.noise_sigma, derive_seed(cfg.train.seed, 2), "test");
        return {std::move(train), std::move(test)};
    }
    const int classes = cfg.data.kind == "cifar10" ? 10 : 100;
    if (cfg.data.path.empty()) throw InvalidConfigError("data.path is required for CIFAR datasets");
    Dataset<Real> train = load_cifar_binary<Real>(cfg.data.path, classes);
    train.split = "train";
    Dataset<Real> test;
    if (!cfg.data.test_path.empty()) {
        test = load_cifar_binary<Real>(cfg.data.test_path, classes);
        test.split = "test";
    }
    return {std::move(train), std::move(test)};
}

}  // namespace mixskd
