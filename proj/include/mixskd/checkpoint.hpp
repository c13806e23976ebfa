#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mixskd/network.hpp"
#include "mixskd/tensor.hpp"

namespace mixskd {

// Checkpoint layout: a plain-text header describing the architecture and a
// manifest of (name, byte offset, shape) entries, the line "DATA", then the
// named tensors as consecutive MSKD records. Offsets are relative to the
// first byte after the DATA line.

namespace detail {

inline void write_arch(std::ostream& os, const NetArch& arch, bool pruned) {
    os << "MIXSKD-CKPT 1\n";
    os << "pruned " << (pruned ? 1 : 0) << "\n";
    os << "num_classes " << arch.num_classes << "\n";
    os << "input_hw " << arch.input_hw << "\n";
    os << "in_channels " << arch.in_channels << "\n";
    os << "disc_hidden " << arch.disc_hidden << "\n";
    os << "residual " << (arch.residual ? 1 : 0) << "\n";
    os << "stages " << arch.K() << "\n";
    for (const auto& s : arch.stages) os << "stage " << s.out_channels << " " << s.blocks << " " << (s.downsample ? 1 : 0) << "\n";
}

template <typename Net>
void save_params(std::ostream& os, const NetArch& arch, bool pruned, Net& net) {
    std::vector<std::pair<std::string, const Tensor<float>*>> entries;
    net.visit_params([&](Param<float>& p) { entries.emplace_back(p.name, &p.value); });

    write_arch(os, arch, pruned);
    os << "tensors " << entries.size() << "\n";
    std::uint64_t offset = 0;
    for (const auto& [name, t] : entries) {
        os << name << " " << offset;
        os << " " << t->rank();
        for (int e : t->shape) os << " " << e;
        os << "\n";
        offset += 4 + 4 + 4 + 4ull * static_cast<std::uint64_t>(t->rank()) + 4ull * static_cast<std::uint64_t>(t->numel());
    }
    os << "DATA\n";
    for (const auto& [name, t] : entries) save_tensor(os, *t);
}

struct CheckpointHeader {
    NetArch arch;
    bool pruned = false;
    std::vector<std::pair<std::string, std::uint64_t>> manifest;
};

inline CheckpointHeader read_header(std::istream& is) {
    CheckpointHeader h;
    std::string line;
    auto next_line = [&]() {
        if (!std::getline(is, line)) throw FormatError("checkpoint header truncated");
        return line;
    };
    if (next_line() != "MIXSKD-CKPT 1") throw FormatError("not a MIXSKD checkpoint (bad first line)");

    auto expect_kv = [&](const std::string& key) {
        std::istringstream ls(next_line());
        std::string k;
        long long v = 0;
        if (!(ls >> k >> v) || k != key) throw FormatError("checkpoint header: expected '" + key + "' line");
        return v;
    };
    h.pruned = expect_kv("pruned") != 0;
    h.arch.num_classes = static_cast<int>(expect_kv("num_classes"));
    h.arch.input_hw = static_cast<int>(expect_kv("input_hw"));
    h.arch.in_channels = static_cast<int>(expect_kv("in_channels"));
    h.arch.disc_hidden = static_cast<int>(expect_kv("disc_hidden"));
    h.arch.residual = expect_kv("residual") != 0;
    const int k = static_cast<int>(expect_kv("stages"));
    for (int i = 0; i < k; ++i) {
        std::istringstream ls(next_line());
        std::string tag;
        StageSpec s;
        int ds = 0;
        if (!(ls >> tag >> s.out_channels >> s.blocks >> ds) || tag != "stage")
            throw FormatError("checkpoint header: bad stage line");
        s.downsample = ds != 0;
        h.arch.stages.push_back(s);
    }
    const long long count = expect_kv("tensors");
    for (long long i = 0; i < count; ++i) {
        std::istringstream ls(next_line());
        std::string name;
        std::uint64_t offset = 0;
        if (!(ls >> name >> offset)) throw FormatError("checkpoint header: bad manifest line");
        h.manifest.emplace_back(name, offset);
    }
    if (next_line() != "DATA") throw FormatError("checkpoint header: missing DATA marker");
    return h;
}

template <typename Net>
void load_params(std::istream& is, const CheckpointHeader& h, Net& net) {
    const std::streampos data_start = is.tellg();
    std::unordered_map<std::string, std::uint64_t> offsets(h.manifest.begin(), h.manifest.end());
    net.visit_params([&](Param<float>& p) {
        auto it = offsets.find(p.name);
        if (it == offsets.end()) throw FormatError("checkpoint missing tensor '" + p.name + "'");
        is.seekg(data_start + static_cast<std::streamoff>(it->second));
        Tensor<float> t = load_tensor(is);
        if (t.shape != p.value.shape)
            throw FormatError("checkpoint tensor '" + p.name + "' has shape " + t.shape_str() + ", expected " +
                              p.value.shape_str());
        p.value = std::move(t);
        p.zero_grad();
    });
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, NetworkGraph<float>& net) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    detail::save_params(os, net.arch, false, net);
    if (!os) throw IoError("short write to '" + path + "'");
}

inline void save_checkpoint(const std::string& path, InferenceNet<float>& net) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    detail::save_params(os, net.arch, true, net);
    if (!os) throw IoError("short write to '" + path + "'");
}

inline NetworkGraph<float> load_network(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    auto header = detail::read_header(is);
    if (header.pruned) throw FormatError("'" + path + "' is a pruned checkpoint; the full training graph is gone");
    NetworkGraph<float> net = build_network<float>(header.arch, 0);
    detail::load_params(is, header, net);
    return net;
}

// Accepts both full and pruned checkpoints; full ones are pruned on load.
inline InferenceNet<float> load_inference(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    auto header = detail::read_header(is);
    if (header.pruned) {
        NetworkGraph<float> scaffold = build_network<float>(header.arch, 0);
        InferenceNet<float> net = prune_for_inference(scaffold);
        detail::load_params(is, header, net);
        return net;
    }
    NetworkGraph<float> net = build_network<float>(header.arch, 0);
    detail::load_params(is, header, net);
    return prune_for_inference(net);
}

}  // namespace mixskd
