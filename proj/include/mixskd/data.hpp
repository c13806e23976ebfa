#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mixskd/rng.hpp"
#include "mixskd/tensor.hpp"

namespace mixskd {

template <typename Real>
struct Dataset {
    Tensor<Real> images;  // [M,3,H,W], values in [0,1]
    std::vector<int> labels;
    int num_classes = 0;
    std::string split;

    int size() const { return images.rank() == 4 ? images.shape[0] : 0; }

    void validate() const {
        if (size() <= 0) throw InvalidConfigError("dataset: empty");
        if (static_cast<int>(labels.size()) != size()) throw InvalidShapeError("dataset: label count mismatch");
        for (int y : labels)
            if (y < 0 || y >= num_classes) throw FormatError("dataset: label out of range");
    }
};

// Gathers rows into a new batch tensor.
template <typename Real>
Tensor<Real> gather_images(const Dataset<Real>& ds, const std::vector<int>& indices) {
    const int C = ds.images.shape[1], H = ds.images.shape[2], W = ds.images.shape[3];
    Tensor<Real> out = Tensor<Real>::zeros({static_cast<int>(indices.size()), C, H, W});
    const std::int64_t row = static_cast<std::int64_t>(C) * H * W;
    for (std::size_t n = 0; n < indices.size(); ++n)
        std::copy_n(&ds.images.data[static_cast<std::size_t>(indices[n]) * row], static_cast<std::size_t>(row),
                    &out.data[n * static_cast<std::size_t>(row)]);
    return out;
}

// Class-keyed procedural images: an oriented sinusoidal gradient plus a
// colored blob, with Gaussian pixel noise, clamped to [0,1]. Classes are
// separable but not trivially so once noise_sigma grows.
template <typename Real>
Dataset<Real> gen_synthetic(int num_classes, int per_class, int hw, double noise_sigma, std::uint64_t seed,
                            const std::string& split = "train") {
    if (num_classes < 2 || per_class < 1 || hw < 4) throw InvalidConfigError("gen_synthetic: bad geometry");
    if (noise_sigma < 0) throw InvalidConfigError("gen_synthetic: negative noise");
    const int M = num_classes * per_class;
    Dataset<Real> ds;
    ds.images = Tensor<Real>::zeros({M, 3, hw, hw});
    ds.labels.resize(static_cast<std::size_t>(M));
    ds.num_classes = num_classes;
    ds.split = split;

    Rng rng(derive_seed(seed, 0xDA7A));
    const double pi = 3.14159265358979323846;
    int idx = 0;
    for (int c = 0; c < num_classes; ++c) {
        const double angle = 2.0 * pi * c / num_classes + 0.35;
        const double dx = std::cos(angle), dy = std::sin(angle);
        const double phase = 1.7 * c;
        // class-keyed palette for gradient and blob
        const double pal[3] = {0.5 + 0.45 * std::sin(2.1 * c + 0.3), 0.5 + 0.45 * std::sin(2.1 * c + 2.4),
                               0.5 + 0.45 * std::sin(2.1 * c + 4.5)};
        const double bx = (0.25 + 0.5 * ((c * 37) % 11) / 10.0) * hw;
        const double by = (0.25 + 0.5 * ((c * 53) % 13) / 12.0) * hw;
        const double radius = hw / 4.0;
        for (int s = 0; s < per_class; ++s, ++idx) {
            ds.labels[static_cast<std::size_t>(idx)] = c;
            for (int h = 0; h < hw; ++h)
                for (int w = 0; w < hw; ++w) {
                    const double wave = 0.5 + 0.35 * std::sin(2.0 * pi * (dx * w + dy * h) / hw + phase);
                    const double d2 = (w - bx) * (w - bx) + (h - by) * (h - by);
                    const double blob = std::exp(-d2 / (radius * radius));
                    for (int ch = 0; ch < 3; ++ch) {
                        double v = wave * pal[ch] + 0.6 * blob * pal[(ch + 1) % 3];
                        if (noise_sigma > 0) v += noise_sigma * rng.normal();
                        ds.images.at4(idx, ch, h, w) = static_cast<Real>(std::min(1.0, std::max(0.0, v)));
                    }
                }
        }
    }
    return ds;
}

// CIFAR binary format: records of 1 (CIFAR-10) or 2 (CIFAR-100:
// coarse then fine) label bytes followed by 3072 channel-major pixel bytes.
template <typename Real>
Dataset<Real> load_cifar_binary(const std::string& path, int num_classes) {
    if (num_classes != 10 && num_classes != 100)
        throw InvalidConfigError("load_cifar_binary: num_classes must be 10 or 100");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

    const std::size_t label_bytes = num_classes == 100 ? 2 : 1;
    const std::size_t record = label_bytes + 3072;
    if (bytes.empty()) throw FormatError("'" + path + "': empty file");
    if (bytes.size() % record != 0)
        throw FormatError("'" + path + "': size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                          std::to_string(record) + "-byte record; trailing bytes start at offset " +
                          std::to_string(bytes.size() - bytes.size() % record));
    const int M = static_cast<int>(bytes.size() / record);

    Dataset<Real> ds;
    ds.images = Tensor<Real>::zeros({M, 3, 32, 32});
    ds.labels.resize(static_cast<std::size_t>(M));
    ds.num_classes = num_classes;
    ds.split = "cifar";
    for (int n = 0; n < M; ++n) {
        const unsigned char* rec = &bytes[static_cast<std::size_t>(n) * record];
        const int label = rec[label_bytes - 1];  // fine label for CIFAR-100
        if (label >= num_classes)
            throw FormatError("'" + path + "': label " + std::to_string(label) + " out of range in record " +
                              std::to_string(n));
        ds.labels[static_cast<std::size_t>(n)] = label;
        const unsigned char* px = rec + label_bytes;
        for (std::int64_t i = 0; i < 3072; ++i)
            ds.images.data[static_cast<std::size_t>(n) * 3072 + static_cast<std::size_t>(i)] =
                static_cast<Real>(px[i]) / Real(255);
    }
    return ds;
}

template <typename Real>
struct PairBatch {
    Tensor<Real> xi, xj;
    std::vector<int> yi, yj;
};

// Pad-4 random crop plus horizontal flip, drawn per sample.
template <typename Real>
void augment_in_place(Tensor<Real>& images, Rng& rng, int pad = 4) {
    const int N = images.shape[0], C = images.shape[1], H = images.shape[2], W = images.shape[3];
    Tensor<Real> out = Tensor<Real>::zeros(images.shape);
    for (int n = 0; n < N; ++n) {
        const int oy = static_cast<int>(rng.below(2 * pad + 1)) - pad;
        const int ox = static_cast<int>(rng.below(2 * pad + 1)) - pad;
        const bool flip = rng.below(2) == 1;
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const int sh = h + oy;
                    const int sw = (flip ? W - 1 - w : w) + ox;
                    out.at4(n, c, h, w) = (sh >= 0 && sh < H && sw >= 0 && sw < W) ? images.at4(n, c, sh, sw) : Real(0);
                }
    }
    images = std::move(out);
}

// One epoch of paired batches: epoch-level shuffle, the pair partner is a
// within-batch permutation, partial tail dropped.
template <typename Real>
class EpochPairs {
public:
    EpochPairs(const Dataset<Real>& ds, int batch_size, Rng& rng, bool augment = false)
        : ds_(&ds), batch_(batch_size), rng_(&rng), augment_(augment) {
        if (batch_size < 1 || batch_size > ds.size())
            throw InvalidConfigError("batch_pairs: batch size must be in [1, dataset size]");
        order_ = rng.permutation(ds.size());
        steps_ = ds.size() / batch_size;
    }

    int steps() const { return steps_; }

    bool next(PairBatch<Real>& out) {
        if (cursor_ >= steps_) return false;
        std::vector<int> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_) * batch_,
                             order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + 1) * batch_);
        ++cursor_;
        out.xi = gather_images(*ds_, idx);
        out.yi.resize(idx.size());
        for (std::size_t n = 0; n < idx.size(); ++n) out.yi[n] = ds_->labels[static_cast<std::size_t>(idx[n])];
        if (augment_) augment_in_place(out.xi, *rng_);
        const std::vector<int> perm = rng_->permutation(batch_);
        out.xj = Tensor<Real>::zeros(out.xi.shape);
        out.yj.resize(idx.size());
        const std::int64_t row = out.xi.numel() / batch_;
        for (int n = 0; n < batch_; ++n) {
            std::copy_n(&out.xi.data[static_cast<std::size_t>(perm[static_cast<std::size_t>(n)]) * static_cast<std::size_t>(row)],
                        static_cast<std::size_t>(row), &out.xj.data[static_cast<std::size_t>(n) * static_cast<std::size_t>(row)]);
            out.yj[static_cast<std::size_t>(n)] = out.yi[static_cast<std::size_t>(perm[static_cast<std::size_t>(n)])];
        }
        return true;
    }

private:
    const Dataset<Real>* ds_;
    int batch_;
    Rng* rng_;
    bool augment_;
    std::vector<int> order_;
    int steps_ = 0;
    int cursor_ = 0;
};

}  // namespace mixskd
