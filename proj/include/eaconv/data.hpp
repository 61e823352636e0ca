#pragma once

// Dataset ingestion and persistence. Pixels live in [0,1] and are quantized
// to f32 at creation time so that save/load round-trips through the binary
// dataset format are bit-identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "eaconv/rng.hpp"
#include "eaconv/tensor.hpp"

namespace eaconv {

struct Dataset {
    Tensor images;                         // [N,C,H,W], values in [0,1], f32-exact
    std::vector<int64_t> labels;           // [N], in [0, num_classes)
    std::vector<std::string> class_names;  // size num_classes
    std::string meta;                      // free-form provenance note

    int64_t size() const { return images.empty() ? 0 : images.dim(0); }
    int64_t channels() const { return images.dim(1); }
    int64_t height() const { return images.dim(2); }
    int64_t width() const { return images.dim(3); }
    int64_t num_classes() const { return static_cast<int64_t>(class_names.size()); }

    void validate() const {
        if (images.rank() != 4) throw std::invalid_argument("Dataset: images must be rank 4");
        if (static_cast<int64_t>(labels.size()) != images.dim(0)) {
            throw std::invalid_argument("Dataset: label count does not match image count");
        }
        for (int64_t l : labels) {
            if (l < 0 || l >= num_classes()) {
                throw std::invalid_argument("Dataset: label " + std::to_string(l) +
                                            " out of range [0, " +
                                            std::to_string(num_classes()) + ")");
            }
        }
    }

    /// Copies one image out as a [C,H,W] tensor.
    Tensor image(int64_t i) const {
        const int64_t chw = channels() * height() * width();
        Tensor out({channels(), height(), width()});
        const double* src = images.data() + i * chw;
        for (int64_t j = 0; j < chw; ++j) out[j] = src[j];
        return out;
    }
};

/// Quantizes every pixel to its nearest f32 value (in place).
inline void quantize_f32(Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(static_cast<float>(t[i]));
}

// ---------------------------------------------------------------------------
// Synthetic shape dataset: ring / disc / cross / corner on 3 channels with
// randomized position, size, intensity, and background noise. Deterministic
// per seed, exactly class-balanced, and separable by a small CNN.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    int64_t image_size = 32;
    int64_t num_classes = 4;  // up to 4 shape families
    int64_t samples_per_class = 500;
    uint64_t seed = 7;
};

namespace detail {

inline void draw_synthetic_shape(double* img, int64_t size, int64_t cls, Rng& rng) {
    // Deliberately hard: small thin low-contrast strokes under visible noise,
    // so pixel-scale distortions genuinely cost a trained model accuracy.
    const double cx = rng.uniform(size * 0.30, size * 0.70);
    const double cy = rng.uniform(size * 0.30, size * 0.70);
    const double radius = rng.uniform(size * 0.12, size * 0.22);
    const double fg = rng.uniform(0.35, 0.90);
    const double thickness = rng.uniform(0.8, 1.5);
    // per-channel tint keeps color informative but not decisive
    double tint[3] = {rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0)};
    const int64_t hw = size * size;
    for (int64_t y = 0; y < size; ++y) {
        for (int64_t x = 0; x < size; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double dist = std::sqrt(dx * dx + dy * dy);
            double v = 0.0;
            switch (cls) {
                case 0:  // ring
                    v = std::abs(dist - radius) <= thickness ? fg : 0.0;
                    break;
                case 1:  // filled disc
                    v = dist <= radius ? fg : 0.0;
                    break;
                case 2:  // cross (axis-aligned)
                    v = (std::abs(dx) <= thickness || std::abs(dy) <= thickness) &&
                                dist <= radius * 1.4
                            ? fg
                            : 0.0;
                    break;
                case 3:  // corner (two perpendicular half-strokes)
                    v = ((std::abs(dx + radius * 0.5) <= thickness && dy >= -radius && dy <= 0) ||
                         (std::abs(dy) <= thickness && dx >= -radius * 0.5 &&
                          dx <= radius * 0.5))
                            ? fg
                            : 0.0;
                    break;
                default:
                    throw std::invalid_argument("generate_synthetic: class out of range");
            }
            for (int64_t c = 0; c < 3; ++c) {
                img[c * hw + y * size + x] += v * tint[c];
            }
        }
    }
    // background noise strong enough that single pixels carry little signal
    for (int64_t i = 0; i < 3 * hw; ++i) {
        img[i] = std::min(1.0, std::max(0.0, img[i] + rng.uniform(0.0, 0.25)));
    }
}

}  // namespace detail

inline Dataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.image_size < 16) {
        throw std::invalid_argument("generate_synthetic: image_size must be >= 16");
    }
    if (spec.num_classes < 1 || spec.num_classes > 4) {
        throw std::invalid_argument("generate_synthetic: num_classes must be in [1,4]");
    }
    const int64_t n = spec.num_classes * spec.samples_per_class;
    Dataset ds;
    ds.images = Tensor({n, 3, spec.image_size, spec.image_size});
    ds.labels.resize(static_cast<size_t>(n));
    const std::vector<std::string> names = {"ring", "disc", "cross", "corner"};
    ds.class_names.assign(names.begin(), names.begin() + spec.num_classes);
    ds.meta = "synthetic(size=" + std::to_string(spec.image_size) +
              ", per_class=" + std::to_string(spec.samples_per_class) +
              ", seed=" + std::to_string(spec.seed) + ")";
    Rng rng(spec.seed);
    const int64_t chw = 3 * spec.image_size * spec.image_size;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t cls = i % spec.num_classes;  // interleaved, exactly balanced
        ds.labels[static_cast<size_t>(i)] = cls;
        detail::draw_synthetic_shape(ds.images.data() + i * chw, spec.image_size, cls, rng);
    }
    quantize_f32(ds.images);
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: records of 3073 bytes (1 label + 3×32×32 pixels,
// channel-major). Pixels scale to [0,1] as byte/255.
// ---------------------------------------------------------------------------

inline Dataset load_cifar10_binary(const std::vector<std::string>& paths) {
    static const std::vector<std::string> kCifarNames = {
        "airplane", "automobile", "bird", "cat",  "deer",
        "dog",      "frog",       "horse", "ship", "truck"};
    constexpr int64_t kRecord = 3073;
    constexpr int64_t kPixels = 3072;
    std::vector<char> bytes;
    for (const auto& path : paths) {
        std::ifstream in(path, std::ios::binary | std::ios::ate);
        if (!in) throw std::runtime_error("load_cifar10_binary: cannot open " + path);
        const std::streamoff total = in.tellg();
        if (total % kRecord != 0) {
            throw std::runtime_error("load_cifar10_binary: " + path + " has " +
                                     std::to_string(total) +
                                     " bytes, not a multiple of the 3073-byte record (stray data "
                                     "begins at byte offset " +
                                     std::to_string((total / kRecord) * kRecord) + ")");
        }
        const size_t old = bytes.size();
        bytes.resize(old + static_cast<size_t>(total));
        in.seekg(0);
        in.read(bytes.data() + old, total);
        if (!in) throw std::runtime_error("load_cifar10_binary: short read on " + path);
    }
    const int64_t n = static_cast<int64_t>(bytes.size()) / kRecord;
    if (n == 0) {
        std::cerr << "warning: load_cifar10_binary: no records found; producing an empty dataset\n";
    }
    Dataset ds;
    ds.images = Tensor({n, 3, 32, 32});
    ds.labels.resize(static_cast<size_t>(n));
    ds.class_names = kCifarNames;
    ds.meta = "cifar10(" + std::to_string(paths.size()) + " files)";
    for (int64_t i = 0; i < n; ++i) {
        const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data() + i * kRecord);
        if (rec[0] > 9) {
            throw std::runtime_error("load_cifar10_binary: record " + std::to_string(i) +
                                     " has label " + std::to_string(int(rec[0])) + " > 9");
        }
        ds.labels[static_cast<size_t>(i)] = rec[0];
        double* dst = ds.images.data() + i * kPixels;
        for (int64_t j = 0; j < kPixels; ++j) {
            dst[j] = static_cast<double>(static_cast<float>(rec[1 + j]) / 255.0f);
        }
    }
    ds.validate();
    return ds;
}

inline Dataset load_cifar10_binary(const std::string& path) {
    return load_cifar10_binary(std::vector<std::string>{path});
}

// ---------------------------------------------------------------------------
// Binary dataset format: magic "EADS", u32 version, u32 N/C/H/W,
// f32 little-endian pixels, u16 labels. A manifest JSON rides alongside.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("dataset read: truncated while reading " + what);
    return v;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
    ds.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
    out.write("EADS", 4);
    detail::write_pod<uint32_t>(out, 1u);
    detail::write_pod<uint32_t>(out, static_cast<uint32_t>(ds.size()));
    detail::write_pod<uint32_t>(out, static_cast<uint32_t>(ds.channels()));
    detail::write_pod<uint32_t>(out, static_cast<uint32_t>(ds.height()));
    detail::write_pod<uint32_t>(out, static_cast<uint32_t>(ds.width()));
    for (int64_t i = 0; i < ds.images.numel(); ++i) {
        detail::write_pod<float>(out, static_cast<float>(ds.images[i]));
    }
    for (int64_t l : ds.labels) detail::write_pod<uint16_t>(out, static_cast<uint16_t>(l));
    if (!out) throw std::runtime_error("save_dataset: write failed for " + path);

    nlohmann::json manifest = {{"format", "EADS"},
                               {"version", 1},
                               {"count", ds.size()},
                               {"channels", ds.channels()},
                               {"height", ds.height()},
                               {"width", ds.width()},
                               {"class_names", ds.class_names},
                               {"meta", ds.meta}};
    std::ofstream mf(path + ".json");
    if (!mf) throw std::runtime_error("save_dataset: cannot open " + path + ".json");
    mf << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "EADS", 4) != 0) {
        throw std::runtime_error("load_dataset: bad magic in " + path);
    }
    const auto version = detail::read_pod<uint32_t>(in, "version");
    if (version != 1) {
        throw std::runtime_error("load_dataset: unsupported version " + std::to_string(version));
    }
    const auto n = detail::read_pod<uint32_t>(in, "count");
    const auto c = detail::read_pod<uint32_t>(in, "channels");
    const auto h = detail::read_pod<uint32_t>(in, "height");
    const auto w = detail::read_pod<uint32_t>(in, "width");
    Dataset ds;
    ds.images = Tensor({n, c, h, w});
    for (int64_t i = 0; i < ds.images.numel(); ++i) {
        ds.images[i] = static_cast<double>(detail::read_pod<float>(in, "pixels"));
    }
    ds.labels.resize(n);
    for (uint32_t i = 0; i < n; ++i) {
        ds.labels[i] = detail::read_pod<uint16_t>(in, "labels");
    }

    std::ifstream mf(path + ".json");
    if (mf) {
        nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, true, true);
        if (manifest.contains("class_names")) {
            ds.class_names = manifest.at("class_names").get<std::vector<std::string>>();
        }
        if (manifest.contains("meta")) ds.meta = manifest.at("meta").get<std::string>();
    }
    if (ds.class_names.empty()) {
        int64_t max_label = -1;
        for (int64_t l : ds.labels) max_label = std::max(max_label, l);
        for (int64_t i = 0; i <= max_label; ++i) {
            ds.class_names.push_back("class" + std::to_string(i));
        }
    }
    ds.validate();
    return ds;
}

}  // namespace eaconv
