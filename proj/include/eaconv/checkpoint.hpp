#pragma once

// Checkpoint persistence. Binary layout: magic "EACP", u32 version (= 1),
// u32 tensor count; then per tensor a u16 name length, the UTF-8 name, a u8
// rank, u64 extents, and the f32 little-endian payload. Core math runs in
// f64; checkpoints round parameters and batchnorm state to f32.
//
// A JSON sidecar at <path>.json carries the filter-bank configuration at the
// top level (kernel_size, sigma, num_basis, transforms) plus the full model
// config and the augmented flag, so load_checkpoint can rebuild the exact
// skeleton before filling in tensors.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "eaconv/model.hpp"
#include "eaconv/tensor.hpp"

namespace eaconv {

namespace detail {

template <typename T>
void write_ckpt_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_ckpt_pod(std::ifstream& in, const std::string& what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint read: truncated while reading " + what);
    return v;
}

/// All persistable tensors of a model, keyed by hierarchical name.
inline std::vector<std::pair<std::string, Tensor*>> checkpoint_tensors(Model& model) {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& p : model.named_params()) out.emplace_back(p.name, &p.param->value);
    for (auto& b : model.named_buffers()) out.emplace_back(b.name, b.buffer);
    return out;
}

}  // namespace detail

inline void save_checkpoint(Model& model, const std::string& path) {
    auto tensors = detail::checkpoint_tensors(model);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out.write("EACP", 4);
    detail::write_ckpt_pod<uint32_t>(out, 1u);
    detail::write_ckpt_pod<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
    for (auto& [name, tensor] : tensors) {
        if (name.size() > 65535) throw std::runtime_error("save_checkpoint: name too long");
        detail::write_ckpt_pod<uint16_t>(out, static_cast<uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_ckpt_pod<uint8_t>(out, static_cast<uint8_t>(tensor->rank()));
        for (int i = 0; i < tensor->rank(); ++i) {
            detail::write_ckpt_pod<uint64_t>(out, static_cast<uint64_t>(tensor->dim(i)));
        }
        for (int64_t i = 0; i < tensor->numel(); ++i) {
            detail::write_ckpt_pod<float>(out, static_cast<float>((*tensor)[i]));
        }
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);

    nlohmann::json sidecar = basis_config_to_json(model.config.basis);
    sidecar["model"] = model_config_to_json(model.config);
    sidecar["augmented"] = model.augmented;
    std::ofstream mf(path + ".json");
    if (!mf) throw std::runtime_error("save_checkpoint: cannot open " + path + ".json");
    mf << sidecar.dump(2) << "\n";
}

/// Reads just the tensor table of a checkpoint file.
inline std::map<std::string, Tensor> load_checkpoint_tensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "EACP", 4) != 0) {
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    }
    const auto version = detail::read_ckpt_pod<uint32_t>(in, "version");
    if (version != 1) {
        throw std::runtime_error("load_checkpoint: unsupported version " +
                                 std::to_string(version));
    }
    const auto count = detail::read_ckpt_pod<uint32_t>(in, "tensor count");
    std::map<std::string, Tensor> tensors;
    for (uint32_t t = 0; t < count; ++t) {
        const auto name_len = detail::read_ckpt_pod<uint16_t>(in, "name length");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw std::runtime_error("checkpoint read: truncated while reading name");
        const auto rank = detail::read_ckpt_pod<uint8_t>(in, "rank of " + name);
        std::vector<int64_t> shape;
        int64_t numel = 1;
        for (uint8_t i = 0; i < rank; ++i) {
            const auto d = detail::read_ckpt_pod<uint64_t>(in, "extent of " + name);
            shape.push_back(static_cast<int64_t>(d));
            numel *= static_cast<int64_t>(d);
        }
        Tensor tensor(shape);
        for (int64_t i = 0; i < numel; ++i) {
            tensor[i] = static_cast<double>(detail::read_ckpt_pod<float>(in, "payload of " + name));
        }
        if (!tensors.emplace(name, std::move(tensor)).second) {
            throw std::runtime_error("load_checkpoint: duplicate tensor '" + name + "' in " +
                                     path);
        }
    }
    return tensors;
}

/// Rebuilds the model skeleton from the sidecar config, then fills every
/// parameter and buffer from the tensor table. Every model tensor must be
/// present with a matching shape, and the file may not carry strays.
inline Model load_checkpoint(const std::string& path) {
    std::ifstream mf(path + ".json");
    if (!mf) {
        throw std::runtime_error("load_checkpoint: missing sidecar " + path + ".json");
    }
    nlohmann::json sidecar = nlohmann::json::parse(mf, nullptr, true, true);
    if (!sidecar.contains("model")) {
        throw std::runtime_error("load_checkpoint: sidecar " + path +
                                 ".json has no model config");
    }
    Model model = build_model(model_config_from_json(sidecar.at("model")),
                              sidecar.value("augmented", false));

    auto tensors = load_checkpoint_tensors(path);
    for (auto& [name, dst] : detail::checkpoint_tensors(model)) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw std::runtime_error("load_checkpoint: missing tensor '" + name + "' in " + path);
        }
        if (!it->second.same_shape(*dst)) {
            throw std::runtime_error("load_checkpoint: tensor '" + name + "' has shape " +
                                     it->second.shape_string() + " but the model expects " +
                                     dst->shape_string());
        }
        *dst = std::move(it->second);
        tensors.erase(it);
    }
    if (!tensors.empty()) {
        throw std::runtime_error("load_checkpoint: unexpected tensor '" +
                                 tensors.begin()->first + "' in " + path);
    }
    return model;
}

}  // namespace eaconv
