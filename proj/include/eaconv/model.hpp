#pragma once

// Model assembly from a JSON-serializable config, plus weight transfer from a
// standard network into its elastically-augmented counterpart. A single
// config describes both networks: layers marked augment (or written as
// eaconv/earesblock) become EA layers when built in augmented mode and plain
// layers otherwise, which guarantees the two skeletons always match.

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "eaconv/basis.hpp"
#include "eaconv/ealayers.hpp"
#include "eaconv/layers.hpp"
#include "eaconv/linalg.hpp"
#include "eaconv/rng.hpp"
#include "eaconv/tensor.hpp"

namespace eaconv {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct LayerSpec {
    std::string type;          // conv | eaconv | batchnorm | relu | maxpool | gap | linear |
                               // resblock | earesblock
    int64_t out_channels = 0;  // conv/eaconv/resblock/earesblock
    int64_t kernel_size = 3;   // conv only (EA kernels take the bank's size)
    int64_t stride = 1;
    int64_t padding = -1;      // -1 means "same": (kernel_size-1)/2
    int64_t window = 2;        // maxpool
    int64_t out_features = 0;  // linear
    bool augment = false;      // promote conv→eaconv, resblock→earesblock in augmented mode
};

struct ModelConfig {
    int64_t input_channels = 3;
    int64_t input_size = 32;
    int64_t num_classes = 4;
    uint64_t seed = 1234;
    BasisConfig basis;
    std::vector<LayerSpec> layers;
};

inline nlohmann::json basis_config_to_json(const BasisConfig& cfg) {
    nlohmann::json transforms = nlohmann::json::array();
    for (const auto& t : cfg.transforms) {
        transforms.push_back({{"alpha", t.alpha}, {"theta", t.theta}});
    }
    return {{"kernel_size", cfg.kernel_size},
            {"sigma", cfg.sigma},
            {"num_basis", cfg.num_basis},
            {"transforms", transforms}};
}

inline BasisConfig basis_config_from_json(const nlohmann::json& j) {
    BasisConfig cfg;
    cfg.kernel_size = j.at("kernel_size").get<int64_t>();
    cfg.sigma = j.at("sigma").get<double>();
    if (j.contains("num_basis")) {
        cfg.num_basis = j.at("num_basis").get<int64_t>();
    } else {
        cfg.num_basis = cfg.kernel_size * cfg.kernel_size;
    }
    if (j.contains("transforms")) {
        cfg.transforms.clear();
        for (const auto& t : j.at("transforms")) {
            cfg.transforms.push_back({t.at("alpha").get<double>(), t.at("theta").get<double>()});
        }
    } else if (j.contains("alpha")) {
        cfg.transforms = default_transforms(j.at("alpha").get<double>());
    }
    cfg.validate();
    return cfg;
}

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : cfg.layers) {
        nlohmann::json j = {{"type", l.type}};
        if (l.type == "conv" || l.type == "eaconv" || l.type == "resblock" ||
            l.type == "earesblock") {
            j["out_channels"] = l.out_channels;
        }
        if (l.type == "conv" || l.type == "eaconv") {
            j["kernel_size"] = l.kernel_size;
            j["stride"] = l.stride;
            j["padding"] = l.padding;
        }
        if (l.type == "maxpool") {
            j["window"] = l.window;
            j["stride"] = l.stride;
        }
        if (l.type == "linear") j["out_features"] = l.out_features;
        if (l.augment) j["augment"] = true;
        layers.push_back(j);
    }
    return {{"input_channels", cfg.input_channels},
            {"input_size", cfg.input_size},
            {"num_classes", cfg.num_classes},
            {"seed", cfg.seed},
            {"basis", basis_config_to_json(cfg.basis)},
            {"layers", layers}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.input_channels = j.at("input_channels").get<int64_t>();
    cfg.input_size = j.at("input_size").get<int64_t>();
    cfg.num_classes = j.at("num_classes").get<int64_t>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
    if (j.contains("basis")) cfg.basis = basis_config_from_json(j.at("basis"));
    for (const auto& lj : j.at("layers")) {
        LayerSpec l;
        l.type = lj.at("type").get<std::string>();
        if (lj.contains("out_channels")) l.out_channels = lj.at("out_channels").get<int64_t>();
        if (lj.contains("kernel_size")) l.kernel_size = lj.at("kernel_size").get<int64_t>();
        if (lj.contains("padding")) l.padding = lj.at("padding").get<int64_t>();
        if (lj.contains("window")) l.window = lj.at("window").get<int64_t>();
        if (lj.contains("stride")) {
            l.stride = lj.at("stride").get<int64_t>();
        } else if (l.type == "maxpool") {
            l.stride = l.window;  // non-overlapping pooling unless stated
        }
        if (lj.contains("out_features")) l.out_features = lj.at("out_features").get<int64_t>();
        if (lj.contains("augment")) l.augment = lj.at("augment").get<bool>();
        cfg.layers.push_back(l);
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class Model {
public:
    std::vector<std::unique_ptr<Layer>> layers;
    std::shared_ptr<const BasisBank> bank;  // null when no EA layer is present
    ModelConfig config;
    bool augmented = false;

    Tensor forward_eval(const Tensor& x) const {
        Tensor t = x;
        for (const auto& l : layers) t = l->forward_eval(t);
        return t;
    }

    Tensor forward_train(const Tensor& x, bool update_stats) {
        Tensor t = x;
        for (auto& l : layers) t = l->forward_train(t, update_stats);
        return t;
    }

    /// Backpropagates the logit gradient through the whole stack; parameter
    /// gradients accumulate inside the layers.
    Tensor backward(const Tensor& grad_logits) {
        Tensor g = grad_logits;
        for (auto it = layers.rbegin(); it != layers.rend(); ++it) g = (*it)->backward(g);
        return g;
    }

    void zero_grad() {
        for (auto& l : layers) l->zero_grad();
    }

    std::vector<NamedParam> named_params() {
        std::vector<NamedParam> out;
        for (size_t i = 0; i < layers.size(); ++i) {
            for (auto& p : layers[i]->params()) {
                out.push_back({"layer" + std::to_string(i) + "." + p.name, p.param,
                               p.weight_decay});
            }
        }
        return out;
    }

    std::vector<NamedBuffer> named_buffers() {
        std::vector<NamedBuffer> out;
        for (size_t i = 0; i < layers.size(); ++i) {
            for (auto& b : layers[i]->buffers()) {
                out.push_back({"layer" + std::to_string(i) + "." + b.name, b.buffer});
            }
        }
        return out;
    }

    int64_t param_count() {
        int64_t n = 0;
        for (auto& p : named_params()) n += p.param->value.numel();
        return n;
    }
};

/// Assembles a model from the config. In augmented mode, layers written as
/// eaconv/earesblock or marked augment become EA layers; otherwise every
/// layer is built as its standard counterpart. The assembled stack is
/// validated by a dry forward pass on a zero image.
inline Model build_model(const ModelConfig& config, bool augmented) {
    if (config.layers.empty()) throw std::invalid_argument("build_model: empty layer list");
    Model model;
    model.config = config;
    model.augmented = augmented;

    bool needs_bank = false;
    if (augmented) {
        for (const auto& l : config.layers) {
            if (l.type == "eaconv" || l.type == "earesblock" || l.augment) needs_bank = true;
        }
    }
    if (needs_bank) {
        model.bank = std::make_shared<const BasisBank>(build_basis_bank(config.basis));
    }

    Rng rng(config.seed);
    int64_t channels = config.input_channels;
    for (size_t i = 0; i < config.layers.size(); ++i) {
        const LayerSpec& l = config.layers[i];
        const bool ea = augmented && (l.type == "eaconv" || l.type == "earesblock" || l.augment);
        try {
            if (l.type == "conv" || l.type == "eaconv") {
                if (l.out_channels < 1) throw std::invalid_argument("out_channels missing");
                if (ea) {
                    if (l.kernel_size != config.basis.kernel_size) {
                        throw std::invalid_argument(
                            "kernel_size " + std::to_string(l.kernel_size) +
                            " must equal basis kernel_size " +
                            std::to_string(config.basis.kernel_size) + " for an augmented conv");
                    }
                    const int64_t pad = l.padding >= 0 ? l.padding : (l.kernel_size - 1) / 2;
                    model.layers.push_back(std::make_unique<EAConvLayer>(
                        model.bank, channels, l.out_channels, l.stride, pad, rng));
                } else {
                    const int64_t pad = l.padding >= 0 ? l.padding : (l.kernel_size - 1) / 2;
                    model.layers.push_back(std::make_unique<Conv2dLayer>(
                        channels, l.out_channels, l.kernel_size, l.stride, pad, rng));
                }
                channels = l.out_channels;
            } else if (l.type == "resblock" || l.type == "earesblock") {
                if (l.out_channels < 1) throw std::invalid_argument("out_channels missing");
                if (ea) {
                    model.layers.push_back(std::make_unique<EAResBlock>(model.bank, channels,
                                                                        l.out_channels, rng));
                } else {
                    model.layers.push_back(
                        std::make_unique<ResBlock>(channels, l.out_channels, rng));
                }
                channels = l.out_channels;
            } else if (l.type == "batchnorm") {
                model.layers.push_back(std::make_unique<BatchNorm2dLayer>(channels));
            } else if (l.type == "relu") {
                model.layers.push_back(std::make_unique<ReluLayer>());
            } else if (l.type == "maxpool") {
                model.layers.push_back(std::make_unique<MaxPool2dLayer>(l.window, l.stride));
            } else if (l.type == "gap") {
                model.layers.push_back(std::make_unique<GlobalAvgPoolLayer>());
            } else if (l.type == "linear") {
                if (l.out_features < 1) throw std::invalid_argument("out_features missing");
                model.layers.push_back(std::make_unique<LinearLayer>(channels, l.out_features, rng));
                channels = l.out_features;
            } else {
                throw std::invalid_argument("unknown layer type '" + l.type + "'");
            }
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("build_model: layer " + std::to_string(i) + " (" +
                                        l.type + "): " + e.what());
        }
    }

    // dry forward to validate the shape chain end to end
    Tensor probe({1, config.input_channels, config.input_size, config.input_size});
    Tensor logits;
    try {
        logits = model.forward_eval(probe);
    } catch (const std::exception& e) {
        throw std::invalid_argument(std::string("build_model: shape chain invalid: ") + e.what());
    }
    if (logits.rank() != 2 || logits.dim(1) != config.num_classes) {
        throw std::invalid_argument("build_model: final output " + logits.shape_string() +
                                    " does not produce num_classes=" +
                                    std::to_string(config.num_classes) + " logits");
    }
    return model;
}

// ---------------------------------------------------------------------------
// Weight transfer
// ---------------------------------------------------------------------------

namespace detail {

/// Per-bank least-squares projector onto the identity-path filters.
/// Requires a complete bank (B == k²) so the projection is exact.
class BasisProjector {
public:
    explicit BasisProjector(const BasisBank& bank)
        : b_count_(bank.num_basis()), kk_(bank.kernel_size() * bank.kernel_size()) {
        if (b_count_ != kk_) {
            throw std::invalid_argument(
                "transfer_weights: bank must be complete (num_basis == k²) for exact "
                "projection; got B=" + std::to_string(b_count_) + ", k²=" + std::to_string(kk_));
        }
        design_ = Tensor({kk_, b_count_});
        for (int64_t b = 0; b < b_count_; ++b)
            for (int64_t i = 0; i < kk_; ++i) design_.at2(i, b) = bank.filters[b * kk_ + i];
        Tensor gram({b_count_, b_count_});
        for (int64_t i = 0; i < b_count_; ++i)
            for (int64_t j = i; j < b_count_; ++j) {
                double s = 0.0;
                for (int64_t r = 0; r < kk_; ++r) s += design_.at2(r, i) * design_.at2(r, j);
                gram.at2(i, j) = s;
                gram.at2(j, i) = s;
            }
        chol_ = cholesky(gram);  // throws with a conditioning report if rank-deficient
    }

    /// Solves w = argmin ‖design·w − kernel‖² for one flattened k×k kernel.
    Tensor project(const double* kernel) const {
        Tensor rhs({b_count_});
        for (int64_t b = 0; b < b_count_; ++b) {
            double s = 0.0;
            for (int64_t r = 0; r < kk_; ++r) s += design_.at2(r, b) * kernel[r];
            rhs[b] = s;
        }
        return cholesky_solve(chol_, rhs);
    }

private:
    int64_t b_count_, kk_;
    Tensor design_;
    Tensor chol_;
};

inline void copy_matching_layer(Layer& src, Layer& dst, size_t index) {
    auto sp = src.params();
    auto dp = dst.params();
    if (sp.size() != dp.size()) {
        throw std::invalid_argument("transfer_weights: layer " + std::to_string(index) +
                                    " parameter lists differ");
    }
    for (size_t i = 0; i < sp.size(); ++i) {
        if (sp[i].name != dp[i].name ||
            !sp[i].param->value.same_shape(dp[i].param->value)) {
            throw std::invalid_argument("transfer_weights: layer " + std::to_string(index) +
                                        " parameter '" + sp[i].name + "' mismatch");
        }
        dp[i].param->value = sp[i].param->value;
    }
    auto sb = src.buffers();
    auto db = dst.buffers();
    for (size_t i = 0; i < sb.size(); ++i) *db[i].buffer = *sb[i].buffer;
}

/// Projects a spatial [O,C,k,k] kernel tensor onto basis coefficients [O,C,B].
inline void project_kernel(const BasisProjector& proj, const Tensor& kernel, Tensor& w) {
    const int64_t oc = kernel.dim(0) * kernel.dim(1);
    const int64_t kk = kernel.dim(2) * kernel.dim(3);
    const int64_t b_count = w.dim(2);
    for (int64_t i = 0; i < oc; ++i) {
        Tensor coeff = proj.project(kernel.data() + i * kk);
        for (int64_t b = 0; b < b_count; ++b) w[i * b_count + b] = coeff[b];
    }
}

}  // namespace detail

/// Initializes an EA model from a trained standard model: basis-coefficient
/// weights are the least-squares projection of the standard kernels onto the
/// identity-path basis (exact for complete banks), beta is reset to
/// [1, 0, ..., 0], and every non-augmented layer (including 1×1 projections
/// and batchnorm state) is copied verbatim.
inline void transfer_weights(Model& standard, Model& ea) {
    if (standard.layers.size() != ea.layers.size()) {
        throw std::invalid_argument("transfer_weights: models have different layer counts (" +
                                    std::to_string(standard.layers.size()) + " vs " +
                                    std::to_string(ea.layers.size()) + ")");
    }
    for (size_t i = 0; i < standard.layers.size(); ++i) {
        Layer& src = *standard.layers[i];
        Layer& dst = *ea.layers[i];
        const std::string sk = src.kind(), dk = dst.kind();
        if (sk == dk) {
            detail::copy_matching_layer(src, dst, i);
        } else if (sk == "conv" && dk == "eaconv") {
            auto& conv = static_cast<Conv2dLayer&>(src);
            auto& eac = static_cast<EAConvLayer&>(dst);
            if (conv.stride() != eac.stride() || conv.padding() != eac.padding()) {
                throw std::invalid_argument("transfer_weights: layer " + std::to_string(i) +
                                            " stride/padding mismatch");
            }
            detail::BasisProjector proj(eac.bank());
            detail::project_kernel(proj, conv.weight().value, eac.w().value);
            eac.bias().value = conv.bias().value;
            eac.beta().value = Tensor({eac.bank().num_paths()});
            eac.beta().value[0] = 1.0;
        } else if (sk == "resblock" && dk == "earesblock") {
            auto& block = static_cast<ResBlock&>(src);
            auto& eab = static_cast<EAResBlock&>(dst);
            detail::BasisProjector proj(eab.bank());
            detail::project_kernel(proj, block.conv1().weight().value, eab.w1().value);
            detail::project_kernel(proj, block.conv2().weight().value, eab.w2().value);
            eab.bias1().value = block.conv1().bias().value;
            eab.bias2().value = block.conv2().bias().value;
            eab.gamma1().value = block.bn1().gamma().value;
            eab.bnbeta1().value = block.bn1().beta().value;
            eab.gamma2().value = block.bn2().gamma().value;
            eab.bnbeta2().value = block.bn2().beta().value;
            eab.state1() = block.bn1().state();
            eab.state2() = block.bn2().state();
            if (block.has_projection() != eab.has_projection()) {
                throw std::invalid_argument("transfer_weights: layer " + std::to_string(i) +
                                            " projection mismatch");
            }
            if (block.has_projection()) {
                eab.projection().weight().value = block.projection().weight().value;
                eab.projection().bias().value = block.projection().bias().value;
            }
            eab.beta().value = Tensor({eab.bank().num_paths()});
            eab.beta().value[0] = 1.0;
        } else {
            throw std::invalid_argument("transfer_weights: layer " + std::to_string(i) +
                                        " kinds incompatible (" + sk + " vs " + dk + ")");
        }
    }
}

}  // namespace eaconv
