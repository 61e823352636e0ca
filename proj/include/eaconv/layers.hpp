#pragma once

// Trainable layers with hand-written backward passes. Each layer owns its
// parameters (as Grad pairs), its batchnorm-style mutable state, and the
// caches from the most recent forward_train call; training is single-writer,
// so layer-held caches are safe. forward_eval is const and cache-free.

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "eaconv/ops.hpp"
#include "eaconv/rng.hpp"
#include "eaconv/tensor.hpp"

namespace eaconv {

/// Handle to one trainable tensor. `weight_decay` marks tensors the optimizer
/// should L2-regularize (conv/linear weights; never biases, batchnorm affine
/// parameters, or path coefficients).
struct NamedParam {
    std::string name;
    Grad* param;
    bool weight_decay;
};

/// Handle to one non-trainable state tensor (batchnorm running statistics).
struct NamedBuffer {
    std::string name;
    Tensor* buffer;
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual std::string kind() const = 0;
    virtual Tensor forward_eval(const Tensor& x) const = 0;
    virtual Tensor forward_train(const Tensor& x, bool update_stats) = 0;
    virtual Tensor backward(const Tensor& grad_out) = 0;
    virtual std::vector<NamedParam> params() { return {}; }
    virtual std::vector<NamedBuffer> buffers() { return {}; }
    void zero_grad() {
        for (auto& p : params()) p.param->zero_grad();
    }
};

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

class Conv2dLayer : public Layer {
public:
    Conv2dLayer(int64_t in_channels, int64_t out_channels, int64_t kernel_size, int64_t stride,
                int64_t padding, Rng& rng)
        : weight_(Tensor({out_channels, in_channels, kernel_size, kernel_size})),
          bias_(Tensor({out_channels})),
          stride_(stride),
          padding_(padding) {
        const double std = std::sqrt(2.0 / static_cast<double>(in_channels * kernel_size *
                                                               kernel_size));
        for (int64_t i = 0; i < weight_.value.numel(); ++i) weight_.value[i] = rng.normal(0.0, std);
    }

    std::string kind() const override { return "conv"; }

    Tensor forward_eval(const Tensor& x) const override { return run(x); }

    Tensor forward_train(const Tensor& x, bool) override {
        input_ = x;
        return run(x);
    }

    Tensor backward(const Tensor& grad_out) override {
        auto [gi, gk] = conv2d_backward(grad_out, input_, weight_.value, stride_, padding_);
        add_inplace(weight_.gradient, gk);
        const int64_t n = grad_out.dim(0), o = grad_out.dim(1), hw = grad_out.dim(2) * grad_out.dim(3);
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t oi = 0; oi < o; ++oi) {
                const double* g = grad_out.data() + (ni * o + oi) * hw;
                double s = 0.0;
                for (int64_t j = 0; j < hw; ++j) s += g[j];
                bias_.gradient[oi] += s;
            }
        return gi;
    }

    std::vector<NamedParam> params() override {
        return {{"weight", &weight_, true}, {"bias", &bias_, false}};
    }

    Grad& weight() { return weight_; }
    Grad& bias() { return bias_; }
    int64_t stride() const { return stride_; }
    int64_t padding() const { return padding_; }

private:
    Tensor run(const Tensor& x) const {
        Tensor out = conv2d(x, weight_.value, stride_, padding_);
        const int64_t n = out.dim(0), o = out.dim(1), hw = out.dim(2) * out.dim(3);
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t oi = 0; oi < o; ++oi) {
                double* p = out.data() + (ni * o + oi) * hw;
                const double b = bias_.value[oi];
                for (int64_t j = 0; j < hw; ++j) p[j] += b;
            }
        return out;
    }

    Grad weight_, bias_;
    int64_t stride_, padding_;
    Tensor input_;
};

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

class BatchNorm2dLayer : public Layer {
public:
    explicit BatchNorm2dLayer(int64_t channels, double momentum = 0.1, double eps = 1e-5)
        : gamma_(Tensor::full({channels}, 1.0)),
          beta_(Tensor({channels})),
          state_{Tensor({channels}), Tensor::full({channels}, 1.0)},
          momentum_(momentum),
          eps_(eps) {}

    std::string kind() const override { return "batchnorm"; }

    Tensor forward_eval(const Tensor& x) const override {
        auto state_copy = state_;  // inference never mutates running stats
        return batchnorm2d(x, gamma_.value, beta_.value, state_copy, momentum_, eps_, false,
                           false);
    }

    Tensor forward_train(const Tensor& x, bool update_stats) override {
        return batchnorm2d(x, gamma_.value, beta_.value, state_, momentum_, eps_, true,
                           update_stats, &cache_);
    }

    Tensor backward(const Tensor& grad_out) override {
        auto g = batchnorm2d_backward(grad_out, cache_, gamma_.value);
        add_inplace(gamma_.gradient, g.grad_gamma);
        add_inplace(beta_.gradient, g.grad_beta);
        return g.grad_input;
    }

    std::vector<NamedParam> params() override {
        return {{"gamma", &gamma_, false}, {"beta", &beta_, false}};
    }
    std::vector<NamedBuffer> buffers() override {
        return {{"running_mean", &state_.running_mean}, {"running_var", &state_.running_var}};
    }

    Grad& gamma() { return gamma_; }
    Grad& beta() { return beta_; }
    BatchNormState& state() { return state_; }

private:
    Grad gamma_, beta_;
    BatchNormState state_;
    double momentum_, eps_;
    BatchNormCache cache_;
};

// ---------------------------------------------------------------------------
// ReLU / pooling / linear
// ---------------------------------------------------------------------------

class ReluLayer : public Layer {
public:
    std::string kind() const override { return "relu"; }
    Tensor forward_eval(const Tensor& x) const override { return relu(x); }
    Tensor forward_train(const Tensor& x, bool) override {
        input_ = x;
        return relu(x);
    }
    Tensor backward(const Tensor& grad_out) override { return relu_backward(grad_out, input_); }

private:
    Tensor input_;
};

class MaxPool2dLayer : public Layer {
public:
    MaxPool2dLayer(int64_t window, int64_t stride) : window_(window), stride_(stride) {}
    std::string kind() const override { return "maxpool"; }
    Tensor forward_eval(const Tensor& x) const override {
        return maxpool2d(x, window_, stride_).output;
    }
    Tensor forward_train(const Tensor& x, bool) override {
        input_shape_ = x.shape();
        auto r = maxpool2d(x, window_, stride_);
        argmax_ = std::move(r.argmax);
        return std::move(r.output);
    }
    Tensor backward(const Tensor& grad_out) override {
        return maxpool2d_backward(grad_out, argmax_, input_shape_);
    }

private:
    int64_t window_, stride_;
    std::vector<int64_t> input_shape_;
    std::vector<int64_t> argmax_;
};

class GlobalAvgPoolLayer : public Layer {
public:
    std::string kind() const override { return "gap"; }
    Tensor forward_eval(const Tensor& x) const override { return global_avg_pool(x); }
    Tensor forward_train(const Tensor& x, bool) override {
        h_ = x.dim(2);
        w_ = x.dim(3);
        return global_avg_pool(x);
    }
    Tensor backward(const Tensor& grad_out) override {
        return global_avg_pool_backward(grad_out, h_, w_);
    }

private:
    int64_t h_ = 0, w_ = 0;
};

class LinearLayer : public Layer {
public:
    LinearLayer(int64_t in_features, int64_t out_features, Rng& rng)
        : weight_(Tensor({out_features, in_features})), bias_(Tensor({out_features})) {
        const double std = std::sqrt(2.0 / static_cast<double>(in_features));
        for (int64_t i = 0; i < weight_.value.numel(); ++i) weight_.value[i] = rng.normal(0.0, std);
    }

    std::string kind() const override { return "linear"; }
    Tensor forward_eval(const Tensor& x) const override {
        return linear(x, weight_.value, bias_.value);
    }
    Tensor forward_train(const Tensor& x, bool) override {
        input_ = x;
        return linear(x, weight_.value, bias_.value);
    }
    Tensor backward(const Tensor& grad_out) override {
        auto g = linear_backward(grad_out, input_, weight_.value);
        add_inplace(weight_.gradient, g.grad_weight);
        add_inplace(bias_.gradient, g.grad_bias);
        return g.grad_input;
    }
    std::vector<NamedParam> params() override {
        return {{"weight", &weight_, true}, {"bias", &bias_, false}};
    }

    Grad& weight() { return weight_; }
    Grad& bias() { return bias_; }

private:
    Grad weight_, bias_;
    Tensor input_;
};

// ---------------------------------------------------------------------------
// Standard residual block: out = skip(f) + G(f), G = bn2∘conv2∘relu∘bn1∘conv1
// with an optional 1×1 projection when channel counts differ. No activation
// after the addition, so a zero branch leaves f untouched.
// ---------------------------------------------------------------------------

class ResBlock : public Layer {
public:
    ResBlock(int64_t in_channels, int64_t out_channels, Rng& rng)
        : conv1_(in_channels, out_channels, 3, 1, 1, rng),
          bn1_(out_channels),
          conv2_(out_channels, out_channels, 3, 1, 1, rng),
          bn2_(out_channels),
          has_projection_(in_channels != out_channels),
          projection_(in_channels, out_channels, 1, 1, 0, rng) {}

    std::string kind() const override { return "resblock"; }

    Tensor forward_eval(const Tensor& x) const override {
        Tensor branch = bn2_.forward_eval(
            conv2_.forward_eval(relu(bn1_.forward_eval(conv1_.forward_eval(x)))));
        Tensor skip = has_projection_ ? projection_.forward_eval(x) : x;
        return add(skip, branch);
    }

    Tensor forward_train(const Tensor& x, bool update_stats) override {
        Tensor a = conv1_.forward_train(x, update_stats);
        Tensor b = bn1_.forward_train(a, update_stats);
        relu_input_ = b;
        Tensor c = relu(b);
        Tensor d = conv2_.forward_train(c, update_stats);
        Tensor branch = bn2_.forward_train(d, update_stats);
        Tensor skip = has_projection_ ? projection_.forward_train(x, update_stats) : x;
        return add(skip, branch);
    }

    Tensor backward(const Tensor& grad_out) override {
        Tensor g = bn2_.backward(grad_out);
        g = conv2_.backward(g);
        g = relu_backward(g, relu_input_);
        g = bn1_.backward(g);
        Tensor grad_in = conv1_.backward(g);
        if (has_projection_) {
            add_inplace(grad_in, projection_.backward(grad_out));
        } else {
            add_inplace(grad_in, grad_out);
        }
        return grad_in;
    }

    std::vector<NamedParam> params() override {
        std::vector<NamedParam> out;
        auto absorb = [&out](const std::string& prefix, std::vector<NamedParam> ps) {
            for (auto& p : ps) out.push_back({prefix + "." + p.name, p.param, p.weight_decay});
        };
        absorb("conv1", conv1_.params());
        absorb("bn1", bn1_.params());
        absorb("conv2", conv2_.params());
        absorb("bn2", bn2_.params());
        if (has_projection_) absorb("projection", projection_.params());
        return out;
    }

    std::vector<NamedBuffer> buffers() override {
        std::vector<NamedBuffer> out;
        for (auto& b : bn1_.buffers()) out.push_back({"bn1." + b.name, b.buffer});
        for (auto& b : bn2_.buffers()) out.push_back({"bn2." + b.name, b.buffer});
        return out;
    }

    Conv2dLayer& conv1() { return conv1_; }
    Conv2dLayer& conv2() { return conv2_; }
    BatchNorm2dLayer& bn1() { return bn1_; }
    BatchNorm2dLayer& bn2() { return bn2_; }
    bool has_projection() const { return has_projection_; }
    Conv2dLayer& projection() { return projection_; }

private:
    Conv2dLayer conv1_;
    BatchNorm2dLayer bn1_;
    Conv2dLayer conv2_;
    BatchNorm2dLayer bn2_;
    bool has_projection_;
    Conv2dLayer projection_;
    Tensor relu_input_;
};

}  // namespace eaconv
