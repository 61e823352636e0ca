#pragma once

// Elastically-augmented layers. An EAConv layer owns basis-coefficient
// weights shared across transformation paths plus per-path coefficients beta;
// its output is the per-pixel maximum over the beta-scaled responses of each
// path's synthesized kernel. At initialization beta = [1, 0, ..., 0] and the
// maximum runs only over paths with beta != 0, so a fresh layer is exactly a
// standard convolution with the path-0 kernel.

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "eaconv/basis.hpp"
#include "eaconv/layers.hpp"
#include "eaconv/ops.hpp"
#include "eaconv/rng.hpp"
#include "eaconv/tensor.hpp"

namespace eaconv {

namespace detail {

/// Copies one path's [O,C,k,k] kernel slice out of a [P,O,C,k,k] stack.
inline Tensor path_kernel(const Tensor& kernels, int64_t p) {
    const int64_t o = kernels.dim(1), c = kernels.dim(2), k = kernels.dim(3);
    const int64_t slice = o * c * k * k;
    Tensor out({o, c, k, k});
    const double* src = kernels.data() + p * slice;
    for (int64_t i = 0; i < slice; ++i) out[i] = src[i];
    return out;
}

inline void add_channel_bias(Tensor& x, const Tensor& bias) {
    const int64_t n = x.dim(0), o = x.dim(1), hw = x.dim(2) * x.dim(3);
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t oi = 0; oi < o; ++oi) {
            double* p = x.data() + (ni * o + oi) * hw;
            const double b = bias[oi];
            for (int64_t j = 0; j < hw; ++j) p[j] += b;
        }
}

inline void accumulate_channel_bias_grad(const Tensor& grad_out, Tensor& grad_bias) {
    const int64_t n = grad_out.dim(0), o = grad_out.dim(1),
                  hw = grad_out.dim(2) * grad_out.dim(3);
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t oi = 0; oi < o; ++oi) {
            const double* g = grad_out.data() + (ni * o + oi) * hw;
            double s = 0.0;
            for (int64_t j = 0; j < hw; ++j) s += g[j];
            grad_bias[oi] += s;
        }
}

/// Paths participating in the max: exactly those with beta != 0.
inline std::vector<int64_t> active_paths(const Tensor& beta) {
    std::vector<int64_t> active;
    for (int64_t p = 0; p < beta.numel(); ++p)
        if (beta[p] != 0.0) active.push_back(p);
    if (active.empty()) {
        throw std::runtime_error("EAConv: all path coefficients are zero; no path to evaluate");
    }
    return active;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// EAConvLayer
// ---------------------------------------------------------------------------

class EAConvLayer : public Layer {
public:
    EAConvLayer(std::shared_ptr<const BasisBank> bank, int64_t in_channels, int64_t out_channels,
                int64_t stride, int64_t padding, Rng& rng)
        : bank_(std::move(bank)),
          w_(Tensor({out_channels, in_channels, bank_->num_basis()})),
          beta_(Tensor({bank_->num_paths()})),
          bias_(Tensor({out_channels})),
          stride_(stride),
          padding_(padding) {
        const int64_t k = bank_->kernel_size();
        const double std = std::sqrt(2.0 / static_cast<double>(in_channels * k * k));
        for (int64_t i = 0; i < w_.value.numel(); ++i) w_.value[i] = rng.normal(0.0, std);
        beta_.value[0] = 1.0;
    }

    std::string kind() const override { return "eaconv"; }

    Tensor forward_eval(const Tensor& x) const override {
        const Tensor kernels = synthesize_kernels(*bank_, w_.value);
        const auto active = detail::active_paths(beta_.value);
        Tensor out;
        for (size_t a = 0; a < active.size(); ++a) {
            Tensor r = conv2d(x, detail::path_kernel(kernels, active[a]), stride_, padding_);
            scale_inplace(r, beta_.value[active[a]]);
            if (a == 0) {
                out = std::move(r);
            } else {
                for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], r[i]);
            }
        }
        detail::add_channel_bias(out, bias_.value);
        return out;
    }

    Tensor forward_train(const Tensor& x, bool) override {
        input_ = x;
        kernels_ = synthesize_kernels(*bank_, w_.value);
        active_ = detail::active_paths(beta_.value);
        responses_.clear();
        responses_.reserve(active_.size());
        Tensor stack;
        for (size_t a = 0; a < active_.size(); ++a) {
            Tensor r = conv2d(x, detail::path_kernel(kernels_, active_[a]), stride_, padding_);
            if (a == 0) {
                stack = Tensor({static_cast<int64_t>(active_.size()), r.dim(0), r.dim(1),
                                r.dim(2), r.dim(3)});
            }
            double* dst = stack.data() + static_cast<int64_t>(a) * r.numel();
            const double b = beta_.value[active_[a]];
            for (int64_t i = 0; i < r.numel(); ++i) dst[i] = b * r[i];
            responses_.push_back(std::move(r));
        }
        auto m = pixelwise_max(stack);
        argmax_ = std::move(m.argmax);
        detail::add_channel_bias(m.output, bias_.value);
        return std::move(m.output);
    }

    Tensor backward(const Tensor& grad_out) override {
        detail::accumulate_channel_bias_grad(grad_out, bias_.gradient);
        const Tensor grad_stack =
            pixelwise_max_backward(grad_out, argmax_, static_cast<int64_t>(active_.size()));
        Tensor grad_input(input_.shape());
        Tensor grad_kernels(kernels_.shape());
        const int64_t slice = grad_out.numel();
        const int64_t kernel_slice = grad_kernels.numel() / grad_kernels.dim(0);
        for (size_t a = 0; a < active_.size(); ++a) {
            const int64_t p = active_[a];
            Tensor grad_scaled(grad_out.shape());
            const double* gs = grad_stack.data() + static_cast<int64_t>(a) * slice;
            const Tensor& r = responses_[a];
            double beta_acc = 0.0;
            for (int64_t i = 0; i < slice; ++i) {
                beta_acc += gs[i] * r[i];
                grad_scaled[i] = gs[i] * beta_.value[p];
            }
            beta_.gradient[p] += beta_acc;
            auto [gi, gk] = conv2d_backward(grad_scaled, input_, detail::path_kernel(kernels_, p),
                                            stride_, padding_);
            add_inplace(grad_input, gi);
            double* dst = grad_kernels.data() + p * kernel_slice;
            for (int64_t i = 0; i < kernel_slice; ++i) dst[i] = gk[i];
        }
        add_inplace(w_.gradient, synthesize_kernels_backward(*bank_, grad_kernels));
        return grad_input;
    }

    std::vector<NamedParam> params() override {
        return {{"w", &w_, true}, {"beta", &beta_, false}, {"bias", &bias_, false}};
    }

    const BasisBank& bank() const { return *bank_; }
    std::shared_ptr<const BasisBank> bank_ptr() const { return bank_; }
    Grad& w() { return w_; }
    Grad& beta() { return beta_; }
    Grad& bias() { return bias_; }
    int64_t stride() const { return stride_; }
    int64_t padding() const { return padding_; }

private:
    std::shared_ptr<const BasisBank> bank_;
    Grad w_, beta_, bias_;
    int64_t stride_, padding_;

    Tensor input_, kernels_;
    std::vector<int64_t> active_;
    std::vector<Tensor> responses_;  // pre-beta conv responses, active paths only
    std::vector<int32_t> argmax_;
};

// ---------------------------------------------------------------------------
// EAResBlock: out = skip(f) + max_p[ beta_p · G_p(f) ] where
// G_p = bn2 ∘ conv2(path-p kernel) ∘ relu ∘ bn1 ∘ conv1(path-p kernel).
// Batchnorm parameters are shared across paths; each path normalizes with its
// own batch statistics in training, and the running buffers absorb only the
// first active path's statistics. One beta vector per block.
// ---------------------------------------------------------------------------

class EAResBlock : public Layer {
public:
    EAResBlock(std::shared_ptr<const BasisBank> bank, int64_t in_channels, int64_t out_channels,
               Rng& rng)
        : bank_(std::move(bank)),
          w1_(Tensor({out_channels, in_channels, bank_->num_basis()})),
          w2_(Tensor({out_channels, out_channels, bank_->num_basis()})),
          beta_(Tensor({bank_->num_paths()})),
          bias1_(Tensor({out_channels})),
          bias2_(Tensor({out_channels})),
          gamma1_(Tensor::full({out_channels}, 1.0)),
          bnbeta1_(Tensor({out_channels})),
          gamma2_(Tensor::full({out_channels}, 1.0)),
          bnbeta2_(Tensor({out_channels})),
          state1_{Tensor({out_channels}), Tensor::full({out_channels}, 1.0)},
          state2_{Tensor({out_channels}), Tensor::full({out_channels}, 1.0)},
          has_projection_(in_channels != out_channels),
          projection_(in_channels, out_channels, 1, 1, 0, rng),
          padding_((bank_->kernel_size() - 1) / 2) {
        const int64_t k = bank_->kernel_size();
        const double std1 = std::sqrt(2.0 / static_cast<double>(in_channels * k * k));
        const double std2 = std::sqrt(2.0 / static_cast<double>(out_channels * k * k));
        for (int64_t i = 0; i < w1_.value.numel(); ++i) w1_.value[i] = rng.normal(0.0, std1);
        for (int64_t i = 0; i < w2_.value.numel(); ++i) w2_.value[i] = rng.normal(0.0, std2);
        beta_.value[0] = 1.0;
    }

    std::string kind() const override { return "earesblock"; }

    Tensor forward_eval(const Tensor& x) const override {
        const Tensor k1 = synthesize_kernels(*bank_, w1_.value);
        const Tensor k2 = synthesize_kernels(*bank_, w2_.value);
        const auto active = detail::active_paths(beta_.value);
        auto st1 = state1_;
        auto st2 = state2_;
        Tensor out;
        for (size_t a = 0; a < active.size(); ++a) {
            const int64_t p = active[a];
            Tensor t = conv2d(x, detail::path_kernel(k1, p), 1, padding_);
            detail::add_channel_bias(t, bias1_.value);
            t = batchnorm2d(t, gamma1_.value, bnbeta1_.value, st1, 0.1, 1e-5, false, false);
            t = relu(t);
            t = conv2d(t, detail::path_kernel(k2, p), 1, padding_);
            detail::add_channel_bias(t, bias2_.value);
            t = batchnorm2d(t, gamma2_.value, bnbeta2_.value, st2, 0.1, 1e-5, false, false);
            scale_inplace(t, beta_.value[p]);
            if (a == 0) {
                out = std::move(t);
            } else {
                for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], t[i]);
            }
        }
        Tensor skip = has_projection_ ? projection_.forward_eval(x) : x;
        require_same_shape(skip, out, "earesblock skip/branch");
        add_inplace(out, skip);
        return out;
    }

    Tensor forward_train(const Tensor& x, bool update_stats) override {
        input_ = x;
        kernels1_ = synthesize_kernels(*bank_, w1_.value);
        kernels2_ = synthesize_kernels(*bank_, w2_.value);
        active_ = detail::active_paths(beta_.value);
        const size_t a_count = active_.size();
        bn1_caches_.assign(a_count, {});
        bn2_caches_.assign(a_count, {});
        relu_inputs_.assign(a_count, Tensor());
        conv2_inputs_.assign(a_count, Tensor());
        branches_.assign(a_count, Tensor());

        Tensor stack;
        for (size_t a = 0; a < a_count; ++a) {
            const int64_t p = active_[a];
            const bool stats = update_stats && a == 0;
            Tensor t = conv2d(x, detail::path_kernel(kernels1_, p), 1, padding_);
            detail::add_channel_bias(t, bias1_.value);
            t = batchnorm2d(t, gamma1_.value, bnbeta1_.value, state1_, 0.1, 1e-5, true, stats,
                            &bn1_caches_[a]);
            relu_inputs_[a] = t;
            t = relu(t);
            conv2_inputs_[a] = t;
            t = conv2d(t, detail::path_kernel(kernels2_, p), 1, padding_);
            detail::add_channel_bias(t, bias2_.value);
            t = batchnorm2d(t, gamma2_.value, bnbeta2_.value, state2_, 0.1, 1e-5, true, stats,
                            &bn2_caches_[a]);
            branches_[a] = std::move(t);
            if (a == 0) {
                const Tensor& b0 = branches_[0];
                stack = Tensor({static_cast<int64_t>(a_count), b0.dim(0), b0.dim(1), b0.dim(2),
                                b0.dim(3)});
            }
            double* dst = stack.data() + static_cast<int64_t>(a) * branches_[a].numel();
            const double bscale = beta_.value[p];
            for (int64_t i = 0; i < branches_[a].numel(); ++i) dst[i] = bscale * branches_[a][i];
        }
        auto m = pixelwise_max(stack);
        argmax_ = std::move(m.argmax);
        Tensor skip = has_projection_ ? projection_.forward_train(x, update_stats) : x;
        require_same_shape(skip, m.output, "earesblock skip/branch");
        add_inplace(m.output, skip);
        return std::move(m.output);
    }

    Tensor backward(const Tensor& grad_out) override {
        const Tensor grad_stack =
            pixelwise_max_backward(grad_out, argmax_, static_cast<int64_t>(active_.size()));
        Tensor grad_input = has_projection_ ? projection_.backward(grad_out) : grad_out;
        Tensor grad_kernels1(kernels1_.shape());
        Tensor grad_kernels2(kernels2_.shape());
        const int64_t slice = grad_out.numel();
        const int64_t k1_slice = grad_kernels1.numel() / grad_kernels1.dim(0);
        const int64_t k2_slice = grad_kernels2.numel() / grad_kernels2.dim(0);
        for (size_t a = 0; a < active_.size(); ++a) {
            const int64_t p = active_[a];
            Tensor grad_branch(grad_out.shape());
            const double* gs = grad_stack.data() + static_cast<int64_t>(a) * slice;
            double beta_acc = 0.0;
            for (int64_t i = 0; i < slice; ++i) {
                beta_acc += gs[i] * branches_[a][i];
                grad_branch[i] = gs[i] * beta_.value[p];
            }
            beta_.gradient[p] += beta_acc;

            auto g2 = batchnorm2d_backward(grad_branch, bn2_caches_[a], gamma2_.value);
            add_inplace(gamma2_.gradient, g2.grad_gamma);
            add_inplace(bnbeta2_.gradient, g2.grad_beta);
            detail::accumulate_channel_bias_grad(g2.grad_input, bias2_.gradient);
            auto [gc2, gk2] = conv2d_backward(g2.grad_input, conv2_inputs_[a],
                                              detail::path_kernel(kernels2_, p), 1, padding_);
            double* dst2 = grad_kernels2.data() + p * k2_slice;
            for (int64_t i = 0; i < k2_slice; ++i) dst2[i] = gk2[i];

            Tensor gr = relu_backward(gc2, relu_inputs_[a]);
            auto g1 = batchnorm2d_backward(gr, bn1_caches_[a], gamma1_.value);
            add_inplace(gamma1_.gradient, g1.grad_gamma);
            add_inplace(bnbeta1_.gradient, g1.grad_beta);
            detail::accumulate_channel_bias_grad(g1.grad_input, bias1_.gradient);
            auto [gin, gk1] = conv2d_backward(g1.grad_input, input_,
                                              detail::path_kernel(kernels1_, p), 1, padding_);
            double* dst1 = grad_kernels1.data() + p * k1_slice;
            for (int64_t i = 0; i < k1_slice; ++i) dst1[i] = gk1[i];
            add_inplace(grad_input, gin);
        }
        add_inplace(w1_.gradient, synthesize_kernels_backward(*bank_, grad_kernels1));
        add_inplace(w2_.gradient, synthesize_kernels_backward(*bank_, grad_kernels2));
        return grad_input;
    }

    std::vector<NamedParam> params() override {
        std::vector<NamedParam> out = {
            {"w1", &w1_, true},          {"bias1", &bias1_, false},
            {"bn1.gamma", &gamma1_, false}, {"bn1.beta", &bnbeta1_, false},
            {"w2", &w2_, true},          {"bias2", &bias2_, false},
            {"bn2.gamma", &gamma2_, false}, {"bn2.beta", &bnbeta2_, false},
            {"beta", &beta_, false},
        };
        if (has_projection_) {
            for (auto& p : projection_.params())
                out.push_back({"projection." + p.name, p.param, p.weight_decay});
        }
        return out;
    }

    std::vector<NamedBuffer> buffers() override {
        return {{"bn1.running_mean", &state1_.running_mean},
                {"bn1.running_var", &state1_.running_var},
                {"bn2.running_mean", &state2_.running_mean},
                {"bn2.running_var", &state2_.running_var}};
    }

    const BasisBank& bank() const { return *bank_; }
    Grad& w1() { return w1_; }
    Grad& w2() { return w2_; }
    Grad& beta() { return beta_; }
    Grad& bias1() { return bias1_; }
    Grad& bias2() { return bias2_; }
    Grad& gamma1() { return gamma1_; }
    Grad& bnbeta1() { return bnbeta1_; }
    Grad& gamma2() { return gamma2_; }
    Grad& bnbeta2() { return bnbeta2_; }
    BatchNormState& state1() { return state1_; }
    BatchNormState& state2() { return state2_; }
    bool has_projection() const { return has_projection_; }
    Conv2dLayer& projection() { return projection_; }

private:
    std::shared_ptr<const BasisBank> bank_;
    Grad w1_, w2_, beta_, bias1_, bias2_;
    Grad gamma1_, bnbeta1_, gamma2_, bnbeta2_;
    BatchNormState state1_, state2_;
    bool has_projection_;
    Conv2dLayer projection_;
    int64_t padding_;

    Tensor input_, kernels1_, kernels2_;
    std::vector<int64_t> active_;
    std::vector<BatchNormCache> bn1_caches_, bn2_caches_;
    std::vector<Tensor> relu_inputs_, conv2_inputs_, branches_;
    std::vector<int32_t> argmax_;
};

}  // namespace eaconv
