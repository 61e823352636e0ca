#pragma once

// Randomized finite-difference verification of every backward pass in the
// library. Each operation is checked on a set of independently drawn
// instances; instances are redrawn until they are tie-free (max selections
// separated by a real margin), so the central difference never straddles a
// kink of the piecewise-smooth loss. Shared by the `gradcheck` command-line
// subcommand and the end-to-end acceptance checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "eaconv/basis.hpp"
#include "eaconv/ealayers.hpp"
#include "eaconv/layers.hpp"
#include "eaconv/ops.hpp"
#include "eaconv/rng.hpp"
#include "eaconv/tensor.hpp"

namespace eaconv {

struct GradCheckResult {
    std::string op;
    int64_t instances = 0;
    double max_rel_err = 0.0;
    bool pass = false;
};

namespace gradcheck_detail {

constexpr double kTieMargin = 1e-3;  // minimum gap between max competitors

inline void fill_uniform(Tensor& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely.
inline double rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// Central finite differences of `loss()` with respect to every entry of
/// `t`, compared entrywise against `analytic`. Returns the worst error.
template <typename LossFn>
double fd_against(Tensor& t, const Tensor& analytic, LossFn&& loss, double h) {
    double worst = 0.0;
    for (int64_t i = 0; i < t.numel(); ++i) {
        const double saved = t[i];
        t[i] = saved + h;
        const double up = loss();
        t[i] = saved - h;
        const double down = loss();
        t[i] = saved;
        worst = std::max(worst, rel_err(analytic[i], (up - down) / (2.0 * h)));
    }
    return worst;
}

/// Worst finite-difference error over a layer's input and all its
/// parameters, for the scalar loss <forward_train(x), probe>.
inline double check_layer(Layer& layer, Tensor& x, const Tensor& probe, double h) {
    auto loss = [&]() { return dot(layer.forward_train(x, false), probe); };
    loss();  // populate forward caches for the backward pass
    layer.zero_grad();
    const Tensor grad_x = layer.backward(probe);
    double worst = fd_against(x, grad_x, loss, h);
    for (auto& p : layer.params()) {
        worst = std::max(worst, fd_against(p.param->value, p.param->gradient, loss, h));
    }
    return worst;
}

/// Smallest gap between the best and second-best entry across the path axis
/// of a [P,N,O,H,W] stack (the quantity the per-pixel max selects over).
inline double min_stack_margin(const Tensor& stack) {
    const int64_t p = stack.dim(0);
    const int64_t pixels = stack.numel() / p;
    double worst = std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < pixels; ++i) {
        double best = -std::numeric_limits<double>::infinity(), second = best;
        for (int64_t pi = 0; pi < p; ++pi) {
            const double v = stack[pi * pixels + i];
            if (v > best) {
                second = best;
                best = v;
            } else if (v > second) {
                second = v;
            }
        }
        worst = std::min(worst, best - second);
    }
    return worst;
}

/// Per-path responses of an EAConv layer (bias excluded: it is added after
/// the max and cannot affect which path wins).
inline Tensor eaconv_response_stack(EAConvLayer& layer, const Tensor& x) {
    const BasisBank& bank = layer.bank();
    const Tensor kernels = synthesize_kernels(bank, layer.w().value);
    Tensor stack;
    for (int64_t p = 0; p < bank.num_paths(); ++p) {
        Tensor r = conv2d(x, detail::path_kernel(kernels, p), layer.stride(), layer.padding());
        scale_inplace(r, layer.beta().value[p]);
        if (p == 0) {
            stack = Tensor({bank.num_paths(), r.dim(0), r.dim(1), r.dim(2), r.dim(3)});
        }
        double* dst = stack.data() + p * r.numel();
        for (int64_t i = 0; i < r.numel(); ++i) dst[i] = r[i];
    }
    return stack;
}

struct BlockProbe {
    Tensor stack;          // [P,N,O,H,W] of beta-scaled branch outputs
    double min_relu_gap;   // smallest |input| seen at the branch relu
};

/// Reconstructs an EAResBlock's beta-scaled branch responses (training-mode
/// batch statistics, running buffers untouched) so instances can be screened
/// for max ties and relu kinks before finite-differencing.
inline BlockProbe earesblock_response_stack(EAResBlock& block, const Tensor& x) {
    const BasisBank& bank = block.bank();
    const Tensor k1 = synthesize_kernels(bank, block.w1().value);
    const Tensor k2 = synthesize_kernels(bank, block.w2().value);
    BlockProbe probe;
    probe.min_relu_gap = std::numeric_limits<double>::infinity();
    for (int64_t p = 0; p < bank.num_paths(); ++p) {
        auto st1 = block.state1();
        auto st2 = block.state2();
        Tensor t = conv2d(x, detail::path_kernel(k1, p), 1, (bank.kernel_size() - 1) / 2);
        detail::add_channel_bias(t, block.bias1().value);
        t = batchnorm2d(t, block.gamma1().value, block.bnbeta1().value, st1, 0.1, 1e-5, true,
                        false);
        for (int64_t i = 0; i < t.numel(); ++i) {
            probe.min_relu_gap = std::min(probe.min_relu_gap, std::abs(t[i]));
        }
        t = relu(t);
        t = conv2d(t, detail::path_kernel(k2, p), 1, (bank.kernel_size() - 1) / 2);
        detail::add_channel_bias(t, block.bias2().value);
        t = batchnorm2d(t, block.gamma2().value, block.bnbeta2().value, st2, 0.1, 1e-5, true,
                        false);
        scale_inplace(t, block.beta().value[p]);
        if (p == 0) {
            probe.stack = Tensor({bank.num_paths(), t.dim(0), t.dim(1), t.dim(2), t.dim(3)});
        }
        double* dst = probe.stack.data() + p * t.numel();
        for (int64_t i = 0; i < t.numel(); ++i) dst[i] = t[i];
    }
    return probe;
}

template <typename MakeInstance>
GradCheckResult run_instances(const std::string& op, int64_t instances, double tolerance,
                              MakeInstance&& make_instance) {
    GradCheckResult result;
    result.op = op;
    result.instances = instances;
    for (int64_t i = 0; i < instances; ++i) {
        result.max_rel_err = std::max(result.max_rel_err, make_instance(i));
    }
    result.pass = result.max_rel_err < tolerance;
    return result;
}

}  // namespace gradcheck_detail

/// Runs the finite-difference suite over every backward pass: conv2d, relu,
/// max/average pooling, batchnorm, linear, softmax cross-entropy, the
/// per-pixel path max, the elastically augmented convolution, and the
/// elastically augmented residual block. Deterministic for a given seed.
inline std::vector<GradCheckResult> run_gradient_suite(uint64_t seed = 2718,
                                                       int64_t instances = 20,
                                                       double tolerance = 1e-4,
                                                       double fd_step = 1e-5) {
    namespace gd = gradcheck_detail;
    if (instances < 1) throw std::invalid_argument("run_gradient_suite: instances must be >= 1");
    Rng rng(seed);
    std::vector<GradCheckResult> results;
    const auto bank = std::make_shared<const BasisBank>(
        build_basis_bank(make_basis_config(3, 1.0, 0.5)));

    results.push_back(gd::run_instances("conv2d", instances, tolerance, [&](int64_t i) {
        const int64_t stride = (i % 2) + 1;  // extents chosen to divide evenly
        Conv2dLayer layer(3, 4, 3, stride, /*padding=*/1, rng);
        Tensor x = stride == 1 ? Tensor({2, 3, 6, 6}) : Tensor({2, 3, 7, 7});
        gd::fill_uniform(x, rng);
        Tensor probe(layer.forward_eval(x).shape());
        gd::fill_uniform(probe, rng);
        return gd::check_layer(layer, x, probe, fd_step);
    }));

    results.push_back(gd::run_instances("relu", instances, tolerance, [&](int64_t) {
        ReluLayer layer;
        Tensor x({2, 3, 5, 5});
        for (int64_t j = 0; j < x.numel(); ++j) {
            double v = 0.0;
            do {
                v = rng.uniform(-1.0, 1.0);
            } while (std::abs(v) < gd::kTieMargin);  // keep clear of the kink
            x[j] = v;
        }
        Tensor probe(x.shape());
        gd::fill_uniform(probe, rng);
        return gd::check_layer(layer, x, probe, fd_step);
    }));

    results.push_back(gd::run_instances("maxpool2d", instances, tolerance, [&](int64_t) {
        MaxPool2dLayer layer(2, 2);
        Tensor x({2, 3, 6, 6});
        double margin = 0.0;
        do {
            gd::fill_uniform(x, rng);
            margin = std::numeric_limits<double>::infinity();
            for (int64_t n = 0; n < 2; ++n)
                for (int64_t c = 0; c < 3; ++c)
                    for (int64_t y = 0; y < 6; y += 2)
                        for (int64_t xx = 0; xx < 6; xx += 2) {
                            double best = -2.0, second = -2.0;
                            for (int64_t dy = 0; dy < 2; ++dy)
                                for (int64_t dx = 0; dx < 2; ++dx) {
                                    const double v = x.at4(n, c, y + dy, xx + dx);
                                    if (v > best) {
                                        second = best;
                                        best = v;
                                    } else if (v > second) {
                                        second = v;
                                    }
                                }
                            margin = std::min(margin, best - second);
                        }
        } while (margin < gd::kTieMargin);
        Tensor probe({2, 3, 3, 3});
        gd::fill_uniform(probe, rng);
        return gd::check_layer(layer, x, probe, fd_step);
    }));

    results.push_back(gd::run_instances("global_avg_pool", instances, tolerance, [&](int64_t) {
        GlobalAvgPoolLayer layer;
        Tensor x({2, 5, 4, 4});
        gd::fill_uniform(x, rng);
        Tensor probe({2, 5});
        gd::fill_uniform(probe, rng);
        return gd::check_layer(layer, x, probe, fd_step);
    }));

    results.push_back(gd::run_instances("batchnorm2d", instances, tolerance, [&](int64_t) {
        BatchNorm2dLayer layer(3);
        gd::fill_uniform(layer.gamma().value, rng, 0.5, 1.5);
        gd::fill_uniform(layer.beta().value, rng, -0.5, 0.5);
        Tensor x({3, 3, 4, 4});
        gd::fill_uniform(x, rng);
        Tensor probe(x.shape());
        gd::fill_uniform(probe, rng);
        return gd::check_layer(layer, x, probe, fd_step);
    }));

    results.push_back(gd::run_instances("linear", instances, tolerance, [&](int64_t) {
        LinearLayer layer(10, 7, rng);
        Tensor x({4, 10});
        gd::fill_uniform(x, rng);
        Tensor probe({4, 7});
        gd::fill_uniform(probe, rng);
        return gd::check_layer(layer, x, probe, fd_step);
    }));

    results.push_back(
        gd::run_instances("softmax_cross_entropy", instances, tolerance, [&](int64_t) {
            Tensor logits({5, 7});
            gd::fill_uniform(logits, rng, -2.0, 2.0);
            std::vector<int64_t> labels(5);
            for (auto& l : labels) l = rng.uniform_int(0, 6);
            const Tensor analytic = softmax_cross_entropy(logits, labels).grad_logits;
            auto loss = [&]() { return softmax_cross_entropy(logits, labels).loss; };
            return gd::fd_against(logits, analytic, loss, fd_step);
        }));

    results.push_back(gd::run_instances("pixelwise_max", instances, tolerance, [&](int64_t) {
        Tensor stack({4, 2, 3, 5, 5});
        do {
            gd::fill_uniform(stack, rng);
        } while (gd::min_stack_margin(stack) < gd::kTieMargin);
        Tensor probe({2, 3, 5, 5});
        gd::fill_uniform(probe, rng);
        auto loss = [&]() { return dot(pixelwise_max(stack).output, probe); };
        const auto fwd = pixelwise_max(stack);
        const Tensor analytic = pixelwise_max_backward(probe, fwd.argmax, stack.dim(0));
        return gd::fd_against(stack, analytic, loss, fd_step);
    }));

    results.push_back(gd::run_instances("eaconv", instances, tolerance, [&](int64_t) {
        EAConvLayer layer(bank, 3, 4, 1, 1, rng);
        const double betas[5] = {1.0, 0.7, -0.4, 0.3, 0.55};
        for (int64_t p = 0; p < 5; ++p) layer.beta().value[p] = betas[p];
        gd::fill_uniform(layer.bias().value, rng, -0.3, 0.3);
        Tensor x({2, 3, 6, 6});
        do {
            gd::fill_uniform(x, rng);
        } while (gd::min_stack_margin(gd::eaconv_response_stack(layer, x)) < gd::kTieMargin);
        Tensor probe(layer.forward_eval(x).shape());
        gd::fill_uniform(probe, rng);
        return gd::check_layer(layer, x, probe, fd_step);
    }));

    results.push_back(gd::run_instances("earesblock", instances, tolerance, [&](int64_t) {
        EAResBlock block(bank, 4, 4, rng);
        const double betas[5] = {1.0, 0.8, -0.3, 0.45, 0.6};
        for (int64_t p = 0; p < 5; ++p) block.beta().value[p] = betas[p];
        gd::fill_uniform(block.bias1().value, rng, -0.2, 0.2);
        gd::fill_uniform(block.bias2().value, rng, -0.2, 0.2);
        gd::fill_uniform(block.gamma1().value, rng, 0.6, 1.4);
        gd::fill_uniform(block.gamma2().value, rng, 0.6, 1.4);
        gd::fill_uniform(block.bnbeta1().value, rng, -0.3, 0.3);
        gd::fill_uniform(block.bnbeta2().value, rng, -0.3, 0.3);
        Tensor x({2, 4, 5, 5});
        while (true) {
            gd::fill_uniform(x, rng);
            const auto probe = gd::earesblock_response_stack(block, x);
            if (gd::min_stack_margin(probe.stack) >= gd::kTieMargin &&
                probe.min_relu_gap >= gd::kTieMargin) {
                break;
            }
        }
        Tensor probe(x.shape());
        gd::fill_uniform(probe, rng);
        return gd::check_layer(block, x, probe, fd_step);
    }));

    return results;
}

}  // namespace eaconv
