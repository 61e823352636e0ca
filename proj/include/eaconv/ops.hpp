#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "eaconv/tensor.hpp"

namespace eaconv {

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation convention, no kernel flip)
// ---------------------------------------------------------------------------

struct ConvDims {
    int64_t n, c_in, h, w;
    int64_t c_out, k;
    int64_t h_out, w_out;
};

inline ConvDims conv2d_dims(const Tensor& input, const Tensor& kernel, int64_t stride,
                            int64_t padding) {
    require_rank(input, 4, "conv2d input");
    require_rank(kernel, 4, "conv2d kernel");
    ConvDims d{};
    d.n = input.dim(0);
    d.c_in = input.dim(1);
    d.h = input.dim(2);
    d.w = input.dim(3);
    d.c_out = kernel.dim(0);
    d.k = kernel.dim(2);
    if (kernel.dim(2) != kernel.dim(3)) {
        throw std::invalid_argument("conv2d: kernel must be square, got " +
                                    kernel.shape_string());
    }
    if (d.k % 2 == 0) {
        throw std::invalid_argument("conv2d: kernel size must be odd, got k=" +
                                    std::to_string(d.k));
    }
    if (kernel.dim(1) != d.c_in) {
        throw std::invalid_argument("conv2d: input channel axis C=" + std::to_string(d.c_in) +
                                    " does not match kernel channel axis C=" +
                                    std::to_string(kernel.dim(1)));
    }
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be non-negative");
    const int64_t eh = d.h + 2 * padding - d.k;
    const int64_t ew = d.w + 2 * padding - d.k;
    if (eh < 0 || ew < 0 || eh % stride != 0 || ew % stride != 0) {
        throw std::invalid_argument(
            "conv2d: output extent not integral for H=" + std::to_string(d.h) +
            " W=" + std::to_string(d.w) + " k=" + std::to_string(d.k) + " stride=" +
            std::to_string(stride) + " padding=" + std::to_string(padding));
    }
    d.h_out = eh / stride + 1;
    d.w_out = ew / stride + 1;
    return d;
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, int64_t stride = 1,
                     int64_t padding = 0) {
    const ConvDims d = conv2d_dims(input, kernel, stride, padding);
    Tensor out({d.n, d.c_out, d.h_out, d.w_out});
    const double* in = input.data();
    const double* ker = kernel.data();
    double* o = out.data();
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t oc = 0; oc < d.c_out; ++oc) {
            double* out_plane = o + (n * d.c_out + oc) * d.h_out * d.w_out;
            for (int64_t ic = 0; ic < d.c_in; ++ic) {
                const double* in_plane = in + (n * d.c_in + ic) * d.h * d.w;
                const double* ker_plane = ker + (oc * d.c_in + ic) * d.k * d.k;
                for (int64_t ki = 0; ki < d.k; ++ki) {
                    for (int64_t kj = 0; kj < d.k; ++kj) {
                        const double wv = ker_plane[ki * d.k + kj];
                        if (wv == 0.0) continue;
                        // valid output column range for this kernel offset
                        int64_t ow_lo = 0, ow_hi = d.w_out - 1;
                        if (padding > kj) ow_lo = (padding - kj + stride - 1) / stride;
                        const int64_t max_iw = d.w - 1 + padding - kj;
                        if (max_iw / stride < ow_hi) ow_hi = max_iw / stride;
                        for (int64_t oh = 0; oh < d.h_out; ++oh) {
                            const int64_t ih = oh * stride - padding + ki;
                            if (ih < 0 || ih >= d.h) continue;
                            const double* in_row = in_plane + ih * d.w - padding + kj;
                            double* out_row = out_plane + oh * d.w_out;
                            if (stride == 1) {
                                for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                                    out_row[ow] += wv * in_row[ow];
                            } else {
                                for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                                    out_row[ow] += wv * in_row[ow * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    EACONV_ASSERT_FINITE(out);
    return out;
}

/// Gradients of conv2d with respect to both the input and the kernel.
inline std::pair<Tensor, Tensor> conv2d_backward(const Tensor& grad_out, const Tensor& input,
                                                 const Tensor& kernel, int64_t stride = 1,
                                                 int64_t padding = 0) {
    const ConvDims d = conv2d_dims(input, kernel, stride, padding);
    if (grad_out.rank() != 4 || grad_out.dim(0) != d.n || grad_out.dim(1) != d.c_out ||
        grad_out.dim(2) != d.h_out || grad_out.dim(3) != d.w_out) {
        throw std::invalid_argument("conv2d_backward: grad_out shape " +
                                    grad_out.shape_string() + " does not match output [" +
                                    std::to_string(d.n) + "," + std::to_string(d.c_out) + "," +
                                    std::to_string(d.h_out) + "," + std::to_string(d.w_out) +
                                    "]");
    }
    Tensor grad_input(input.shape());
    Tensor grad_kernel(kernel.shape());
    const double* in = input.data();
    const double* ker = kernel.data();
    const double* go = grad_out.data();
    double* gi = grad_input.data();
    double* gk = grad_kernel.data();
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t oc = 0; oc < d.c_out; ++oc) {
            const double* go_plane = go + (n * d.c_out + oc) * d.h_out * d.w_out;
            for (int64_t ic = 0; ic < d.c_in; ++ic) {
                const double* in_plane = in + (n * d.c_in + ic) * d.h * d.w;
                double* gi_plane = gi + (n * d.c_in + ic) * d.h * d.w;
                const double* ker_plane = ker + (oc * d.c_in + ic) * d.k * d.k;
                double* gk_plane = gk + (oc * d.c_in + ic) * d.k * d.k;
                for (int64_t ki = 0; ki < d.k; ++ki) {
                    for (int64_t kj = 0; kj < d.k; ++kj) {
                        const double wv = ker_plane[ki * d.k + kj];
                        double acc = 0.0;
                        int64_t ow_lo = 0, ow_hi = d.w_out - 1;
                        if (padding > kj) ow_lo = (padding - kj + stride - 1) / stride;
                        const int64_t max_iw = d.w - 1 + padding - kj;
                        if (max_iw / stride < ow_hi) ow_hi = max_iw / stride;
                        for (int64_t oh = 0; oh < d.h_out; ++oh) {
                            const int64_t ih = oh * stride - padding + ki;
                            if (ih < 0 || ih >= d.h) continue;
                            const double* in_row = in_plane + ih * d.w - padding + kj;
                            double* gi_row = gi_plane + ih * d.w - padding + kj;
                            const double* go_row = go_plane + oh * d.w_out;
                            for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                const double g = go_row[ow];
                                const int64_t iw = ow * stride;
                                gi_row[iw] += wv * g;
                                acc += in_row[iw] * g;
                            }
                        }
                        gk_plane[ki * d.k + kj] += acc;
                    }
                }
            }
        }
    }
    EACONV_ASSERT_FINITE(grad_input);
    EACONV_ASSERT_FINITE(grad_kernel);
    return {std::move(grad_input), std::move(grad_kernel)};
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(0.0, out[i]);
    return out;
}

inline Tensor relu_backward(const Tensor& grad_out, const Tensor& input) {
    require_same_shape(grad_out, input, "relu_backward");
    Tensor gi(input.shape());
    for (int64_t i = 0; i < gi.numel(); ++i) gi[i] = input[i] > 0.0 ? grad_out[i] : 0.0;
    return gi;
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

struct MaxPoolResult {
    Tensor output;                 // [N,C,H',W']
    std::vector<int64_t> argmax;   // flat input offset of each pooled maximum
};

inline MaxPoolResult maxpool2d(const Tensor& input, int64_t window, int64_t stride) {
    require_rank(input, 4, "maxpool2d");
    if (window < 1 || stride < 1) throw std::invalid_argument("maxpool2d: window and stride must be positive");
    const int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h < window || w < window || (h - window) % stride != 0 || (w - window) % stride != 0) {
        throw std::invalid_argument("maxpool2d: H=" + std::to_string(h) + " W=" +
                                    std::to_string(w) + " not tileable by window=" +
                                    std::to_string(window) + " stride=" + std::to_string(stride));
    }
    const int64_t ho = (h - window) / stride + 1;
    const int64_t wo = (w - window) / stride + 1;
    MaxPoolResult r{Tensor({n, c, ho, wo}), {}};
    r.argmax.resize(static_cast<size_t>(n * c * ho * wo));
    const double* in = input.data();
    double* out = r.output.data();
    int64_t oi = 0;
    for (int64_t ni = 0; ni < n; ++ni) {
        for (int64_t ci = 0; ci < c; ++ci) {
            const double* plane = in + (ni * c + ci) * h * w;
            const int64_t plane_off = (ni * c + ci) * h * w;
            for (int64_t oh = 0; oh < ho; ++oh) {
                for (int64_t ow = 0; ow < wo; ++ow) {
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t best_off = 0;
                    for (int64_t i = 0; i < window; ++i) {
                        for (int64_t j = 0; j < window; ++j) {
                            const int64_t off = (oh * stride + i) * w + ow * stride + j;
                            if (plane[off] > best) {
                                best = plane[off];
                                best_off = off;
                            }
                        }
                    }
                    out[oi] = best;
                    r.argmax[static_cast<size_t>(oi)] = plane_off + best_off;
                    ++oi;
                }
            }
        }
    }
    return r;
}

inline Tensor maxpool2d_backward(const Tensor& grad_out, const std::vector<int64_t>& argmax,
                                 const std::vector<int64_t>& input_shape) {
    Tensor gi(input_shape);
    if (static_cast<size_t>(grad_out.numel()) != argmax.size()) {
        throw std::invalid_argument("maxpool2d_backward: grad_out / argmax size mismatch");
    }
    for (int64_t i = 0; i < grad_out.numel(); ++i) gi[argmax[static_cast<size_t>(i)]] += grad_out[i];
    return gi;
}

// ---------------------------------------------------------------------------
// Global average pooling  [N,C,H,W] -> [N,C]
// ---------------------------------------------------------------------------

inline Tensor global_avg_pool(const Tensor& input) {
    require_rank(input, 4, "global_avg_pool");
    const int64_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    Tensor out({n, c});
    const double* in = input.data();
    for (int64_t i = 0; i < n * c; ++i) {
        double s = 0.0;
        const double* p = in + i * hw;
        for (int64_t j = 0; j < hw; ++j) s += p[j];
        out[i] = s / static_cast<double>(hw);
    }
    return out;
}

inline Tensor global_avg_pool_backward(const Tensor& grad_out, int64_t h, int64_t w) {
    require_rank(grad_out, 2, "global_avg_pool_backward");
    const int64_t n = grad_out.dim(0), c = grad_out.dim(1);
    Tensor gi({n, c, h, w});
    const double inv = 1.0 / static_cast<double>(h * w);
    for (int64_t i = 0; i < n * c; ++i) {
        const double g = grad_out[i] * inv;
        double* p = gi.data() + i * h * w;
        for (int64_t j = 0; j < h * w; ++j) p[j] = g;
    }
    return gi;
}

// ---------------------------------------------------------------------------
// Linear (fully connected)  x[N,F] W[O,F] b[O] -> [N,O]
// ---------------------------------------------------------------------------

inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank(x, 2, "linear input");
    require_rank(weight, 2, "linear weight");
    const int64_t n = x.dim(0), f = x.dim(1), o = weight.dim(0);
    if (weight.dim(1) != f) {
        throw std::invalid_argument("linear: input feature axis F=" + std::to_string(f) +
                                    " does not match weight F=" + std::to_string(weight.dim(1)));
    }
    if (bias.numel() != o) {
        throw std::invalid_argument("linear: bias size " + std::to_string(bias.numel()) +
                                    " does not match output axis O=" + std::to_string(o));
    }
    Tensor out({n, o});
    for (int64_t i = 0; i < n; ++i) {
        const double* xr = x.data() + i * f;
        for (int64_t j = 0; j < o; ++j) {
            const double* wr = weight.data() + j * f;
            double s = bias[j];
            for (int64_t k = 0; k < f; ++k) s += xr[k] * wr[k];
            out.at2(i, j) = s;
        }
    }
    return out;
}

struct LinearGrads {
    Tensor grad_input, grad_weight, grad_bias;
};

inline LinearGrads linear_backward(const Tensor& grad_out, const Tensor& x,
                                   const Tensor& weight) {
    const int64_t n = x.dim(0), f = x.dim(1), o = weight.dim(0);
    if (grad_out.rank() != 2 || grad_out.dim(0) != n || grad_out.dim(1) != o) {
        throw std::invalid_argument("linear_backward: grad_out shape mismatch");
    }
    LinearGrads g{Tensor({n, f}), Tensor({o, f}), Tensor({o})};
    for (int64_t i = 0; i < n; ++i) {
        const double* xr = x.data() + i * f;
        double* gir = g.grad_input.data() + i * f;
        for (int64_t j = 0; j < o; ++j) {
            const double gv = grad_out.at2(i, j);
            const double* wr = weight.data() + j * f;
            double* gwr = g.grad_weight.data() + j * f;
            for (int64_t k = 0; k < f; ++k) {
                gir[k] += gv * wr[k];
                gwr[k] += gv * xr[k];
            }
            g.grad_bias[j] += gv;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Batch normalization over [N,C,H,W], per-channel statistics
// ---------------------------------------------------------------------------

struct BatchNormState {
    Tensor running_mean;  // [C]
    Tensor running_var;   // [C], unbiased
};

struct BatchNormCache {
    bool training = false;
    Tensor input;
    Tensor x_hat;
    Tensor inv_std;  // [C], 1/sqrt(var+eps) actually used for normalization
};

/// Forward batch normalization. In training mode statistics come from the
/// batch; `update_stats` controls whether the running buffers absorb them
/// (momentum convention: running = (1-m)*running + m*batch).
inline Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          BatchNormState& state, double momentum, double eps, bool training,
                          bool update_stats, BatchNormCache* cache = nullptr) {
    require_rank(x, 4, "batchnorm2d");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.numel() != c || beta.numel() != c || state.running_mean.numel() != c ||
        state.running_var.numel() != c) {
        throw std::invalid_argument("batchnorm2d: parameter size does not match channel axis C=" +
                                    std::to_string(c));
    }
    const int64_t m = n * h * w;
    if (training && m < 2) throw std::invalid_argument("batchnorm2d: batch too small for training stats");
    Tensor out(x.shape());
    Tensor mean({c}), var({c}), inv_std({c});
    if (training) {
        for (int64_t ci = 0; ci < c; ++ci) {
            double s = 0.0;
            for (int64_t ni = 0; ni < n; ++ni) {
                const double* p = x.data() + (ni * c + ci) * h * w;
                for (int64_t j = 0; j < h * w; ++j) s += p[j];
            }
            mean[ci] = s / static_cast<double>(m);
            double v = 0.0;
            for (int64_t ni = 0; ni < n; ++ni) {
                const double* p = x.data() + (ni * c + ci) * h * w;
                for (int64_t j = 0; j < h * w; ++j) {
                    const double d = p[j] - mean[ci];
                    v += d * d;
                }
            }
            var[ci] = v / static_cast<double>(m);  // biased, used for normalization
        }
        if (update_stats) {
            const double unbias = static_cast<double>(m) / static_cast<double>(m - 1);
            for (int64_t ci = 0; ci < c; ++ci) {
                state.running_mean[ci] =
                    (1.0 - momentum) * state.running_mean[ci] + momentum * mean[ci];
                state.running_var[ci] =
                    (1.0 - momentum) * state.running_var[ci] + momentum * var[ci] * unbias;
            }
        }
    } else {
        mean = state.running_mean;
        var = state.running_var;
    }
    for (int64_t ci = 0; ci < c; ++ci) inv_std[ci] = 1.0 / std::sqrt(var[ci] + eps);

    Tensor x_hat(x.shape());
    for (int64_t ni = 0; ni < n; ++ni) {
        for (int64_t ci = 0; ci < c; ++ci) {
            const double mu = mean[ci], is = inv_std[ci], g = gamma[ci], b = beta[ci];
            const double* p = x.data() + (ni * c + ci) * h * w;
            double* xh = x_hat.data() + (ni * c + ci) * h * w;
            double* op = out.data() + (ni * c + ci) * h * w;
            for (int64_t j = 0; j < h * w; ++j) {
                xh[j] = (p[j] - mu) * is;
                op[j] = g * xh[j] + b;
            }
        }
    }
    if (cache) {
        cache->training = training;
        cache->input = x;
        cache->x_hat = std::move(x_hat);
        cache->inv_std = std::move(inv_std);
    }
    EACONV_ASSERT_FINITE(out);
    return out;
}

struct BatchNormGrads {
    Tensor grad_input, grad_gamma, grad_beta;
};

inline BatchNormGrads batchnorm2d_backward(const Tensor& grad_out, const BatchNormCache& cache,
                                           const Tensor& gamma) {
    const Tensor& x = cache.input;
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    require_same_shape(grad_out, x, "batchnorm2d_backward");
    const int64_t m = n * h * w;
    BatchNormGrads g{Tensor(x.shape()), Tensor({c}), Tensor({c})};
    for (int64_t ci = 0; ci < c; ++ci) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int64_t ni = 0; ni < n; ++ni) {
            const int64_t base = (ni * c + ci) * h * w;
            const double* dy = grad_out.data() + base;
            const double* xh = cache.x_hat.data() + base;
            for (int64_t j = 0; j < h * w; ++j) {
                sum_dy += dy[j];
                sum_dy_xhat += dy[j] * xh[j];
            }
        }
        g.grad_beta[ci] = sum_dy;
        g.grad_gamma[ci] = sum_dy_xhat;
        const double is = cache.inv_std[ci];
        const double gm = gamma[ci];
        if (cache.training) {
            const double inv_m = 1.0 / static_cast<double>(m);
            for (int64_t ni = 0; ni < n; ++ni) {
                const int64_t base = (ni * c + ci) * h * w;
                const double* dy = grad_out.data() + base;
                const double* xh = cache.x_hat.data() + base;
                double* dx = g.grad_input.data() + base;
                for (int64_t j = 0; j < h * w; ++j) {
                    dx[j] = gm * is * (dy[j] - inv_m * sum_dy - xh[j] * inv_m * sum_dy_xhat);
                }
            }
        } else {
            for (int64_t ni = 0; ni < n; ++ni) {
                const int64_t base = (ni * c + ci) * h * w;
                const double* dy = grad_out.data() + base;
                double* dx = g.grad_input.data() + base;
                for (int64_t j = 0; j < h * w; ++j) dx[j] = gm * is * dy[j];
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy, mean over batch, fused loss + logit gradient
// ---------------------------------------------------------------------------

struct CrossEntropyResult {
    double loss = 0.0;
    Tensor grad_logits;
};

inline CrossEntropyResult softmax_cross_entropy(const Tensor& logits,
                                                const std::vector<int64_t>& labels) {
    require_rank(logits, 2, "softmax_cross_entropy");
    const int64_t n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != n) {
        throw std::invalid_argument("softmax_cross_entropy: batch axis N=" + std::to_string(n) +
                                    " does not match labels size " +
                                    std::to_string(labels.size()));
    }
    CrossEntropyResult r;
    r.grad_logits = Tensor(logits.shape());
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t y = labels[static_cast<size_t>(i)];
        if (y < 0 || y >= k) {
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) +
                                        " out of range [0," + std::to_string(k) + ")");
        }
        const double* row = logits.data() + i * k;
        double mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const double log_z = std::log(z) + mx;
        loss += log_z - row[y];
        double* gr = r.grad_logits.data() + i * k;
        for (int64_t j = 0; j < k; ++j) {
            gr[j] = std::exp(row[j] - log_z) / static_cast<double>(n);
        }
        gr[y] -= 1.0 / static_cast<double>(n);
    }
    r.loss = loss / static_cast<double>(n);
    return r;
}

// ---------------------------------------------------------------------------
// Per-pixel maximum over a stack of transformation paths
// ---------------------------------------------------------------------------

struct PixelwiseMaxResult {
    Tensor output;             // [N,O,H,W]
    std::vector<int32_t> argmax;  // winning path per element, ties -> lowest index
};

inline PixelwiseMaxResult pixelwise_max(const Tensor& stack) {
    require_rank(stack, 5, "pixelwise_max");
    const int64_t p = stack.dim(0);
    if (p < 1) throw std::invalid_argument("pixelwise_max: empty path stack");
    const int64_t slice = stack.numel() / p;
    PixelwiseMaxResult r{Tensor({stack.dim(1), stack.dim(2), stack.dim(3), stack.dim(4)}), {}};
    r.argmax.assign(static_cast<size_t>(slice), 0);
    const double* s = stack.data();
    double* out = r.output.data();
    for (int64_t i = 0; i < slice; ++i) out[i] = s[i];
    for (int64_t pi = 1; pi < p; ++pi) {
        const double* sp = s + pi * slice;
        for (int64_t i = 0; i < slice; ++i) {
            if (sp[i] > out[i]) {
                out[i] = sp[i];
                r.argmax[static_cast<size_t>(i)] = static_cast<int32_t>(pi);
            }
        }
    }
    return r;
}

/// Routes each output gradient element to its winning path; other paths get 0.
inline Tensor pixelwise_max_backward(const Tensor& grad_out, const std::vector<int32_t>& argmax,
                                     int64_t num_paths) {
    if (num_paths < 1) throw std::invalid_argument("pixelwise_max_backward: empty path stack");
    if (static_cast<size_t>(grad_out.numel()) != argmax.size()) {
        throw std::invalid_argument("pixelwise_max_backward: grad_out / argmax size mismatch");
    }
    std::vector<int64_t> shape = {num_paths, grad_out.dim(0), grad_out.dim(1), grad_out.dim(2),
                                  grad_out.dim(3)};
    Tensor gs(shape);
    const int64_t slice = grad_out.numel();
    for (int64_t i = 0; i < slice; ++i) {
        gs[argmax[static_cast<size_t>(i)] * slice + i] = grad_out[i];
    }
    return gs;
}

}  // namespace eaconv
