#pragma once

// Fixed bank of elastically-transformed 2-D Hermite-Gaussian filters.
// Filters are evaluated analytically on displaced coordinate grids, so a
// transformed filter is just the closed-form function sampled at new points —
// no resampling of discrete kernels and no kernel growth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "eaconv/tensor.hpp"

namespace eaconv {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// One transformation path. alpha is the elasticity coefficient (amplitude of
/// the displacement), theta selects the mix of scaling (cosθ) and rotation
/// (sinθ). alpha == 0 is the identity path.
struct TransformSpec {
    double alpha = 0.0;
    double theta = 0.0;
};

struct BasisConfig {
    int64_t kernel_size = 3;
    double sigma = 1.0;
    int64_t num_basis = 9;  // ≤ kernel_size²; defaults to the complete bank
    std::vector<TransformSpec> transforms = {{0.0, 0.0}};

    void validate() const {
        if (kernel_size < 1 || kernel_size % 2 == 0) {
            throw std::invalid_argument("BasisConfig: kernel_size must be odd and positive, got " +
                                        std::to_string(kernel_size));
        }
        if (!(sigma > 0.0)) throw std::invalid_argument("BasisConfig: sigma must be positive");
        if (num_basis < 1 || num_basis > kernel_size * kernel_size) {
            throw std::invalid_argument("BasisConfig: num_basis must be in [1, k²], got " +
                                        std::to_string(num_basis) + " for k=" +
                                        std::to_string(kernel_size));
        }
        if (transforms.empty()) throw std::invalid_argument("BasisConfig: transforms must be non-empty");
        if (transforms[0].alpha != 0.0) {
            throw std::invalid_argument("BasisConfig: path 0 must be the identity (alpha == 0)");
        }
        for (const auto& t : transforms) {
            if (t.alpha < 0.0) throw std::invalid_argument("BasisConfig: alpha must be non-negative");
            if (t.theta < 0.0 || t.theta >= 2.0 * std::numbers::pi) {
                throw std::invalid_argument("BasisConfig: theta must lie in [0, 2π)");
            }
        }
    }

    int64_t num_paths() const { return static_cast<int64_t>(transforms.size()); }
};

/// The default 5-path transformation set: identity, plus scaling up (θ=0),
/// both rotations (θ=π/2, 3π/2), and scaling down (θ=π), all at one alpha.
inline std::vector<TransformSpec> default_transforms(double alpha) {
    return {{0.0, 0.0},
            {alpha, 0.0},
            {alpha, std::numbers::pi / 2.0},
            {alpha, std::numbers::pi},
            {alpha, 3.0 * std::numbers::pi / 2.0}};
}

inline BasisConfig make_basis_config(int64_t kernel_size, double sigma, double alpha,
                                     int64_t num_basis = -1) {
    BasisConfig cfg;
    cfg.kernel_size = kernel_size;
    cfg.sigma = sigma;
    cfg.num_basis = num_basis > 0 ? num_basis : kernel_size * kernel_size;
    cfg.transforms = default_transforms(alpha);
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// Integer-spaced coordinates centered at 0: x varies along columns, y along
/// rows; the center entry is (0,0).
inline std::pair<Tensor, Tensor> coordinate_grid(int64_t k) {
    if (k < 1 || k % 2 == 0) {
        throw std::invalid_argument("coordinate_grid: k must be odd and positive, got " +
                                    std::to_string(k));
    }
    Tensor x({k, k}), y({k, k});
    const int64_t half = (k - 1) / 2;
    for (int64_t i = 0; i < k; ++i) {
        for (int64_t j = 0; j < k; ++j) {
            x.at2(i, j) = static_cast<double>(j - half);
            y.at2(i, j) = static_cast<double>(i - half);
        }
    }
    return {std::move(x), std::move(y)};
}

/// Rotation-scaling displacement applied to a coordinate grid:
///   x' = x + α(x·cosθ + y·sinθ)
///   y' = y + α(−x·sinθ + y·cosθ)
/// Pure scaling when sinθ = 0, pure rotation when cosθ = 0; the center is
/// always a fixed point.
inline std::pair<Tensor, Tensor> rotation_scaling_displacement(const Tensor& x, const Tensor& y,
                                                               const TransformSpec& t) {
    require_same_shape(x, y, "rotation_scaling_displacement");
    const double c = std::cos(t.theta), s = std::sin(t.theta);
    Tensor xp(x.shape()), yp(y.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        xp[i] = x[i] + t.alpha * (x[i] * c + y[i] * s);
        yp[i] = y[i] + t.alpha * (-x[i] * s + y[i] * c);
    }
    return {std::move(xp), std::move(yp)};
}

// ---------------------------------------------------------------------------
// Hermite-Gaussian filters
// ---------------------------------------------------------------------------

/// Physicists' Hermite polynomial H_n evaluated elementwise:
/// H_0 = 1, H_1 = 2t, H_{n+1} = 2t·H_n − 2n·H_{n−1}.
inline Tensor hermite_polynomial(int64_t n, const Tensor& t) {
    if (n < 0) throw std::invalid_argument("hermite_polynomial: order must be non-negative");
    Tensor h_prev = Tensor::full(t.shape(), 1.0);
    if (n == 0) return h_prev;
    Tensor h = t;
    for (int64_t i = 0; i < h.numel(); ++i) h[i] = 2.0 * t[i];
    for (int64_t order = 1; order < n; ++order) {
        Tensor h_next(t.shape());
        for (int64_t i = 0; i < t.numel(); ++i) {
            h_next[i] = 2.0 * t[i] * h[i] - 2.0 * static_cast<double>(order) * h_prev[i];
        }
        h_prev = std::move(h);
        h = std::move(h_next);
    }
    return h;
}

/// Hermite index pairs (n,m), 0 ≤ n,m < k, sorted by total degree n+m then by
/// n, truncated to the first `count`. Low orders come first so a truncated
/// bank keeps the smoothest filters.
inline std::vector<std::pair<int, int>> hermite_order(int64_t k, int64_t count) {
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<size_t>(k * k));
    for (int n = 0; n < k; ++n)
        for (int m = 0; m < k; ++m) pairs.emplace_back(n, m);
    std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
        const int da = a.first + a.second, db = b.first + b.second;
        if (da != db) return da < db;
        return a.first < b.first;
    });
    pairs.resize(static_cast<size_t>(count));
    return pairs;
}

/// Complete bank of elastically-transformed basis filters.
struct BasisBank {
    Tensor filters;  // [P, B, k, k], each k×k slice unit ℓ2 norm
    BasisConfig config;
    std::vector<std::pair<int, int>> order;  // Hermite (n,m) per basis index

    int64_t num_paths() const { return filters.dim(0); }
    int64_t num_basis() const { return filters.dim(1); }
    int64_t kernel_size() const { return filters.dim(2); }
};

inline BasisBank build_basis_bank(const BasisConfig& config) {
    config.validate();
    const int64_t k = config.kernel_size;
    const int64_t b_count = config.num_basis;
    const int64_t p_count = config.num_paths();
    const double sigma = config.sigma;
    auto [x, y] = coordinate_grid(k);

    BasisBank bank;
    bank.config = config;
    bank.order = hermite_order(k, b_count);
    bank.filters = Tensor({p_count, b_count, k, k});

    for (int64_t p = 0; p < p_count; ++p) {
        auto [xp, yp] = rotation_scaling_displacement(x, y, config.transforms[static_cast<size_t>(p)]);
        Tensor envelope({k, k});
        Tensor xs({k, k}), ys({k, k});
        for (int64_t i = 0; i < k * k; ++i) {
            envelope[i] = std::exp(-(xp[i] * xp[i] + yp[i] * yp[i]) / (2.0 * sigma * sigma)) /
                          (sigma * sigma);
            xs[i] = xp[i] / sigma;
            ys[i] = yp[i] / sigma;
        }
        for (int64_t b = 0; b < b_count; ++b) {
            const auto [n, m] = bank.order[static_cast<size_t>(b)];
            Tensor hx = hermite_polynomial(n, xs);
            Tensor hy = hermite_polynomial(m, ys);
            double norm_sq = 0.0;
            double* slice = bank.filters.data() + (p * b_count + b) * k * k;
            for (int64_t i = 0; i < k * k; ++i) {
                slice[i] = hx[i] * hy[i] * envelope[i];
                norm_sq += slice[i] * slice[i];
            }
            if (norm_sq <= 0.0) {
                throw std::runtime_error("build_basis_bank: degenerate filter (n=" +
                                         std::to_string(n) + ", m=" + std::to_string(m) +
                                         ") on path " + std::to_string(p));
            }
            const double inv_norm = 1.0 / std::sqrt(norm_sq);
            for (int64_t i = 0; i < k * k; ++i) slice[i] *= inv_norm;
        }
    }
    EACONV_ASSERT_FINITE(bank.filters);
    return bank;
}

// ---------------------------------------------------------------------------
// Kernel synthesis: κ_p[o,c] = Σ_b w[o,c,b] · filters[p,b]
// ---------------------------------------------------------------------------

inline Tensor synthesize_kernels(const BasisBank& bank, const Tensor& w) {
    require_rank(w, 3, "synthesize_kernels weights");
    const int64_t p_count = bank.num_paths(), b_count = bank.num_basis(), k = bank.kernel_size();
    if (w.dim(2) != b_count) {
        throw std::invalid_argument("synthesize_kernels: weight basis axis B=" +
                                    std::to_string(w.dim(2)) + " does not match bank B=" +
                                    std::to_string(b_count));
    }
    const int64_t o_count = w.dim(0), c_count = w.dim(1);
    Tensor kernels({p_count, o_count, c_count, k, k});
    const int64_t kk = k * k;
    for (int64_t p = 0; p < p_count; ++p) {
        const double* fil = bank.filters.data() + p * b_count * kk;
        for (int64_t oc = 0; oc < o_count * c_count; ++oc) {
            const double* wv = w.data() + oc * b_count;
            double* out = kernels.data() + (p * o_count * c_count + oc) * kk;
            for (int64_t b = 0; b < b_count; ++b) {
                const double coeff = wv[b];
                if (coeff == 0.0) continue;
                const double* f = fil + b * kk;
                for (int64_t i = 0; i < kk; ++i) out[i] += coeff * f[i];
            }
        }
    }
    return kernels;
}

/// Adjoint of synthesize_kernels: accumulates kernel gradients back onto the
/// shared basis weights, summing over paths.
inline Tensor synthesize_kernels_backward(const BasisBank& bank, const Tensor& grad_kernels) {
    require_rank(grad_kernels, 5, "synthesize_kernels_backward");
    const int64_t p_count = bank.num_paths(), b_count = bank.num_basis(), k = bank.kernel_size();
    const int64_t o_count = grad_kernels.dim(1), c_count = grad_kernels.dim(2);
    if (grad_kernels.dim(0) != p_count || grad_kernels.dim(3) != k || grad_kernels.dim(4) != k) {
        throw std::invalid_argument("synthesize_kernels_backward: grad shape " +
                                    grad_kernels.shape_string() + " does not match bank");
    }
    Tensor grad_w({o_count, c_count, b_count});
    const int64_t kk = k * k;
    for (int64_t p = 0; p < p_count; ++p) {
        const double* fil = bank.filters.data() + p * b_count * kk;
        for (int64_t oc = 0; oc < o_count * c_count; ++oc) {
            const double* g = grad_kernels.data() + (p * o_count * c_count + oc) * kk;
            double* gw = grad_w.data() + oc * b_count;
            for (int64_t b = 0; b < b_count; ++b) {
                const double* f = fil + b * kk;
                double s = 0.0;
                for (int64_t i = 0; i < kk; ++i) s += g[i] * f[i];
                gw[b] += s;
            }
        }
    }
    return grad_w;
}

}  // namespace eaconv
