#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "eaconv/tensor.hpp"

namespace eaconv {

/// Cholesky factorization of a symmetric positive-definite matrix, A = L·Lᵀ.
/// Throws if a pivot collapses, reporting the diagonal spread as a
/// conditioning hint (rank-deficient Gram matrices land here).
inline Tensor cholesky(const Tensor& a) {
    require_rank(a, 2, "cholesky");
    const int64_t n = a.dim(0);
    if (a.dim(1) != n) throw std::invalid_argument("cholesky: matrix must be square, got " + a.shape_string());
    Tensor l({n, n});
    double max_diag = 0.0;
    for (int64_t i = 0; i < n; ++i) max_diag = std::max(max_diag, a.at2(i, i));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j <= i; ++j) {
            double s = a.at2(i, j);
            for (int64_t k = 0; k < j; ++k) s -= l.at2(i, k) * l.at2(j, k);
            if (i == j) {
                if (s <= max_diag * 1e-14) {
                    throw std::runtime_error(
                        "cholesky: matrix not positive definite at pivot " + std::to_string(i) +
                        " (pivot " + std::to_string(s) + ", max diagonal " +
                        std::to_string(max_diag) +
                        "; condition estimate " +
                        std::to_string(s > 0.0 ? max_diag / s : std::numeric_limits<double>::infinity()) +
                        ")");
                }
                l.at2(i, i) = std::sqrt(s);
            } else {
                l.at2(i, j) = s / l.at2(j, j);
            }
        }
    }
    return l;
}

/// Solves L·Lᵀ·x = b given the Cholesky factor L.
inline Tensor cholesky_solve(const Tensor& l, const Tensor& b) {
    const int64_t n = l.dim(0);
    if (b.numel() != n) throw std::invalid_argument("cholesky_solve: rhs size mismatch");
    Tensor y({n});
    for (int64_t i = 0; i < n; ++i) {
        double s = b[i];
        for (int64_t k = 0; k < i; ++k) s -= l.at2(i, k) * y[k];
        y[i] = s / l.at2(i, i);
    }
    Tensor x({n});
    for (int64_t i = n - 1; i >= 0; --i) {
        double s = y[i];
        for (int64_t k = i + 1; k < n; ++k) s -= l.at2(k, i) * x[k];
        x[i] = s / l.at2(i, i);
    }
    return x;
}

/// Least squares min_x ‖A·x − b‖₂ via the normal equations (AᵀA well
/// conditioned for our near-orthonormal bases). A is [m,n] with m ≥ n.
inline Tensor least_squares(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "least_squares");
    const int64_t m = a.dim(0), n = a.dim(1);
    if (b.numel() != m) {
        throw std::invalid_argument("least_squares: rhs length " + std::to_string(b.numel()) +
                                    " does not match row count " + std::to_string(m));
    }
    Tensor gram({n, n});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = i; j < n; ++j) {
            double s = 0.0;
            for (int64_t k = 0; k < m; ++k) s += a.at2(k, i) * a.at2(k, j);
            gram.at2(i, j) = s;
            gram.at2(j, i) = s;
        }
    }
    Tensor rhs({n});
    for (int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (int64_t k = 0; k < m; ++k) s += a.at2(k, i) * b[k];
        rhs[i] = s;
    }
    return cholesky_solve(cholesky(gram), rhs);
}

}  // namespace eaconv
