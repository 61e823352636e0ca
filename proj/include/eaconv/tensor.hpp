#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace eaconv {

/// Dense n-dimensional array of doubles, row-major.
/// The flat data size always equals the product of the extents.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

    Tensor(std::vector<int64_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != static_cast<int64_t>(data_.size())) {
            throw std::invalid_argument(
                "Tensor: data size " + std::to_string(data_.size()) +
                " does not match shape product " + std::to_string(checked_numel(shape_)));
        }
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, double value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& flat() { return data_; }
    const std::vector<double>& flat() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    /// Row-major offset helpers for the common ranks.
    int64_t offset2(int64_t i, int64_t j) const { return i * shape_[1] + j; }
    int64_t offset4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    double& at2(int64_t i, int64_t j) { return data_[static_cast<size_t>(offset2(i, j))]; }
    double at2(int64_t i, int64_t j) const { return data_[static_cast<size_t>(offset2(i, j))]; }
    double& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data_[static_cast<size_t>(offset4(n, c, h, w))];
    }
    double at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data_[static_cast<size_t>(offset4(n, c, h, w))];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    std::string shape_string() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) os << ',';
            os << shape_[i];
        }
        os << ']';
        return os.str();
    }

private:
    static int64_t checked_numel(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative extent");
            n *= d;
        }
        return n;
    }

    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

inline void require_rank(const Tensor& t, int rank, const char* what) {
    if (t.rank() != rank) {
        throw std::invalid_argument(std::string(what) + ": expected rank " +
                                    std::to_string(rank) + " tensor, got shape " +
                                    t.shape_string());
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    a.shape_string() + " vs " + b.shape_string());
    }
}

inline bool all_finite(const Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t[i])) return false;
    }
    return true;
}

// Opt-in hard check for non-finite intermediates. Off by default: overflow
// during training is a runtime condition the trainer reports as an exception,
// not a programming error, and the full-tensor scan is costly in inner loops.
#ifdef EACONV_ENABLE_FINITE_CHECKS
#define EACONV_ASSERT_FINITE(t) assert(::eaconv::all_finite(t) && "non-finite tensor value")
#else
#define EACONV_ASSERT_FINITE(t) ((void)0)
#endif

// -------------------- elementwise arithmetic --------------------

inline Tensor& add_inplace(Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    for (int64_t i = 0; i < a.numel(); ++i) a[i] += b[i];
    return a;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    add_inplace(out, b);
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
    return out;
}

inline void scale_inplace(Tensor& a, double s) {
    for (int64_t i = 0; i < a.numel(); ++i) a[i] *= s;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return out;
}

inline void axpy_inplace(Tensor& y, double a, const Tensor& x) {
    require_same_shape(y, x, "axpy");
    for (int64_t i = 0; i < y.numel(); ++i) y[i] += a * x[i];
}

inline double dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Pair of a value tensor and a gradient tensor of identical shape.
/// Used as the trainable-parameter carrier throughout the layer code.
struct Grad {
    Tensor value;
    Tensor gradient;

    Grad() = default;
    explicit Grad(Tensor v) : value(std::move(v)), gradient(Tensor(value.shape())) {}

    void zero_grad() { std::fill(gradient.flat().begin(), gradient.flat().end(), 0.0); }
};

}  // namespace eaconv
