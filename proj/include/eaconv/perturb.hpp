#pragma once

// The six evaluation perturbations: elastic warp, Gaussian noise, circular
// occlusion, rotation, rectangular cut, and zoom. Every generator is a pure
// function of (image, params, seed); dataset-level application derives each
// image's seed as spec.seed XOR image-index, so sets are reproducible and
// images independent.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "eaconv/data.hpp"
#include "eaconv/rng.hpp"
#include "eaconv/tensor.hpp"

namespace eaconv {

// ---------------------------------------------------------------------------
// Bilinear sampling
// ---------------------------------------------------------------------------

namespace detail {

enum class Border { kClamp, kZero };

inline double sample_bilinear(const double* plane, int64_t h, int64_t w, double y, double x,
                              Border border) {
    if (border == Border::kZero) {
        if (y < -1.0 || y > static_cast<double>(h) || x < -1.0 || x > static_cast<double>(w)) {
            return 0.0;
        }
    }
    const double fy = std::floor(y), fx = std::floor(x);
    const int64_t y0 = static_cast<int64_t>(fy), x0 = static_cast<int64_t>(fx);
    const double wy = y - fy, wx = x - fx;
    auto fetch = [&](int64_t yi, int64_t xi) -> double {
        if (border == Border::kClamp) {
            yi = std::clamp<int64_t>(yi, 0, h - 1);
            xi = std::clamp<int64_t>(xi, 0, w - 1);
            return plane[yi * w + xi];
        }
        if (yi < 0 || yi >= h || xi < 0 || xi >= w) return 0.0;
        return plane[yi * w + xi];
    };
    const double v00 = fetch(y0, x0), v01 = fetch(y0, x0 + 1);
    const double v10 = fetch(y0 + 1, x0), v11 = fetch(y0 + 1, x0 + 1);
    return (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
}

inline void require_image(const Tensor& image, const char* what) {
    require_rank(image, 3, what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elastic warp
// ---------------------------------------------------------------------------

/// Smooth displacement field in pixels; dx shifts sampling along x (columns),
/// dy along y (rows).
struct ElasticField {
    Tensor dx, dy;  // [H,W]
};

/// Bilinear resampling of the image at (x+dx, y+dy); out-of-bounds sampling
/// clamps to the edge.
inline Tensor warp(const Tensor& image, const ElasticField& field) {
    detail::require_image(image, "warp");
    const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (field.dx.rank() != 2 || field.dx.dim(0) != h || field.dx.dim(1) != w ||
        !field.dx.same_shape(field.dy)) {
        throw std::invalid_argument("warp: field shape does not match image " +
                                    image.shape_string());
    }
    Tensor out(image.shape());
    for (int64_t ci = 0; ci < c; ++ci) {
        const double* plane = image.data() + ci * h * w;
        double* dst = out.data() + ci * h * w;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const double sy = static_cast<double>(y) + field.dy.at2(y, x);
                const double sx = static_cast<double>(x) + field.dx.at2(y, x);
                dst[y * w + x] =
                    detail::sample_bilinear(plane, h, w, sy, sx, detail::Border::kClamp);
            }
        }
    }
    return out;
}

namespace detail {

/// Separable Gaussian filter with a 3-sigma truncated kernel and reflected
/// borders.
inline Tensor gaussian_filter_2d(const Tensor& field, double sigma) {
    const int64_t h = field.dim(0), w = field.dim(1);
    const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int64_t i = -radius; i <= radius; ++i) {
        const double v = std::exp(-(static_cast<double>(i * i)) / (2.0 * sigma * sigma));
        kernel[static_cast<size_t>(i + radius)] = v;
        sum += v;
    }
    for (double& v : kernel) v /= sum;
    auto reflect = [](int64_t i, int64_t n) {
        while (i < 0 || i >= n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - i - 1;
        }
        return i;
    };
    Tensor tmp({h, w}), out({h, w});
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double s = 0.0;
            for (int64_t i = -radius; i <= radius; ++i) {
                s += kernel[static_cast<size_t>(i + radius)] * field.at2(y, reflect(x + i, w));
            }
            tmp.at2(y, x) = s;
        }
    }
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double s = 0.0;
            for (int64_t i = -radius; i <= radius; ++i) {
                s += kernel[static_cast<size_t>(i + radius)] * tmp.at2(reflect(y + i, h), x);
            }
            out.at2(y, x) = s;
        }
    }
    return out;
}

inline void normalize_field_std(Tensor& field, double target) {
    double mean = 0.0;
    for (int64_t i = 0; i < field.numel(); ++i) mean += field[i];
    mean /= static_cast<double>(field.numel());
    double var = 0.0;
    for (int64_t i = 0; i < field.numel(); ++i) {
        const double d = field[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(field.numel());
    if (var <= 0.0) return;
    const double s = target / std::sqrt(var);
    for (int64_t i = 0; i < field.numel(); ++i) field[i] = (field[i] - mean) * s;
}

}  // namespace detail

/// Gaussian-filtered white noise, rescaled so each displacement component has
/// empirical standard deviation exactly `alpha` pixels.
inline ElasticField make_elastic_field(int64_t h, int64_t w, double alpha, double sigma_field,
                                       uint64_t seed) {
    if (alpha < 0.0) throw std::invalid_argument("make_elastic_field: alpha must be >= 0");
    if (!(sigma_field > 0.0)) {
        throw std::invalid_argument("make_elastic_field: sigma_field must be positive");
    }
    Rng rng(seed);
    ElasticField field{Tensor({h, w}), Tensor({h, w})};
    for (int64_t i = 0; i < h * w; ++i) field.dx[i] = rng.normal();
    for (int64_t i = 0; i < h * w; ++i) field.dy[i] = rng.normal();
    field.dx = detail::gaussian_filter_2d(field.dx, sigma_field);
    field.dy = detail::gaussian_filter_2d(field.dy, sigma_field);
    detail::normalize_field_std(field.dx, alpha);
    detail::normalize_field_std(field.dy, alpha);
    return field;
}

inline Tensor elastic(const Tensor& image, double alpha, double sigma_field, uint64_t seed) {
    detail::require_image(image, "elastic");
    if (alpha == 0.0) return image;
    const ElasticField field =
        make_elastic_field(image.dim(1), image.dim(2), alpha, sigma_field, seed);
    return warp(image, field);
}

// ---------------------------------------------------------------------------
// Gaussian pixel noise (std in the image's [0,1] scale), clamped to [0,1]
// ---------------------------------------------------------------------------

inline Tensor gaussian_noise(const Tensor& image, double std, uint64_t seed) {
    detail::require_image(image, "gaussian_noise");
    if (std < 0.0) throw std::invalid_argument("gaussian_noise: std must be >= 0");
    if (std == 0.0) return image;
    Rng rng(seed);
    Tensor out(image.shape());
    for (int64_t i = 0; i < image.numel(); ++i) {
        out[i] = std::clamp(image[i] + rng.normal(0.0, std), 0.0, 1.0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Circular occlusion: disc of radius r, black fill, center drawn uniformly
// from [r, W-1] × [r, H-1]
// ---------------------------------------------------------------------------

inline Tensor occlusion(const Tensor& image, int64_t r, uint64_t seed) {
    detail::require_image(image, "occlusion");
    const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (r < 1) throw std::invalid_argument("occlusion: radius must be >= 1");
    Rng rng(seed);
    // radii beyond the image collapse the center range to the far corner
    const int64_t cx = rng.uniform_int(std::min(r, w - 1), w - 1);
    const int64_t cy = rng.uniform_int(std::min(r, h - 1), h - 1);
    Tensor out = image;
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const int64_t dx = x - cx, dy = y - cy;
            if (dx * dx + dy * dy <= r * r) {
                for (int64_t ci = 0; ci < c; ++ci) out[(ci * h + y) * w + x] = 0.0;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rotation about the image center, bilinear, exposed corners filled with 0
// ---------------------------------------------------------------------------

inline Tensor rotation(const Tensor& image, double theta_degrees) {
    detail::require_image(image, "rotation");
    const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const double theta = theta_degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(theta), sn = std::sin(theta);
    const double cy = static_cast<double>(h - 1) / 2.0, cx = static_cast<double>(w - 1) / 2.0;
    Tensor out(image.shape());
    for (int64_t ci = 0; ci < c; ++ci) {
        const double* plane = image.data() + ci * h * w;
        double* dst = out.data() + ci * h * w;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                // inverse mapping: rotate the output coordinate back by -theta
                const double rx = static_cast<double>(x) - cx, ry = static_cast<double>(y) - cy;
                const double sx = cs * rx + sn * ry + cx;
                const double sy = -sn * rx + cs * ry + cy;
                dst[y * w + x] = detail::sample_bilinear(plane, h, w, sy, sx,
                                                         detail::Border::kZero);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cut: zero the W/2 × H/2 rectangle anchored at (x0, y0), clipped to bounds
// ---------------------------------------------------------------------------

inline Tensor cut(const Tensor& image, int64_t x0, int64_t y0) {
    detail::require_image(image, "cut");
    const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (x0 < 0 || y0 < 0) throw std::invalid_argument("cut: location must be non-negative");
    Tensor out = image;
    const int64_t x1 = std::min(w, x0 + w / 2), y1 = std::min(h, y0 + h / 2);
    for (int64_t ci = 0; ci < c; ++ci) {
        for (int64_t y = y0; y < y1; ++y) {
            for (int64_t x = x0; x < x1; ++x) out[(ci * h + y) * w + x] = 0.0;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Zoom: center crop of side ⌊W/ζ⌋, bilinear resize back to the full size
// ---------------------------------------------------------------------------

inline Tensor zoom(const Tensor& image, double zeta) {
    detail::require_image(image, "zoom");
    if (zeta < 1.0) throw std::invalid_argument("zoom: factor must be >= 1");
    if (zeta == 1.0) return image;
    const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const int64_t cw = std::max<int64_t>(1, static_cast<int64_t>(w / zeta));
    const int64_t ch = std::max<int64_t>(1, static_cast<int64_t>(h / zeta));
    const int64_t ox = (w - cw) / 2, oy = (h - ch) / 2;
    Tensor out(image.shape());
    for (int64_t ci = 0; ci < c; ++ci) {
        const double* plane = image.data() + ci * h * w;
        double* dst = out.data() + ci * h * w;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                // align-corners mapping from output pixel to crop coordinates
                const double sy =
                    h > 1 ? static_cast<double>(oy) +
                                static_cast<double>(y) * static_cast<double>(ch - 1) /
                                    static_cast<double>(h - 1)
                          : static_cast<double>(oy);
                const double sx =
                    w > 1 ? static_cast<double>(ox) +
                                static_cast<double>(x) * static_cast<double>(cw - 1) /
                                    static_cast<double>(w - 1)
                          : static_cast<double>(ox);
                dst[y * w + x] = detail::sample_bilinear(plane, h, w, sy, sx,
                                                         detail::Border::kClamp);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tagged perturbation spec and dataset-level application
// ---------------------------------------------------------------------------

struct PerturbSpec {
    std::string kind;  // elastic | gaussian | occlusion | rotation | cut | zoom | identity
    std::map<std::string, double> params;
    uint64_t seed = 0;

    double param(const std::string& key) const {
        auto it = params.find(key);
        if (it == params.end()) {
            throw std::invalid_argument("PerturbSpec: missing parameter '" + key + "' for kind '" +
                                        kind + "'");
        }
        return it->second;
    }

    void validate() const {
        if (kind == "identity") return;
        if (kind == "elastic") {
            if (param("alpha") < 0.0) throw std::invalid_argument("PerturbSpec: alpha must be >= 0");
            if (!(param("sigma_field") > 0.0)) {
                throw std::invalid_argument("PerturbSpec: sigma_field must be positive");
            }
        } else if (kind == "gaussian") {
            if (param("std") < 0.0) throw std::invalid_argument("PerturbSpec: std must be >= 0");
        } else if (kind == "occlusion") {
            if (param("radius") < 1.0) {
                throw std::invalid_argument("PerturbSpec: radius must be >= 1");
            }
        } else if (kind == "rotation") {
            const double t = param("theta");
            if (t < 0.0 || t >= 360.0) {
                throw std::invalid_argument("PerturbSpec: theta must lie in [0, 360)");
            }
        } else if (kind == "cut") {
            if (param("x0") < 0.0 || param("y0") < 0.0) {
                throw std::invalid_argument("PerturbSpec: cut location must be non-negative");
            }
        } else if (kind == "zoom") {
            if (param("zeta") < 1.0) throw std::invalid_argument("PerturbSpec: zeta must be >= 1");
        } else {
            throw std::invalid_argument("PerturbSpec: unknown kind '" + kind + "'");
        }
    }
};

inline nlohmann::json perturb_spec_to_json(const PerturbSpec& spec) {
    return {{"kind", spec.kind}, {"params", spec.params}, {"seed", spec.seed}};
}

inline PerturbSpec perturb_spec_from_json(const nlohmann::json& j) {
    PerturbSpec spec;
    spec.kind = j.at("kind").get<std::string>();
    if (j.contains("params")) {
        spec.params = j.at("params").get<std::map<std::string, double>>();
    }
    if (j.contains("seed")) spec.seed = j.at("seed").get<uint64_t>();
    spec.validate();
    return spec;
}

/// Applies one perturbation to one image; per-image randomness comes from
/// seed XOR image-index.
inline Tensor apply_perturbation(const Tensor& image, const PerturbSpec& spec,
                                 uint64_t image_index) {
    const uint64_t seed = spec.seed ^ image_index;
    if (spec.kind == "identity") return image;
    if (spec.kind == "elastic") {
        return elastic(image, spec.param("alpha"), spec.param("sigma_field"), seed);
    }
    if (spec.kind == "gaussian") return gaussian_noise(image, spec.param("std"), seed);
    if (spec.kind == "occlusion") {
        return occlusion(image, static_cast<int64_t>(spec.param("radius")), seed);
    }
    if (spec.kind == "rotation") return rotation(image, spec.param("theta"));
    if (spec.kind == "cut") {
        return cut(image, static_cast<int64_t>(spec.param("x0")),
                   static_cast<int64_t>(spec.param("y0")));
    }
    if (spec.kind == "zoom") return zoom(image, spec.param("zeta"));
    throw std::invalid_argument("apply_perturbation: unknown kind '" + spec.kind + "'");
}

inline Dataset perturb_dataset(const Dataset& ds, const PerturbSpec& spec) {
    spec.validate();
    Dataset out;
    out.images = Tensor(ds.images.shape());
    out.labels = ds.labels;
    out.class_names = ds.class_names;
    out.meta = ds.meta + " + " + perturb_spec_to_json(spec).dump();
    const int64_t chw = ds.channels() * ds.height() * ds.width();
    for (int64_t i = 0; i < ds.size(); ++i) {
        Tensor p = apply_perturbation(ds.image(i), spec, static_cast<uint64_t>(i));
        double* dst = out.images.data() + i * chw;
        for (int64_t j = 0; j < chw; ++j) dst[j] = p[j];
    }
    quantize_f32(out.images);
    return out;
}

}  // namespace eaconv
