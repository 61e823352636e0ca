#include "eaconv/perturb.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <queue>
#include <vector>

#include "eaconv/data.hpp"
#include "eaconv/rng.hpp"
#include "eaconv/tensor.hpp"
#include "testutil.hpp"

using eaconv::ElasticField;
using eaconv::PerturbSpec;
using eaconv::Rng;
using eaconv::Tensor;

namespace {

Tensor random_image(int64_t c, int64_t h, int64_t w, uint64_t seed) {
    Rng rng(seed);
    Tensor img({c, h, w});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
    return img;
}

Tensor blob_image(int64_t size) {
    Tensor img({1, size, size});
    const double blobs[3][3] = {{14.0, 18.0, 5.0}, {30.0, 22.0, 7.0}, {22.0, 34.0, 4.0}};
    for (int64_t y = 0; y < size; ++y) {
        for (int64_t x = 0; x < size; ++x) {
            double v = 0.0;
            for (const auto& b : blobs) {
                const double dx = x - b[0], dy = y - b[1];
                v += std::exp(-(dx * dx + dy * dy) / (2.0 * b[2] * b[2]));
            }
            img[y * size + x] = std::min(1.0, v);
        }
    }
    return img;
}

double psnr(const Tensor& a, const Tensor& b) {
    double mse = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = a[i] - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    return 10.0 * std::log10(1.0 / mse);
}

int64_t count_zero_pixels(const Tensor& img) {
    const int64_t h = img.dim(1), w = img.dim(2);
    int64_t count = 0;
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            bool all_zero = true;
            for (int64_t c = 0; c < img.dim(0); ++c) {
                if (img[(c * h + y) * w + x] != 0.0) all_zero = false;
            }
            if (all_zero) ++count;
        }
    }
    return count;
}

/// Number of 4-connected components of exactly-zero pixels.
int64_t zero_components(const Tensor& img) {
    const int64_t h = img.dim(1), w = img.dim(2);
    std::vector<char> zero(static_cast<size_t>(h * w), 0), seen(static_cast<size_t>(h * w), 0);
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            bool all_zero = true;
            for (int64_t c = 0; c < img.dim(0); ++c) {
                if (img[(c * h + y) * w + x] != 0.0) all_zero = false;
            }
            zero[static_cast<size_t>(y * w + x)] = all_zero ? 1 : 0;
        }
    }
    int64_t components = 0;
    for (int64_t start = 0; start < h * w; ++start) {
        if (!zero[static_cast<size_t>(start)] || seen[static_cast<size_t>(start)]) continue;
        ++components;
        std::queue<int64_t> frontier;
        frontier.push(start);
        seen[static_cast<size_t>(start)] = 1;
        while (!frontier.empty()) {
            const int64_t cur = frontier.front();
            frontier.pop();
            const int64_t y = cur / w, x = cur % w;
            const int64_t nbrs[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
            for (const auto& n : nbrs) {
                if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
                const int64_t idx = n[0] * w + n[1];
                if (zero[static_cast<size_t>(idx)] && !seen[static_cast<size_t>(idx)]) {
                    seen[static_cast<size_t>(idx)] = 1;
                    frontier.push(idx);
                }
            }
        }
    }
    return components;
}

/// Sign changes of (v - 0.5) along one row of a single-channel image.
int64_t half_crossings(const Tensor& img, int64_t row) {
    const int64_t w = img.dim(2);
    int64_t count = 0;
    for (int64_t x = 0; x + 1 < w; ++x) {
        const double a = img[(0 * img.dim(1) + row) * w + x] - 0.5;
        const double b = img[(0 * img.dim(1) + row) * w + x + 1] - 0.5;
        if (a * b < 0.0) ++count;
    }
    return count;
}

}  // namespace

// ---------------------------------------------------------------------------
// warp
// ---------------------------------------------------------------------------

TEST(Warp, ZeroFieldIsIdentity) {
    Tensor img = random_image(3, 8, 8, 1);
    ElasticField field{Tensor({8, 8}), Tensor({8, 8})};
    EXPECT_EQ(eaconv::max_abs_diff(eaconv::warp(img, field), img), 0.0);
}

TEST(Warp, UnitShiftWithEdgeClamp) {
    Tensor img = random_image(1, 4, 6, 2);
    ElasticField field{Tensor({4, 6}), Tensor({4, 6})};
    for (int64_t i = 0; i < 24; ++i) field.dx[i] = 1.0;
    Tensor out = eaconv::warp(img, field);
    for (int64_t y = 0; y < 4; ++y) {
        for (int64_t x = 0; x < 6; ++x) {
            const double expected = img[y * 6 + std::min<int64_t>(x + 1, 5)];
            EXPECT_EQ(out[y * 6 + x], expected) << y << "," << x;
        }
    }
}

TEST(Warp, InverseWarpRecoversSmoothImage) {
    const int64_t size = 48;
    Tensor img = blob_image(size);
    ElasticField field = eaconv::make_elastic_field(size, size, 0.5, 4.0, 99);
    ElasticField inverse{Tensor({size, size}), Tensor({size, size})};
    for (int64_t i = 0; i < size * size; ++i) {
        inverse.dx[i] = -field.dx[i];
        inverse.dy[i] = -field.dy[i];
    }
    Tensor recovered = eaconv::warp(eaconv::warp(img, field), inverse);
    EXPECT_GT(psnr(recovered, img), 30.0);
}

TEST(Warp, RejectsMismatchedField) {
    Tensor img = random_image(1, 4, 4, 3);
    ElasticField field{Tensor({5, 4}), Tensor({5, 4})};
    EXPECT_THROW(eaconv::warp(img, field), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// elastic
// ---------------------------------------------------------------------------

TEST(Elastic, ZeroAlphaIsIdentity) {
    Tensor img = random_image(3, 10, 10, 4);
    EXPECT_EQ(eaconv::max_abs_diff(eaconv::elastic(img, 0.0, 4.0, 1), img), 0.0);
}

TEST(Elastic, DeterministicInSeed) {
    Tensor img = random_image(3, 12, 12, 5);
    Tensor a = eaconv::elastic(img, 1.5, 4.0, 42);
    Tensor b = eaconv::elastic(img, 1.5, 4.0, 42);
    Tensor c = eaconv::elastic(img, 1.5, 4.0, 43);
    EXPECT_EQ(eaconv::max_abs_diff(a, b), 0.0);
    EXPECT_GT(eaconv::max_abs_diff(a, c), 0.0);
}

TEST(Elastic, FieldStdMatchesAlpha) {
    const ElasticField field = eaconv::make_elastic_field(100, 100, 1.5, 4.0, 7);
    for (const Tensor* comp : {&field.dx, &field.dy}) {
        double mean = 0.0;
        for (int64_t i = 0; i < comp->numel(); ++i) mean += (*comp)[i];
        mean /= static_cast<double>(comp->numel());
        double var = 0.0;
        for (int64_t i = 0; i < comp->numel(); ++i) {
            const double d = (*comp)[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(comp->numel());
        EXPECT_NEAR(std::sqrt(var), 1.5, 0.05 * 1.5);   // documented tolerance
        EXPECT_NEAR(std::sqrt(var), 1.5, 1e-9);         // construction is exact
    }
}

// ---------------------------------------------------------------------------
// gaussian_noise
// ---------------------------------------------------------------------------

TEST(GaussianNoise, ZeroStdIsIdentity) {
    Tensor img = random_image(3, 8, 8, 6);
    EXPECT_EQ(eaconv::max_abs_diff(eaconv::gaussian_noise(img, 0.0, 1), img), 0.0);
}

TEST(GaussianNoise, DeterministicInSeed) {
    Tensor img = random_image(3, 8, 8, 7);
    Tensor a = eaconv::gaussian_noise(img, 0.1, 5);
    Tensor b = eaconv::gaussian_noise(img, 0.1, 5);
    EXPECT_EQ(eaconv::max_abs_diff(a, b), 0.0);
}

TEST(GaussianNoise, EmpiricalStdMatches) {
    // mid-gray image with small std: the clamp never fires, so out - in is
    // exactly the additive noise
    Tensor img({3, 600, 600});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = 0.5;
    Tensor out = eaconv::gaussian_noise(img, 0.02, 11);
    double var = 0.0;
    for (int64_t i = 0; i < img.numel(); ++i) {
        const double d = out[i] - img[i];
        var += d * d;
    }
    var /= static_cast<double>(img.numel());
    EXPECT_NEAR(std::sqrt(var), 0.02, 0.02 * 0.02);
}

TEST(GaussianNoise, ClampsToPixelRange) {
    Tensor img = random_image(1, 16, 16, 8);
    Tensor out = eaconv::gaussian_noise(img, 0.8, 3);
    for (int64_t i = 0; i < out.numel(); ++i) {
        EXPECT_GE(out[i], 0.0);
        EXPECT_LE(out[i], 1.0);
    }
    EXPECT_THROW(eaconv::gaussian_noise(img, -0.1, 3), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// occlusion
// ---------------------------------------------------------------------------

TEST(Occlusion, RadiusOneTouchesAtMostFivePixels) {
    Tensor img({1, 16, 16});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = 1.0;
    for (uint64_t seed = 0; seed < 8; ++seed) {
        EXPECT_LE(count_zero_pixels(eaconv::occlusion(img, 1, seed)), 5);
    }
}

TEST(Occlusion, HugeRadiusBlacksOutImage) {
    Tensor img = random_image(2, 16, 16, 9);
    Tensor out = eaconv::occlusion(img, 23, 0);  // 23 > sqrt(16^2+16^2)
    for (int64_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], 0.0);
}

TEST(Occlusion, DiscAreaNearPiRSquared) {
    const int64_t w = 101, h = 101, r = 10;
    Tensor img({1, h, w});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = 1.0;
    int64_t checked = 0;
    for (uint64_t seed = 0; seed < 40; ++seed) {
        // replicate the documented center draw to skip discs clipped by the
        // right/bottom edge, where the area bound does not apply
        Rng rng(seed);
        const int64_t cx = rng.uniform_int(r, w - 1);
        const int64_t cy = rng.uniform_int(r, h - 1);
        if (cx > w - 1 - r || cy > h - 1 - r) continue;
        const int64_t zeros = count_zero_pixels(eaconv::occlusion(img, r, seed));
        EXPECT_NEAR(static_cast<double>(zeros), std::numbers::pi * r * r, 4.0 * r + 4.0);
        ++checked;
    }
    EXPECT_GE(checked, 10);
}

TEST(Occlusion, DeterministicAndValidated) {
    Tensor img = random_image(3, 20, 20, 10);
    EXPECT_EQ(eaconv::max_abs_diff(eaconv::occlusion(img, 4, 9), eaconv::occlusion(img, 4, 9)),
              0.0);
    EXPECT_THROW(eaconv::occlusion(img, 0, 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// rotation
// ---------------------------------------------------------------------------

TEST(Rotation, ZeroDegreesIsIdentity) {
    Tensor img = random_image(3, 9, 9, 11);
    EXPECT_LT(eaconv::max_abs_diff(eaconv::rotation(img, 0.0), img), 1e-12);
}

TEST(Rotation, FullTurnIsIdentity) {
    Tensor img = random_image(3, 16, 16, 12);
    EXPECT_LT(eaconv::max_abs_diff(eaconv::rotation(img, 360.0), img), 1e-9);
}

TEST(Rotation, QuarterTurnMatchesIndexPermutation) {
    Tensor img = random_image(2, 12, 12, 13);
    Tensor out = eaconv::rotation(img, 90.0);
    const int64_t n = 12;
    for (int64_t c = 0; c < 2; ++c) {
        for (int64_t y = 0; y < n; ++y) {
            for (int64_t x = 0; x < n; ++x) {
                const double expected = img[(c * n + (n - 1 - x)) * n + y];
                EXPECT_NEAR(out[(c * n + y) * n + x], expected, 1e-9);
            }
        }
    }
}

TEST(Rotation, ExposedCornersAreZero) {
    Tensor img({1, 16, 16});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = 1.0;
    Tensor out = eaconv::rotation(img, 45.0);
    EXPECT_EQ(out[0], 0.0);                       // (0,0)
    EXPECT_EQ(out[15], 0.0);                      // (0,15)
    EXPECT_EQ(out[15 * 16], 0.0);                 // (15,0)
    EXPECT_EQ(out[15 * 16 + 15], 0.0);            // (15,15)
    EXPECT_NEAR(out[8 * 16 + 8], 1.0, 1e-9);      // center survives
}

// ---------------------------------------------------------------------------
// cut
// ---------------------------------------------------------------------------

TEST(Cut, OffImageLocationIsIdentity) {
    Tensor img = random_image(3, 32, 32, 14);
    EXPECT_EQ(eaconv::max_abs_diff(eaconv::cut(img, 32, 32), img), 0.0);
}

TEST(Cut, OriginZeroesTopLeftQuadrant) {
    Tensor img({1, 32, 32});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = 1.0;
    Tensor out = eaconv::cut(img, 0, 0);
    EXPECT_EQ(count_zero_pixels(out), 16 * 16);
    for (int64_t y = 0; y < 16; ++y)
        for (int64_t x = 0; x < 16; ++x) EXPECT_EQ(out[y * 32 + x], 0.0);
}

TEST(Cut, ClippedAreaIsExact) {
    Tensor img({2, 32, 32});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = 1.0;
    struct Case {
        int64_t x0, y0, area;
    };
    for (const Case& c : {Case{8, 8, 16 * 16}, Case{24, 28, 8 * 4}, Case{31, 0, 1 * 16},
                          Case{0, 31, 16 * 1}, Case{20, 20, 12 * 12}}) {
        EXPECT_EQ(count_zero_pixels(eaconv::cut(img, c.x0, c.y0)), c.area)
            << c.x0 << "," << c.y0;
    }
    EXPECT_THROW(eaconv::cut(img, -1, 0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// zoom
// ---------------------------------------------------------------------------

TEST(Zoom, FactorOneIsIdentity) {
    Tensor img = random_image(3, 16, 16, 15);
    EXPECT_EQ(eaconv::max_abs_diff(eaconv::zoom(img, 1.0), img), 0.0);
    EXPECT_THROW(eaconv::zoom(img, 0.5), std::invalid_argument);
}

TEST(Zoom, ShapePreservedAndConstantInvariant) {
    Tensor img({2, 20, 20});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = 0.7;
    for (double zeta : {1.1, 1.3, 1.5, 2.0}) {
        Tensor out = eaconv::zoom(img, zeta);
        ASSERT_TRUE(out.same_shape(img));
        EXPECT_LT(eaconv::max_abs_diff(out, img), 1e-12) << zeta;
    }
}

TEST(Zoom, DoubleFactorHalvesCheckerboardPeriods) {
    // checkerboard with 2x2 cells: 15 half-level crossings along the center
    // row; a 2x zoom shows half as many periods
    Tensor img({1, 32, 32});
    for (int64_t y = 0; y < 32; ++y) {
        for (int64_t x = 0; x < 32; ++x) {
            img[y * 32 + x] = static_cast<double>((x / 2 + y / 2) % 2);
        }
    }
    EXPECT_EQ(half_crossings(img, 16), 15);
    Tensor out = eaconv::zoom(img, 2.0);
    EXPECT_EQ(half_crossings(out, 16), 7);
}

// ---------------------------------------------------------------------------
// PerturbSpec + dataset application
// ---------------------------------------------------------------------------

TEST(PerturbSpec, JsonRoundTrip) {
    PerturbSpec spec;
    spec.kind = "elastic";
    spec.params = {{"alpha", 1.5}, {"sigma_field", 4.0}};
    spec.seed = 123456789ULL;
    PerturbSpec back = eaconv::perturb_spec_from_json(eaconv::perturb_spec_to_json(spec));
    EXPECT_EQ(back.kind, spec.kind);
    EXPECT_EQ(back.seed, spec.seed);
    EXPECT_EQ(back.params, spec.params);
}

TEST(PerturbSpec, ValidationRejectsBadSpecs) {
    auto make = [](const std::string& kind, std::map<std::string, double> params) {
        PerturbSpec s;
        s.kind = kind;
        s.params = std::move(params);
        return s;
    };
    EXPECT_THROW(make("warp_drive", {}).validate(), std::invalid_argument);
    EXPECT_THROW(make("gaussian", {}).validate(), std::invalid_argument);  // missing std
    EXPECT_THROW(make("gaussian", {{"std", -1.0}}).validate(), std::invalid_argument);
    EXPECT_THROW(make("occlusion", {{"radius", 0.0}}).validate(), std::invalid_argument);
    EXPECT_THROW(make("rotation", {{"theta", 360.0}}).validate(), std::invalid_argument);
    EXPECT_THROW(make("zoom", {{"zeta", 0.9}}).validate(), std::invalid_argument);
    EXPECT_THROW(make("cut", {{"x0", -2.0}, {"y0", 0.0}}).validate(), std::invalid_argument);
    EXPECT_NO_THROW(make("identity", {}).validate());
    EXPECT_NO_THROW(make("elastic", {{"alpha", 1.0}, {"sigma_field", 4.0}}).validate());
}

TEST(PerturbDataset, IdentitySpecLeavesImagesIntact) {
    eaconv::SyntheticSpec sspec;
    sspec.image_size = 16;
    sspec.samples_per_class = 2;
    sspec.seed = 5;
    eaconv::Dataset ds = eaconv::generate_synthetic(sspec);
    PerturbSpec spec;
    spec.kind = "identity";
    eaconv::Dataset out = eaconv::perturb_dataset(ds, spec);
    EXPECT_EQ(eaconv::max_abs_diff(out.images, ds.images), 0.0);
    EXPECT_EQ(out.labels, ds.labels);
}

TEST(PerturbDataset, RepeatApplicationIsBitIdentical) {
    eaconv::SyntheticSpec sspec;
    sspec.image_size = 16;
    sspec.samples_per_class = 2;
    sspec.seed = 6;
    eaconv::Dataset ds = eaconv::generate_synthetic(sspec);
    PerturbSpec spec;
    spec.kind = "elastic";
    spec.params = {{"alpha", 1.0}, {"sigma_field", 4.0}};
    spec.seed = 31;
    eaconv::Dataset a = eaconv::perturb_dataset(ds, spec);
    eaconv::Dataset b = eaconv::perturb_dataset(ds, spec);
    EXPECT_EQ(eaconv::max_abs_diff(a.images, b.images), 0.0);
}

TEST(PerturbDataset, PerImageSeedIsSpecSeedXorIndex) {
    eaconv::SyntheticSpec sspec;
    sspec.image_size = 16;
    sspec.samples_per_class = 2;
    sspec.seed = 7;
    eaconv::Dataset ds = eaconv::generate_synthetic(sspec);
    PerturbSpec spec;
    spec.kind = "gaussian";
    spec.params = {{"std", 0.06}};
    spec.seed = 1000;
    eaconv::Dataset out = eaconv::perturb_dataset(ds, spec);
    for (int64_t i = 0; i < ds.size(); ++i) {
        Tensor expected = eaconv::gaussian_noise(ds.image(i), 0.06, 1000ULL ^ uint64_t(i));
        eaconv::quantize_f32(expected);
        EXPECT_EQ(eaconv::max_abs_diff(out.image(i), expected), 0.0) << i;
    }
}

TEST(PerturbDataset, OcclusionLeavesExactlyOneDiscPerImage) {
    eaconv::SyntheticSpec sspec;
    sspec.image_size = 16;
    sspec.samples_per_class = 2;
    sspec.seed = 8;
    eaconv::Dataset ds = eaconv::generate_synthetic(sspec);
    PerturbSpec spec;
    spec.kind = "occlusion";
    spec.params = {{"radius", 3.0}};
    spec.seed = 77;
    eaconv::Dataset out = eaconv::perturb_dataset(ds, spec);
    for (int64_t i = 0; i < out.size(); ++i) {
        EXPECT_EQ(zero_components(out.image(i)), 1) << i;
    }
    EXPECT_NE(out.meta.find("occlusion"), std::string::npos);
}
