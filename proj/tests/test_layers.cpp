#include "eaconv/ealayers.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numbers>

#include "eaconv/basis.hpp"
#include "eaconv/layers.hpp"
#include "eaconv/model.hpp"
#include "eaconv/ops.hpp"
#include "eaconv/perturb.hpp"
#include "eaconv/rng.hpp"
#include "testutil.hpp"

using eaconv::BasisBank;
using eaconv::EAConvLayer;
using eaconv::EAResBlock;
using eaconv::Rng;
using eaconv::Tensor;
using testutil::fill_pattern;
using testutil::max_rel_error;
using testutil::numeric_gradient;

namespace {

std::shared_ptr<const BasisBank> make_bank(int64_t k = 3, double alpha = 0.5) {
    return std::make_shared<const BasisBank>(
        eaconv::build_basis_bank(eaconv::make_basis_config(k, 1.0, alpha)));
}

/// Loss functional for layer gradchecks: dot(forward_train(x), grad_out).
/// update_stats=false keeps training-mode forwards pure.
double layer_loss(eaconv::Layer& layer, const Tensor& x, const Tensor& grad_out) {
    return eaconv::dot(layer.forward_train(x, false), grad_out);
}

}  // namespace

// ---------------------------------------------------------------------------
// Plain layers through the Layer interface
// ---------------------------------------------------------------------------

TEST(Conv2dLayer, GradcheckAllParams) {
    Rng rng(1);
    eaconv::Conv2dLayer layer(2, 3, 3, 1, 1, rng);
    Tensor x({2, 2, 5, 5});
    fill_pattern(x, 11);
    Tensor out = layer.forward_train(x, false);
    Tensor grad_out(out.shape());
    fill_pattern(grad_out, 12);
    layer.zero_grad();
    Tensor gi = layer.backward(grad_out);

    auto loss_x = [&](const Tensor& t) { return layer_loss(layer, t, grad_out); };
    EXPECT_LT(max_rel_error(gi, numeric_gradient(loss_x, x)), 1e-6);
    for (auto& p : layer.params()) {
        Tensor analytic = p.param->gradient;
        auto loss_p = [&](const Tensor& t) {
            Tensor saved = p.param->value;
            p.param->value = t;
            const double v = layer_loss(layer, x, grad_out);
            p.param->value = saved;
            return v;
        };
        EXPECT_LT(max_rel_error(analytic, numeric_gradient(loss_p, p.param->value)), 1e-6)
            << p.name;
    }
}

TEST(ResBlock, SkipPlusBranchStructure) {
    Rng rng(2);
    eaconv::ResBlock block(4, 4, rng);
    Tensor x({2, 4, 6, 6});
    fill_pattern(x, 21);
    // zero branch weights: output must equal the input exactly
    for (auto& p : block.params()) {
        if (p.name == "conv2.weight") p.param->value = Tensor(p.param->value.shape());
    }
    Tensor out = block.forward_eval(x);
    // bn2(0·x) = bn2 affine bias = 0 at init, so branch contributes nothing
    EXPECT_LT(eaconv::max_abs_diff(out, x), 1e-12);
}

TEST(ResBlock, ProjectionHandlesChannelChange) {
    Rng rng(3);
    eaconv::ResBlock block(2, 5, rng);
    Tensor x({1, 2, 4, 4});
    fill_pattern(x, 31);
    Tensor out = block.forward_eval(x);
    EXPECT_EQ(out.dim(1), 5);
    EXPECT_EQ(out.dim(2), 4);
}

TEST(ResBlock, GradcheckThroughBlock) {
    Rng rng(4);
    eaconv::ResBlock block(3, 3, rng);
    Tensor x({3, 3, 4, 4});
    fill_pattern(x, 41);
    Tensor out = block.forward_train(x, false);
    Tensor grad_out(out.shape());
    fill_pattern(grad_out, 42);
    block.zero_grad();
    Tensor gi = block.backward(grad_out);
    auto loss_x = [&](const Tensor& t) { return layer_loss(block, t, grad_out); };
    EXPECT_LT(max_rel_error(gi, numeric_gradient(loss_x, x)), 1e-5);
    for (auto& p : block.params()) {
        Tensor analytic = p.param->gradient;
        auto loss_p = [&](const Tensor& t) {
            Tensor saved = p.param->value;
            p.param->value = t;
            const double v = layer_loss(block, x, grad_out);
            p.param->value = saved;
            return v;
        };
        EXPECT_LT(max_rel_error(analytic, numeric_gradient(loss_p, p.param->value)), 1e-5)
            << p.name;
    }
}

// ---------------------------------------------------------------------------
// EAConvLayer
// ---------------------------------------------------------------------------

TEST(EAConvLayer, InitializationIdentity) {
    auto bank = make_bank();
    Rng rng(5);
    EAConvLayer layer(bank, 3, 4, 1, 1, rng);
    // reference: plain convolution with the synthesized identity-path kernel
    Tensor kernels = eaconv::synthesize_kernels(*bank, layer.w().value);
    Tensor k0({4, 3, 3, 3});
    for (int64_t i = 0; i < k0.numel(); ++i) k0[i] = kernels[i];
    Rng data_rng(55);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x({2, 3, 8, 8});
        for (int64_t i = 0; i < x.numel(); ++i) x[i] = data_rng.normal();
        Tensor expected = eaconv::conv2d(x, k0, 1, 1);
        eaconv::detail::add_channel_bias(expected, layer.bias().value);
        EXPECT_LT(eaconv::max_abs_diff(layer.forward_eval(x), expected), 1e-12);
        EXPECT_LT(eaconv::max_abs_diff(layer.forward_train(x, false), expected), 1e-12);
    }
}

TEST(EAConvLayer, ZeroInputGivesBiasBroadcast) {
    auto bank = make_bank();
    Rng rng(6);
    EAConvLayer layer(bank, 2, 3, 1, 1, rng);
    layer.bias().value = Tensor({3}, {0.5, -1.0, 2.0});
    Tensor out = layer.forward_eval(Tensor({1, 2, 4, 4}));
    for (int64_t o = 0; o < 3; ++o)
        for (int64_t j = 0; j < 16; ++j) EXPECT_EQ(out[o * 16 + j], layer.bias().value[o]);
}

TEST(EAConvLayer, SinglePathBankIsPlainBasisConv) {
    eaconv::BasisConfig cfg;
    cfg.kernel_size = 3;
    cfg.sigma = 1.0;
    cfg.num_basis = 9;
    cfg.transforms = {{0.0, 0.0}};
    auto bank = std::make_shared<const BasisBank>(eaconv::build_basis_bank(cfg));
    Rng rng(7);
    EAConvLayer layer(bank, 2, 2, 1, 1, rng);
    Tensor x({1, 2, 5, 5});
    fill_pattern(x, 71);
    Tensor kernels = eaconv::synthesize_kernels(*bank, layer.w().value);
    Tensor k0({2, 2, 3, 3});
    for (int64_t i = 0; i < k0.numel(); ++i) k0[i] = kernels[i];
    Tensor expected = eaconv::conv2d(x, k0, 1, 1);
    eaconv::detail::add_channel_bias(expected, layer.bias().value);
    EXPECT_LT(eaconv::max_abs_diff(layer.forward_eval(x), expected), 1e-14);
}

TEST(EAConvLayer, BetaZeroPathsGetNoGradient) {
    auto bank = make_bank();
    Rng rng(8);
    EAConvLayer layer(bank, 2, 2, 1, 1, rng);  // beta = [1,0,0,0,0]
    Tensor x({2, 2, 6, 6});
    fill_pattern(x, 81);
    Tensor out = layer.forward_train(x, false);
    Tensor grad_out(out.shape());
    fill_pattern(grad_out, 82);
    layer.zero_grad();
    layer.backward(grad_out);
    for (int64_t p = 1; p < 5; ++p) EXPECT_EQ(layer.beta().gradient[p], 0.0);
    EXPECT_NE(layer.beta().gradient[0], 0.0);
}

TEST(EAConvLayer, GradcheckAllParamsTieFree) {
    auto bank = make_bank();
    Rng rng(9);
    EAConvLayer layer(bank, 2, 3, 1, 1, rng);
    // all paths active with distinct magnitudes so the max is tie-free a.e.
    layer.beta().value = Tensor({5}, {1.0, 0.7, -0.4, 0.3, 0.55});
    Tensor x({2, 2, 5, 5});
    fill_pattern(x, 91);
    Tensor out = layer.forward_train(x, false);
    Tensor grad_out(out.shape());
    fill_pattern(grad_out, 92);
    layer.zero_grad();
    Tensor gi = layer.backward(grad_out);

    auto loss_x = [&](const Tensor& t) { return layer_loss(layer, t, grad_out); };
    EXPECT_LT(max_rel_error(gi, numeric_gradient(loss_x, x)), 1e-4);
    for (auto& p : layer.params()) {
        Tensor analytic = p.param->gradient;
        auto loss_p = [&](const Tensor& t) {
            Tensor saved = p.param->value;
            p.param->value = t;
            const double v = layer_loss(layer, x, grad_out);
            p.param->value = saved;
            return v;
        };
        EXPECT_LT(max_rel_error(analytic, numeric_gradient(loss_p, p.param->value)), 1e-4)
            << p.name;
    }
}

TEST(EAConvLayer, StridedOutputShape) {
    auto bank = make_bank();
    Rng rng(10);
    EAConvLayer layer(bank, 3, 4, 2, 1, rng);
    Tensor x({1, 3, 9, 9});
    Tensor out = layer.forward_eval(x);
    EXPECT_EQ(out.dim(2), 5);
    EXPECT_EQ(out.dim(3), 5);
}

// ---------------------------------------------------------------------------
// EAResBlock
// ---------------------------------------------------------------------------

TEST(EAResBlock, InitializationIdentityAgainstStandardBlock) {
    auto bank = make_bank();
    Rng rng(11);
    EAResBlock ea(bank, 3, 3, rng);
    // standard counterpart: a ResBlock carrying the identity-path kernels
    Rng rng2(12);
    eaconv::ResBlock std_block(3, 3, rng2);
    Tensor k1 = eaconv::synthesize_kernels(*bank, ea.w1().value);
    Tensor k2 = eaconv::synthesize_kernels(*bank, ea.w2().value);
    for (int64_t i = 0; i < std_block.conv1().weight().value.numel(); ++i) {
        std_block.conv1().weight().value[i] = k1[i];
        std_block.conv2().weight().value[i] = k2[i];
    }
    std_block.conv1().bias().value = ea.bias1().value;
    std_block.conv2().bias().value = ea.bias2().value;

    Rng data_rng(13);
    Tensor x({2, 3, 6, 6});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = data_rng.normal();
    EXPECT_LT(eaconv::max_abs_diff(ea.forward_eval(x), std_block.forward_eval(x)), 1e-12);
    EXPECT_LT(eaconv::max_abs_diff(ea.forward_train(x, false),
                                   std_block.forward_train(x, false)),
              1e-12);
}

TEST(EAResBlock, ZeroBranchIsIdentitySkip) {
    auto bank = make_bank();
    Rng rng(14);
    EAResBlock block(bank, 3, 3, rng);
    block.w2().value = Tensor(block.w2().value.shape());  // G ≡ 0 via zero second conv
    Tensor x({1, 3, 5, 5});
    fill_pattern(x, 141);
    EXPECT_LT(eaconv::max_abs_diff(block.forward_eval(x), x), 1e-12);
}

TEST(EAResBlock, GradcheckAllParamsTieFree) {
    auto bank = make_bank();
    Rng rng(15);
    EAResBlock block(bank, 2, 2, rng);
    block.beta().value = Tensor({5}, {1.0, 0.8, -0.3, 0.45, 0.6});
    Tensor x({3, 2, 4, 4});
    fill_pattern(x, 151);
    Tensor out = block.forward_train(x, false);
    Tensor grad_out(out.shape());
    fill_pattern(grad_out, 152);
    block.zero_grad();
    Tensor gi = block.backward(grad_out);

    auto loss_x = [&](const Tensor& t) { return layer_loss(block, t, grad_out); };
    EXPECT_LT(max_rel_error(gi, numeric_gradient(loss_x, x)), 1e-4);
    for (auto& p : block.params()) {
        Tensor analytic = p.param->gradient;
        auto loss_p = [&](const Tensor& t) {
            Tensor saved = p.param->value;
            p.param->value = t;
            const double v = layer_loss(block, x, grad_out);
            p.param->value = saved;
            return v;
        };
        EXPECT_LT(max_rel_error(analytic, numeric_gradient(loss_p, p.param->value)), 1e-4)
            << p.name;
    }
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

namespace {

eaconv::ModelConfig small_config() {
    eaconv::ModelConfig cfg;
    cfg.input_channels = 3;
    cfg.input_size = 16;
    cfg.num_classes = 4;
    cfg.seed = 99;
    cfg.basis = eaconv::make_basis_config(3, 1.0, 0.5);
    cfg.layers = {
        {.type = "conv", .out_channels = 4, .kernel_size = 3, .stride = 1, .augment = true},
        {.type = "batchnorm"},
        {.type = "relu"},
        {.type = "maxpool", .stride = 2, .window = 2},
        {.type = "resblock", .out_channels = 6, .augment = true},
        {.type = "gap"},
        {.type = "linear", .out_features = 4},
    };
    return cfg;
}

}  // namespace

TEST(Model, BuildsAndForwardsBothModes) {
    auto cfg = small_config();
    eaconv::Model std_model = eaconv::build_model(cfg, false);
    eaconv::Model ea_model = eaconv::build_model(cfg, true);
    EXPECT_EQ(std_model.layers[0]->kind(), "conv");
    EXPECT_EQ(ea_model.layers[0]->kind(), "eaconv");
    EXPECT_EQ(std_model.layers[4]->kind(), "resblock");
    EXPECT_EQ(ea_model.layers[4]->kind(), "earesblock");
    Tensor x({2, 3, 16, 16});
    fill_pattern(x, 161);
    Tensor std_logits = std_model.forward_eval(x);
    Tensor ea_logits = ea_model.forward_eval(x);
    EXPECT_EQ(std_logits.dim(1), 4);
    EXPECT_EQ(ea_logits.dim(1), 4);
}

TEST(Model, ParamCountIsStandardPlusPathCoefficients) {
    auto cfg = small_config();
    eaconv::Model std_model = eaconv::build_model(cfg, false);
    eaconv::Model ea_model = eaconv::build_model(cfg, true);
    // two augmented positions, 5 paths each
    EXPECT_EQ(ea_model.param_count(), std_model.param_count() + 2 * 5);
}

TEST(Model, RejectsBrokenChains) {
    auto cfg = small_config();
    cfg.layers.clear();
    EXPECT_THROW(eaconv::build_model(cfg, false), std::invalid_argument);

    auto cfg2 = small_config();
    cfg2.layers.push_back({.type = "conv", .out_channels = 4});  // conv after rank-2 output
    try {
        eaconv::build_model(cfg2, false);
        FAIL() << "expected invalid_argument";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("shape chain"), std::string::npos);
    }

    auto cfg3 = small_config();
    cfg3.layers[0].type = "warp_drive";
    try {
        eaconv::build_model(cfg3, false);
        FAIL() << "expected invalid_argument";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
    }
}

TEST(Model, ConfigJsonRoundTrip) {
    auto cfg = small_config();
    auto j = eaconv::model_config_to_json(cfg);
    auto back = eaconv::model_config_from_json(j);
    EXPECT_EQ(back.layers.size(), cfg.layers.size());
    EXPECT_EQ(back.input_size, cfg.input_size);
    EXPECT_EQ(back.basis.kernel_size, cfg.basis.kernel_size);
    EXPECT_EQ(back.basis.transforms.size(), cfg.basis.transforms.size());
    EXPECT_EQ(back.layers[0].augment, true);
    EXPECT_EQ(back.layers[3].stride, 2);
    // building from the round-tripped config gives bit-identical parameters
    eaconv::Model a = eaconv::build_model(cfg, true);
    eaconv::Model b = eaconv::build_model(back, true);
    auto pa = a.named_params();
    auto pb = b.named_params();
    ASSERT_EQ(pa.size(), pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(eaconv::max_abs_diff(pa[i].param->value, pb[i].param->value), 0.0);
    }
}

// ---------------------------------------------------------------------------
// Weight transfer
// ---------------------------------------------------------------------------

TEST(Transfer, ForwardMatchesSourceModel) {
    auto cfg = small_config();
    eaconv::Model std_model = eaconv::build_model(cfg, false);
    eaconv::Model ea_model = eaconv::build_model(cfg, true);
    eaconv::transfer_weights(std_model, ea_model);
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x({2, 3, 16, 16});
        for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform();
        EXPECT_LT(eaconv::max_abs_diff(std_model.forward_eval(x), ea_model.forward_eval(x)),
                  1e-8);
    }
}

TEST(Transfer, KernelInSpanRecoversExactCoefficients) {
    auto bank = make_bank();
    auto cfg = small_config();
    cfg.layers = {{.type = "conv", .out_channels = 2, .kernel_size = 3, .augment = true},
                  {.type = "gap"},
                  {.type = "linear", .out_features = 4}};
    eaconv::Model std_model = eaconv::build_model(cfg, false);
    eaconv::Model ea_model = eaconv::build_model(cfg, true);
    // plant a kernel that is exactly a basis combination
    Tensor w_true({2, 3, 9});
    fill_pattern(w_true, 171);
    Tensor kernels = eaconv::synthesize_kernels(*ea_model.bank, w_true);
    auto& conv = static_cast<eaconv::Conv2dLayer&>(*std_model.layers[0]);
    for (int64_t i = 0; i < conv.weight().value.numel(); ++i) conv.weight().value[i] = kernels[i];
    eaconv::transfer_weights(std_model, ea_model);
    auto& eac = static_cast<EAConvLayer&>(*ea_model.layers[0]);
    EXPECT_LT(eaconv::max_abs_diff(eac.w().value, w_true), 1e-10);
}

TEST(Transfer, ZeroKernelGivesZeroCoefficients) {
    auto cfg = small_config();
    cfg.layers = {{.type = "conv", .out_channels = 2, .kernel_size = 3, .augment = true},
                  {.type = "gap"},
                  {.type = "linear", .out_features = 4}};
    eaconv::Model std_model = eaconv::build_model(cfg, false);
    eaconv::Model ea_model = eaconv::build_model(cfg, true);
    auto& conv = static_cast<eaconv::Conv2dLayer&>(*std_model.layers[0]);
    conv.weight().value = Tensor(conv.weight().value.shape());
    eaconv::transfer_weights(std_model, ea_model);
    auto& eac = static_cast<EAConvLayer&>(*ea_model.layers[0]);
    EXPECT_LT(eaconv::max_abs_diff(eac.w().value, Tensor(eac.w().value.shape())), 1e-12);
}

TEST(Transfer, ResetsTrainedBeta) {
    auto cfg = small_config();
    eaconv::Model std_model = eaconv::build_model(cfg, false);
    eaconv::Model ea_model = eaconv::build_model(cfg, true);
    auto& eac = static_cast<EAConvLayer&>(*ea_model.layers[0]);
    eac.beta().value = Tensor({5}, {0.3, 0.4, 0.1, -0.2, 0.9});
    eaconv::transfer_weights(std_model, ea_model);
    EXPECT_EQ(eac.beta().value[0], 1.0);
    for (int64_t p = 1; p < 5; ++p) EXPECT_EQ(eac.beta().value[p], 0.0);
}

TEST(Transfer, RejectsMismatchedSkeletons) {
    auto cfg = small_config();
    eaconv::Model std_model = eaconv::build_model(cfg, false);
    auto cfg2 = small_config();
    cfg2.layers.pop_back();
    cfg2.layers.push_back({.type = "linear", .out_features = 4});
    cfg2.layers.push_back({.type = "relu"});
    EXPECT_THROW(
        {
            eaconv::Model other = eaconv::build_model(cfg2, true);
            eaconv::transfer_weights(std_model, other);
        },
        std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Commutation property: convolving a warped image approaches convolving with
// the correspondingly transformed kernel as the displacement amplitude
// shrinks (first-order identity, so the discrepancy halves with alpha).
// ---------------------------------------------------------------------------

namespace {

/// Smooth test image: a few Gaussian blobs on a 64×64 canvas.
Tensor gaussian_blob_image(int64_t size) {
    Tensor img({1, size, size});
    const double blobs[3][3] = {{20.0, 24.0, 6.0}, {40.0, 30.0, 8.0}, {30.0, 44.0, 5.0}};
    for (int64_t y = 0; y < size; ++y) {
        for (int64_t x = 0; x < size; ++x) {
            double v = 0.0;
            for (const auto& b : blobs) {
                const double dx = x - b[0], dy = y - b[1];
                v += std::exp(-(dx * dx + dy * dy) / (2.0 * b[2] * b[2]));
            }
            img[y * size + x] = v;
        }
    }
    return img;
}

/// Interior-cropped max abs discrepancy between conv(warp_-alpha(f), k0) and
/// conv(f, k_alpha), where k_alpha is the basis kernel built at (alpha,theta).
double commutation_error(double alpha, double theta) {
    const int64_t size = 64, margin = 16;
    Tensor img = gaussian_blob_image(size);

    // kernel pair: identity-path vs (alpha,theta)-path of the same bank
    eaconv::BasisConfig cfg;
    cfg.kernel_size = 5;
    cfg.sigma = 1.0;
    cfg.num_basis = 25;
    cfg.transforms = {{0.0, 0.0}, {alpha, theta}};
    eaconv::BasisBank bank = eaconv::build_basis_bank(cfg);
    Tensor w({1, 1, 25});
    fill_pattern(w, 7);
    Tensor kernels = eaconv::synthesize_kernels(bank, w);
    Tensor k0({1, 1, 5, 5}), kt({1, 1, 5, 5});
    for (int64_t i = 0; i < 25; ++i) {
        k0[i] = kernels[i];
        kt[i] = kernels[25 + i];
    }

    // image warped by the inverse displacement field of (alpha, theta),
    // evaluated on image coordinates centered at the canvas midpoint
    eaconv::ElasticField field{Tensor({size, size}), Tensor({size, size})};
    const double c = std::cos(theta), s = std::sin(theta);
    const double mid = (size - 1) / 2.0;
    for (int64_t y = 0; y < size; ++y) {
        for (int64_t x = 0; x < size; ++x) {
            const double xr = x - mid, yr = y - mid;
            field.dx.at2(y, x) = -alpha * (xr * c + yr * s);
            field.dy.at2(y, x) = -alpha * (-xr * s + yr * c);
        }
    }
    Tensor warped = eaconv::warp(img, field);

    Tensor lhs = eaconv::conv2d(Tensor({1, 1, size, size}, std::vector<double>(
                                                               warped.data(),
                                                               warped.data() + warped.numel())),
                                k0, 1, 2);
    Tensor rhs = eaconv::conv2d(
        Tensor({1, 1, size, size},
               std::vector<double>(img.data(), img.data() + img.numel())),
        kt, 1, 2);
    double err = 0.0;
    for (int64_t y = margin; y < size - margin; ++y) {
        for (int64_t x = margin; x < size - margin; ++x) {
            err = std::max(err, std::abs(lhs.at4(0, 0, y, x) - rhs.at4(0, 0, y, x)));
        }
    }
    return err;
}

}  // namespace

TEST(Commutation, DiscrepancyShrinksWithAlpha) {
    for (double theta : {0.0, std::numbers::pi / 4.0, std::numbers::pi / 2.0}) {
        double prev = commutation_error(0.4, theta);
        for (double alpha : {0.2, 0.1, 0.05}) {
            const double cur = commutation_error(alpha, theta);
            EXPECT_LT(cur, prev) << "alpha=" << alpha << " theta=" << theta;
            prev = cur;
        }
    }
}
