#include "toon/autoencoder.hpp"
#include "toon/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace toon;

namespace {

void randomize(nn::Module& m, double scale) {
    torch::NoGradGuard no_grad;
    for (auto& p : m.parameters()) p.copy_(torch::randn_like(p) * scale);
}

}  // namespace

TEST(autoencoder, fresh_dual_reference_decoder_equals_vanilla) {
    torch::manual_seed(0);
    AutoencoderConfig cfg;
    Autoencoder full(cfg, DecoderVariant::full());
    Autoencoder vanilla(cfg, DecoderVariant::vanilla());
    TensorArchive a;
    full->save_to(a);
    vanilla->load_from(a);
    torch::NoGradGuard no_grad;
    for (int k = 0; k < 4; ++k) {
        auto frames = torch::rand({1, 5, 3, 16, 16}) * 2 - 1;
        auto enc = full->encode_clip(frames);
        auto lat = torch::randn({1, 5, 4, 4, 4});
        auto y_full = full->decoder->forward(lat, enc.first, enc.last);
        auto y_van = vanilla->decoder->forward(lat, enc.first, enc.last);
        EXPECT_LE((y_full - y_van).abs().max().item<double>(), 1e-6);
    }
}

TEST(autoencoder, variants_and_checkpoint_sections) {
    EXPECT_EQ(DecoderVariant::full().label(), "full");
    EXPECT_EQ(DecoderVariant::without_p3d().label(), "wo_p3d");
    EXPECT_EQ(DecoderVariant::vanilla().label(), "wo_har_p3d");
    torch::manual_seed(1);
    Autoencoder a(AutoencoderConfig{}, DecoderVariant::full());
    randomize(*a, 0.05);
    TensorArchive ar;
    a->save_to(ar);
    EXPECT_TRUE(ar.has_section("encoder/"));
    EXPECT_TRUE(ar.has_section("decoder_har/"));
    EXPECT_TRUE(ar.has_section("decoder_p3d/"));
    Autoencoder b(AutoencoderConfig{}, DecoderVariant::full());
    b->load_from(ar);
    torch::NoGradGuard no_grad;
    auto frames = torch::rand({1, 3, 3, 16, 16});
    EXPECT_TRUE(torch::equal(a->reconstruct(frames), b->reconstruct(frames)));
}

TEST(residual_inject, only_endpoint_frames_are_accepted) {
    ZeroResidualInjector inj(8, 4);
    auto g = torch::randn({1, 4, 6, 6}), f = torch::randn({1, 8, 6, 6});
    EXPECT_TRUE(torch::equal(residual_inject(g, f, inj, 0, 5), g));
    EXPECT_TRUE(torch::equal(residual_inject(g, f, inj, 4, 5), g));
    for (std::int64_t i : {1, 2, 3}) EXPECT_THROW(residual_inject(g, f, inj, i, 5), ContractError);
    EXPECT_THROW(residual_inject(g, torch::randn({1, 8, 3, 3}), inj, 0, 5), ContractError);
}

TEST(p3d, reflect_index_and_convolution_oracle) {
    EXPECT_EQ(reflect_index(-1, 5), 1);
    EXPECT_EQ(reflect_index(5, 5), 3);
    EXPECT_EQ(reflect_index(2, 5), 2);
    EXPECT_EQ(reflect_index(-2, 1), 0);

    torch::manual_seed(2);
    P3DConv conv(3, 3);
    auto x = torch::randn({1, 4, 3, 2, 2});
    EXPECT_TRUE(torch::equal(conv->forward(x), x));
    {
        torch::NoGradGuard no_grad;
        conv->weight.copy_(torch::randn_like(conv->weight));
    }
    auto y = conv->forward(x);
    const std::int64_t L = 4;
    for (std::int64_t t = 0; t < L; ++t) {
        auto expected = torch::zeros({3, 2, 2});
        for (std::int64_t k = 0; k < 3; ++k) {
            auto src = x[0][reflect_index(t + k - 1, L)];
            expected += torch::einsum("oc,chw->ohw", {conv->weight[k], src});
        }
        EXPECT_TRUE(torch::allclose(y[0][t], expected, 1e-5, 1e-6)) << "frame " << t;
    }
    auto single = torch::randn({1, 1, 3, 2, 2});
    EXPECT_TRUE(torch::equal(conv->forward(single), single));
    EXPECT_THROW(P3DConv(3, 2), ParameterError);
    EXPECT_THROW(conv->forward(torch::randn({1, 4, 2, 2, 2})), ContractError);
}

TEST(har, attention_matches_reference_computation) {
    torch::manual_seed(3);
    const std::int64_t C = 4, Ce = 3, D = 5, h = 2, w = 2, L = 3;
    HARAttention attn(C, Ce, D, 1);
    auto g = torch::randn({1, L, C, h, w});
    auto f1 = torch::randn({1, Ce, h, w}), fL = torch::randn({1, Ce, h, w});
    EXPECT_TRUE(torch::equal(attn->forward(g, f1, fL), g));
    randomize(*attn, 0.5);
    auto out = attn->forward(g, f1, fL);

    auto refs = torch::cat({f1[0].flatten(1).t(), fL[0].flatten(1).t()}, 0);  // [2hw, Ce]
    auto K = attn->w_k(refs), V = attn->w_v(refs);
    for (std::int64_t l = 0; l < L; ++l)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                auto q = attn->w_q(g[0][l].select(1, y).select(1, x));
                auto a = torch::softmax(torch::matmul(K, q) / std::sqrt(static_cast<double>(D)), 0);
                auto expected = g[0][l].select(1, y).select(1, x) + attn->out_proj(torch::matmul(a, V));
                EXPECT_TRUE(torch::allclose(out[0][l].select(1, y).select(1, x), expected, 1e-5, 1e-6));
            }
    EXPECT_THROW(attn->forward(g, f1, torch::randn({1, Ce, h, w + 1})), ContractError);
    EXPECT_THROW(attn->forward(g, torch::randn({1, 2, h, w}), torch::randn({1, 2, h, w})), ContractError);
}

TEST(decoder, rejects_mismatched_reference_pyramid) {
    torch::manual_seed(4);
    Autoencoder ae(AutoencoderConfig{}, DecoderVariant::full());
    torch::NoGradGuard no_grad;
    auto enc = ae->encode_clip(torch::rand({1, 2, 3, 32, 32}));
    EXPECT_THROW(ae->decoder->forward(torch::randn({1, 2, 4, 4, 4}), enc.first, enc.last), ParameterError);
    EXPECT_THROW(ae->decoder->forward(torch::randn({1, 2, 3, 8, 8}), enc.first, enc.last), ContractError);
}

TEST(decoder, deep_injection_touches_only_endpoint_frames) {
    torch::manual_seed(5);
    AutoencoderConfig cfg;
    cfg.shallow_layers = {};
    cfg.deep_layers = {1, 2, 3, 4, 5};
    Autoencoder ae(cfg, DecoderVariant::without_p3d());
    torch::NoGradGuard no_grad;
    auto frames = torch::rand({1, 4, 3, 16, 16});
    auto enc = ae->encode_clip(frames);
    auto before = ae->decoder->forward(enc.latents, enc.first, enc.last);
    randomize(*ae->decoder->har, 0.2);
    auto after = ae->decoder->forward(enc.latents, enc.first, enc.last);
    EXPECT_FALSE(torch::equal(before[0][0], after[0][0]));
    EXPECT_FALSE(torch::equal(before[0][3], after[0][3]));
    EXPECT_TRUE(torch::equal(before[0][1], after[0][1]));
    EXPECT_TRUE(torch::equal(before[0][2], after[0][2]));
}

TEST(compound_loss, components_and_adversarial_gate) {
    torch::manual_seed(6);
    RandomFeaturePerceptual perceptual;
    PatchDiscriminator disc;
    auto last = torch::randn({3, 4, 3, 3}, torch::requires_grad());
    auto x = torch::rand({2, 3, 16, 16}) * 2 - 1;
    auto x_hat = (x + 0.1 * torch::randn_like(x)).detach();
    auto off = compound_loss(x, x_hat, perceptual, disc, last, false);
    EXPECT_NEAR(off.l1, (x - x_hat).abs().mean().item<double>(), 1e-6);
    EXPECT_NEAR(off.total.item<double>(), off.l1 + kPerceptualWeight * off.perceptual, 1e-5);
    EXPECT_EQ(off.lambda_d, 0.0);
    EXPECT_EQ(perceptual.distance(x, x).item<double>(), 0.0);
    EXPECT_GT(off.perceptual, 0.0);

    // x_hat depends on `last` so both gradients exist
    auto conv = torch::conv2d(torch::rand({2, 4, 18, 18}), last);
    auto y = torch::tanh(conv);
    auto on = compound_loss(x, y, perceptual, disc, last, true);
    EXPECT_GE(on.lambda_d, 0.0);
    EXPECT_LE(on.lambda_d, 1e4);
    EXPECT_NEAR(on.total.item<double>(), on.l1 + kPerceptualWeight * on.perceptual + on.lambda_d * on.adversarial,
                1e-4 * (1.0 + std::abs(on.total.item<double>())));
    EXPECT_THROW(compound_loss(x, x_hat.narrow(0, 0, 1), perceptual, disc, last, false), ContractError);
    EXPECT_GE(discriminator_hinge_loss(disc, x, x_hat).item<double>(), 0.0);
}
