#include "toon/denoiser.hpp"
#include "toon/errors.hpp"

#include <gtest/gtest.h>

using namespace toon;

namespace {

DenoiserConfig small_config() {
    DenoiserConfig c;
    c.frame_count = 4;
    c.base_width = 16;
    c.context_dim = 16;
    c.fps_embed_dim = 16;
    c.heads = 2;
    return c;
}

ConditionBundle condition_for(InterpDenoiser& model, const torch::Tensor& z, std::int64_t seed) {
    torch::manual_seed(seed);
    const auto b = z.size(0), L = z.size(1);
    auto x1 = torch::rand({b, 3, 16, 16}) * 2 - 1, xL = torch::rand({b, 3, 16, 16}) * 2 - 1;
    auto caption = torch::randint(1, 60, {b, 6}, torch::kInt64);
    auto fps = torch::full({b}, 8, torch::kInt64);
    return build_condition_from_latents(z.select(1, 0), z.select(1, L - 1), L, model->icp(x1, xL), caption, fps);
}

}  // namespace

TEST(freeze_policy, matrix_matches_variant_table) {
    struct Row {
        FreezeVariant v;
        bool icp, spatial, temporal, bypass;
    };
    const Row rows[] = {{FreezeVariant::I, false, false, false, false},
                        {FreezeVariant::II, true, true, true, false},
                        {FreezeVariant::III, true, true, false, true},
                        {FreezeVariant::IV, true, true, false, false},
                        {FreezeVariant::V, true, false, false, false}};
    for (const auto& r : rows) {
        auto p = FreezePolicy::make(r.v);
        EXPECT_EQ(p.trainable(ParamGroup::ICP), r.icp) << p.name();
        EXPECT_EQ(p.trainable(ParamGroup::Spatial), r.spatial) << p.name();
        EXPECT_EQ(p.trainable(ParamGroup::Temporal), r.temporal) << p.name();
        EXPECT_EQ(p.bypass_temporal, r.bypass) << p.name();
        EXPECT_EQ(FreezePolicy::parse(p.name()).variant, r.v);
    }
    EXPECT_THROW(FreezePolicy::parse("VI"), ConfigError);
    EXPECT_FALSE(inference_policy().bypass_temporal);
}

TEST(denoiser, parameters_partition_into_three_groups) {
    InterpDenoiser model(small_config());
    auto groups = parameter_groups(model);
    std::size_t total = 0;
    for (auto g : kParamGroups) {
        ASSERT_FALSE(groups.at(g).empty()) << group_name(g);
        for (const auto& [name, p] : groups.at(g)) EXPECT_EQ(name.rfind(group_name(g) + ".", 0), 0u) << name;
        total += groups.at(g).size();
    }
    EXPECT_EQ(total, model->parameters().size());
}

TEST(denoiser, output_shape_and_contract_checks) {
    torch::manual_seed(0);
    InterpDenoiser model(small_config());
    auto z = torch::randn({2, 4, 4, 4, 4});
    auto cond = condition_for(model, z, 1);
    auto t = torch::tensor({10, 500}, torch::kInt64);
    auto out = model->forward(z, t, cond);
    EXPECT_EQ(out.sizes(), z.sizes());
    EXPECT_THROW(model->forward(torch::randn({2, 4, 3, 4, 4}), t, cond), ContractError);
    EXPECT_THROW(model->forward(torch::randn({2, 5, 4, 4, 4}), t, cond), ContractError);
    EXPECT_THROW(model->forward(torch::randn({2, 4, 4, 3, 3}), t, condition_for(model, torch::randn({2, 4, 4, 3, 3}), 1)),
                 ContractError);
    Injections wrong(1, torch::zeros({8, 16, 4, 4}));
    EXPECT_THROW(model->forward(z, t, cond, inference_policy(), &wrong), ContractError);
}

TEST(denoiser, fresh_temporal_blocks_are_identity) {
    torch::manual_seed(0);
    InterpDenoiser model(small_config());
    auto z = torch::randn({1, 4, 4, 4, 4});
    auto cond = condition_for(model, z, 2);
    auto t = torch::tensor({100}, torch::kInt64);
    torch::NoGradGuard no_grad;
    auto with = model->forward(z, t, cond, FreezePolicy::make(FreezeVariant::IV));
    auto bypass = model->forward(z, t, cond, FreezePolicy::make(FreezeVariant::III));
    EXPECT_TRUE(torch::equal(with, bypass));

    // once trained (non-zero output projection) the temporal path mixes frames
    for (auto& p : model->temporal->parameters()) p.add_(0.1);
    EXPECT_FALSE(torch::equal(model->forward(z, t, cond, inference_policy()), bypass));
}

TEST(denoiser, frames_interact_only_through_temporal_layers) {
    torch::manual_seed(0);
    InterpDenoiser model(small_config());
    auto z = torch::randn({1, 4, 4, 4, 4});
    auto cond = condition_for(model, z, 3);
    auto t = torch::tensor({100}, torch::kInt64);
    torch::NoGradGuard no_grad;
    for (auto& p : model->temporal->parameters()) p.add_(0.05);
    auto z2 = z.clone();
    z2.select(1, 1).add_(1.0);
    auto bypass = FreezePolicy::make(FreezeVariant::III);
    auto a = model->forward(z, t, cond, bypass), b = model->forward(z2, t, cond, bypass);
    EXPECT_TRUE(torch::equal(a.select(1, 2), b.select(1, 2)));
    auto c = model->forward(z, t, cond), d = model->forward(z2, t, cond);
    EXPECT_FALSE(torch::equal(c.select(1, 2), d.select(1, 2)));
}

TEST(denoiser, text_dropout_and_fps_change_prediction) {
    torch::manual_seed(0);
    InterpDenoiser model(small_config());
    auto z = torch::randn({1, 4, 4, 4, 4});
    auto cond = condition_for(model, z, 4);
    auto t = torch::tensor({100}, torch::kInt64);
    torch::NoGradGuard no_grad;
    auto base = model->forward(z, t, cond);
    EXPECT_FALSE(torch::equal(base, model->forward(z, t, cond.null())));
    auto other = cond;
    other.fps = torch::full({1}, 4, torch::kInt64);
    EXPECT_FALSE(torch::equal(base, model->forward(z, t, other)));
}

TEST(condition, endpoint_slots_and_presence_mask) {
    auto z1 = torch::full({1, 4, 2, 2}, 3.0), zL = torch::full({1, 4, 2, 2}, -2.0);
    auto cond = build_condition_from_latents(z1, zL, 5, torch::zeros({1, 4, 16}), torch::zeros({1, 3}),
                                             torch::full({1}, 8));
    ASSERT_EQ(cond.c_img.sizes(), (std::vector<std::int64_t>{1, 5, 5, 2, 2}));
    EXPECT_TRUE(torch::equal(cond.c_img[0][0].slice(0, 0, 4), z1[0]));
    EXPECT_TRUE(torch::equal(cond.c_img[0][4].slice(0, 0, 4), zL[0]));
    EXPECT_EQ(cond.c_img[0].slice(0, 1, 4).abs().sum().item<double>(), 0.0);
    auto mask = cond.c_img.select(2, 4);
    EXPECT_EQ(mask[0][0].min().item<double>(), 1.0);
    EXPECT_EQ(mask[0][4].min().item<double>(), 1.0);
    EXPECT_EQ(mask[0].slice(0, 1, 4).max().item<double>(), 0.0);
    EXPECT_EQ(cond.c_txt.scalar_type(), torch::kInt64);
    EXPECT_THROW(build_condition_from_latents(z1, zL, 1, torch::zeros({1, 4, 16}), torch::zeros({1, 3}), torch::full({1}, 8)),
                 ParameterError);
    EXPECT_THROW(build_condition_from_latents(z1, zL, 4, torch::zeros({1, 4, 16}), torch::zeros({1, 3}), torch::zeros({1})),
                 ParameterError);
}

TEST(condition, build_condition_encodes_endpoints) {
    torch::manual_seed(0);
    InterpDenoiser model(small_config());
    auto x1 = torch::rand({1, 3, 16, 16}), xL = torch::rand({1, 3, 16, 16});
    LatentEncoder enc = [](const torch::Tensor& x) { return x.narrow(1, 0, 1).repeat({1, 4, 1, 1}).slice(2, 0, 4).slice(3, 0, 4); };
    auto cond = build_condition(x1, xL, 3, enc, model->icp, torch::zeros({1, 2}), torch::full({1}, 8));
    EXPECT_TRUE(torch::equal(cond.c_img[0][0].slice(0, 0, 4), enc(x1)[0]));
    EXPECT_EQ(cond.c_ctx.sizes(), (std::vector<std::int64_t>{1, 4, 16}));
}

TEST(freeze, apply_policy_sets_requires_grad_and_hashes_track_groups) {
    InterpDenoiser model(small_config());
    apply_freeze_policy(model, FreezePolicy::make(FreezeVariant::V));
    for (const auto& [g, params] : parameter_groups(model))
        for (const auto& [name, p] : params) EXPECT_EQ(p.requires_grad(), g == ParamGroup::ICP) << name;
    const auto before = group_hash(model, ParamGroup::Spatial);
    const auto temporal = group_hash(model, ParamGroup::Temporal);
    {
        torch::NoGradGuard no_grad;
        model->spatial->conv_in->bias.add_(1.0);
    }
    EXPECT_NE(group_hash(model, ParamGroup::Spatial), before);
    EXPECT_EQ(group_hash(model, ParamGroup::Temporal), temporal);
}
