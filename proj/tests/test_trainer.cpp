#include "toon/errors.hpp"
#include "toon/trainer.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <sstream>

using namespace toon;
using json = nlohmann::json;

namespace {

std::vector<ToonClip> tiny_clips(std::int64_t count = 6, std::int64_t frames = 8) {
    std::vector<ToonClip> out;
    const MotionKind kinds[] = {MotionKind::Linear, MotionKind::Arc, MotionKind::Occlusion, MotionKind::Morph};
    for (std::int64_t i = 0; i < count; ++i) {
        ClipSpec s;
        s.frames = frames;
        s.height = s.width = 16;
        s.motion = kinds[i % 4];
        out.push_back(generate_clip(s, static_cast<std::uint64_t>(100 + i)));
    }
    return out;
}

DenoiserConfig small_denoiser() {
    DenoiserConfig c;
    c.frame_count = 4;
    c.base_width = 16;
    c.context_dim = 16;
    c.fps_embed_dim = 16;
    c.heads = 2;
    return c;
}

StageConfig stage(Stage s, std::int64_t steps) {
    auto cfg = StageConfig::defaults(s);
    cfg.steps = steps;
    cfg.batch_size = 2;
    cfg.frames = s == Stage::Autoencoder ? 1 : 4;
    cfg.seed = 17;
    cfg.audit_every = 1;
    if (s != Stage::Autoencoder && s != Stage::Decoder) cfg.learning_rate = 1e-3;
    return cfg;
}

struct Models {
    InterpDenoiser denoiser{nullptr};
    Autoencoder ae{nullptr};
};

Models fresh_models(std::uint64_t seed = 0) {
    torch::manual_seed(seed);
    Models m;
    m.ae = Autoencoder(AutoencoderConfig{}, DecoderVariant::full());
    m.denoiser = InterpDenoiser(small_denoiser());
    return m;
}

std::string encoder_hash(Autoencoder& ae) {
    NamedParams named;
    for (const auto& p : ae->encoder->named_parameters()) named.emplace_back(p.key(), p.value());
    return tensors_hash(named);
}

std::map<ParamGroup, std::string> group_hashes(const InterpDenoiser& m) {
    std::map<ParamGroup, std::string> out;
    for (auto g : kParamGroups) out[g] = group_hash(m, g);
    return out;
}

class TrainerTest : public ::testing::Test {
protected:
    void SetUp() override { enable_determinism(); }
};

}  // namespace

TEST_F(TrainerTest, stage_names_defaults_and_config) {
    for (auto s : {Stage::Autoencoder, Stage::Base, Stage::Rectify, Stage::Decoder, Stage::Sketch})
        EXPECT_EQ(parse_stage(stage_name(s)), s);
    EXPECT_THROW(parse_stage("finetune"), ConfigError);
    EXPECT_DOUBLE_EQ(StageConfig::defaults(Stage::Rectify).learning_rate, 1e-5);
    EXPECT_DOUBLE_EQ(StageConfig::defaults(Stage::Decoder).learning_rate, 4.5e-6);
    EXPECT_DOUBLE_EQ(StageConfig::defaults(Stage::Sketch).learning_rate, 5e-5);
    EXPECT_EQ(StageConfig::defaults(Stage::Rectify).freeze, FreezeVariant::IV);
    auto kv = KeyValueConfig::parse("train.steps = 7\ntrain.freeze = V\ntrain.fps_set = 8\n");
    auto cfg = StageConfig::from_config(Stage::Rectify, kv);
    EXPECT_EQ(cfg.steps, 7);
    EXPECT_EQ(cfg.freeze, FreezeVariant::V);
    EXPECT_EQ(cfg.fps_set, (std::vector<std::int64_t>{8}));
    kv.set("train.lr", "-1");
    EXPECT_THROW(StageConfig::from_config(Stage::Rectify, kv), ConfigError);
}

TEST_F(TrainerTest, derive_seed_and_sample_batch) {
    EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
    EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 3));
    EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 2, 4));
    auto clips = tiny_clips(3);
    std::mt19937_64 rng(0);
    for (int i = 0; i < 20; ++i) {
        auto b = sample_batch(clips, 2, 4, {8, 4}, rng);
        EXPECT_EQ(b.frames.sizes(), (std::vector<std::int64_t>{2, 4, 3, 16, 16}));
        const auto fps = b.fps[0].item<std::int64_t>();
        EXPECT_TRUE(fps == 8 || fps == 4);
        EXPECT_EQ(b.caption.size(1), kCaptionLength);
    }
    auto native = sample_batch(clips, 1, 4, {16}, rng);
    EXPECT_EQ(native.fps[0].item<std::int64_t>(), 8);
    EXPECT_THROW(sample_batch(clips, 1, 9, {8}, rng), ParameterError);
    EXPECT_THROW(sample_batch({}, 1, 4, {8}, rng), ParameterError);
}

TEST_F(TrainerTest, adamw_groups_exclude_norms_and_biases_from_decay) {
    NamedParams named{{"layer.weight", torch::ones({2, 2}, torch::requires_grad())},
                      {"layer.bias", torch::ones({2}, torch::requires_grad())},
                      {"norm1.weight", torch::ones({2, 2}, torch::requires_grad())},
                      {"scale", torch::ones({1}, torch::requires_grad())},
                      {"frozen.weight", torch::ones({2, 2})}};
    auto groups = adamw_groups(named, 1e-3, 0.01);
    ASSERT_EQ(groups.size(), 2u);
    EXPECT_EQ(groups[0].params().size(), 1u);
    EXPECT_EQ(groups[1].params().size(), 3u);
    EXPECT_DOUBLE_EQ(static_cast<torch::optim::AdamWOptions&>(groups[0].options()).weight_decay(), 0.01);
    EXPECT_DOUBLE_EQ(static_cast<torch::optim::AdamWOptions&>(groups[1].options()).weight_decay(), 0.0);
}

TEST_F(TrainerTest, variant_one_is_refused) {
    auto m = fresh_models();
    auto cfg = stage(Stage::Rectify, 2);
    cfg.freeze = FreezeVariant::I;
    EXPECT_THROW(train_rectify(m.denoiser, m.ae, tiny_clips(), cfg), ParameterError);
}

TEST_F(TrainerTest, freeze_variants_change_exactly_their_groups) {
    struct Row {
        FreezeVariant v;
        bool icp, spatial, temporal;
    };
    const Row rows[] = {{FreezeVariant::II, true, true, true},
                        {FreezeVariant::III, true, true, false},
                        {FreezeVariant::IV, true, true, false},
                        {FreezeVariant::V, true, false, false}};
    auto clips = tiny_clips();
    for (const auto& r : rows) {
        auto m = fresh_models();
        auto before = group_hashes(m.denoiser);
        const auto enc = encoder_hash(m.ae);
        auto cfg = stage(Stage::Rectify, 3);
        cfg.freeze = r.v;
        auto result = train_rectify(m.denoiser, m.ae, clips, cfg);
        auto after = group_hashes(m.denoiser);
        const auto name = FreezePolicy::make(r.v).name();
        EXPECT_EQ(after[ParamGroup::ICP] != before[ParamGroup::ICP], r.icp) << name;
        EXPECT_EQ(after[ParamGroup::Spatial] != before[ParamGroup::Spatial], r.spatial) << name;
        EXPECT_EQ(after[ParamGroup::Temporal] != before[ParamGroup::Temporal], r.temporal) << name;
        EXPECT_EQ(encoder_hash(m.ae), enc) << name;
        auto meta = json::parse(result.checkpoint.metadata());
        EXPECT_EQ(meta.at("freeze"), name);
        EXPECT_EQ(meta.at("step"), 3);
    }
}

TEST_F(TrainerTest, null_condition_step_leaves_condition_only_variant_untouched) {
    auto m = fresh_models();
    auto before = group_hashes(m.denoiser);
    auto cfg = stage(Stage::Rectify, 2);
    cfg.freeze = FreezeVariant::V;
    cfg.condition_dropout = 1.0;
    auto result = train_rectify(m.denoiser, m.ae, tiny_clips(), cfg);
    EXPECT_EQ(group_hashes(m.denoiser), before);
    EXPECT_EQ(result.records.size(), 2u);
}

TEST_F(TrainerTest, runs_are_deterministic_and_resume_matches_uninterrupted) {
    auto clips = tiny_clips();
    auto cfg = stage(Stage::Rectify, 6);
    auto a = fresh_models();
    auto full = train_rectify(a.denoiser, a.ae, clips, cfg);
    auto b = fresh_models();
    auto again = train_rectify(b.denoiser, b.ae, clips, cfg);
    ASSERT_EQ(full.records.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(full.records[i].loss, again.records[i].loss);
    for (auto g : kParamGroups) EXPECT_EQ(group_hash(a.denoiser, g), group_hash(b.denoiser, g));
    EXPECT_EQ(full.checkpoint.serialize(), again.checkpoint.serialize());
    EXPECT_TRUE(full.checkpoint.has_section("optim/0/"));

    auto c = fresh_models();
    TrainOptions first;
    first.stop_after = 3;
    auto part = train_rectify(c.denoiser, c.ae, clips, cfg, first);
    EXPECT_EQ(part.final_step, 3);
    auto d = fresh_models();
    TrainOptions second;
    second.resume = &part.checkpoint;
    auto rest = train_rectify(d.denoiser, d.ae, clips, cfg, second);
    ASSERT_EQ(rest.records.size(), 3u);
    EXPECT_EQ(rest.records.front().step, 4);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(rest.records[i].loss, full.records[i + 3].loss);
    for (auto g : kParamGroups) EXPECT_EQ(group_hash(d.denoiser, g), group_hash(a.denoiser, g)) << group_name(g);

    auto e = fresh_models();
    auto wrong = stage(Stage::Sketch, 2);
    SketchEncoder sk(small_denoiser());
    TrainOptions mismatched;
    mismatched.resume = &part.checkpoint;
    EXPECT_THROW(train_sketch(e.denoiser, sk, e.ae, clips, wrong, mismatched), ConfigError);
}

TEST_F(TrainerTest, non_finite_loss_raises_numerical_error) {
    auto m = fresh_models();
    {
        torch::NoGradGuard no_grad;
        m.denoiser->spatial->conv_in->weight.fill_(std::numeric_limits<float>::quiet_NaN());
    }
    EXPECT_THROW(train_rectify(m.denoiser, m.ae, tiny_clips(), stage(Stage::Rectify, 2)), NumericalError);
}

TEST_F(TrainerTest, json_log_has_one_line_per_step) {
    auto m = fresh_models();
    std::ostringstream log;
    TrainOptions opts;
    opts.log = &log;
    train_rectify(m.denoiser, m.ae, tiny_clips(), stage(Stage::Rectify, 3), opts);
    std::istringstream in(log.str());
    std::string line;
    std::int64_t expected = 1;
    while (std::getline(in, line)) {
        auto j = json::parse(line);
        EXPECT_EQ(j.at("stage"), "rectify");
        EXPECT_EQ(j.at("step"), expected++);
        EXPECT_TRUE(j.at("components").contains("diffusion"));
        EXPECT_DOUBLE_EQ(j.at("lr").get<double>(), 1e-3);
    }
    EXPECT_EQ(expected, 4);
}

TEST_F(TrainerTest, decoder_stage_keeps_encoder_and_starts_at_vanilla_loss) {
    auto clips = tiny_clips();
    auto cfg = stage(Stage::Decoder, 2);
    torch::manual_seed(3);
    Autoencoder full(AutoencoderConfig{}, DecoderVariant::full());
    Autoencoder vanilla(AutoencoderConfig{}, DecoderVariant::vanilla());
    TensorArchive init;
    full->save_to(init);
    vanilla->load_from(init);
    const auto enc = encoder_hash(full);
    torch::manual_seed(4);
    PatchDiscriminator d1, d2;
    auto r_full = train_decoder(full, d1, clips, cfg);
    auto r_van = train_decoder(vanilla, d2, clips, cfg);
    EXPECT_NEAR(r_full.records[0].loss, r_van.records[0].loss, 1e-6);
    EXPECT_EQ(encoder_hash(full), enc);
    EXPECT_EQ(json::parse(r_full.checkpoint.metadata()).at("variant"), "full");
    EXPECT_TRUE(r_full.checkpoint.has_section("decoder_har/"));
}

TEST_F(TrainerTest, adversarial_term_starts_at_configured_step) {
    auto cfg = stage(Stage::Decoder, 3);
    cfg.adversarial_start = 2;
    torch::manual_seed(5);
    Autoencoder ae(AutoencoderConfig{}, DecoderVariant::full());
    PatchDiscriminator disc;
    auto r = train_decoder(ae, disc, tiny_clips(), cfg);
    EXPECT_EQ(r.records[0].components.count("disc"), 0u);
    EXPECT_EQ(r.records[0].components.at("lambda_d"), 0.0);
    EXPECT_EQ(r.records[1].components.count("disc"), 1u);
    EXPECT_EQ(r.records[2].components.count("disc"), 1u);
}

TEST_F(TrainerTest, autoencoder_stage_requires_vanilla_and_sets_latent_scale) {
    torch::manual_seed(6);
    Autoencoder full(AutoencoderConfig{}, DecoderVariant::full());
    PatchDiscriminator disc;
    EXPECT_THROW(train_autoencoder(full, disc, tiny_clips(), stage(Stage::Autoencoder, 1)), ParameterError);
    Autoencoder ae(AutoencoderConfig{}, DecoderVariant::vanilla());
    auto r = train_autoencoder(ae, disc, tiny_clips(), stage(Stage::Autoencoder, 2));
    EXPECT_EQ(r.records.size(), 2u);
    EXPECT_NE(ae->encoder->latent_scale.item<double>(), 1.0);
    Autoencoder back(AutoencoderConfig{}, DecoderVariant::vanilla());
    back->load_from(r.checkpoint);
    EXPECT_EQ(back->encoder->latent_scale.item<double>(), ae->encoder->latent_scale.item<double>());
}

TEST_F(TrainerTest, sketch_stage_freezes_denoiser_and_starts_unguided) {
    auto clips = tiny_clips();
    auto m = fresh_models();
    {
        torch::NoGradGuard no_grad;
        for (auto& p : m.denoiser->temporal->parameters()) p.add_(0.02);
    }
    NamedParams all;
    for (const auto& p : m.denoiser->named_parameters()) all.emplace_back(p.key(), p.value());
    const auto denoiser_before = tensors_hash(all);
    const auto enc = encoder_hash(m.ae);
    torch::manual_seed(7);
    SketchEncoder sk(small_denoiser());
    auto cfg = stage(Stage::Sketch, 3);
    auto r = train_sketch(m.denoiser, sk, m.ae, clips, cfg);
    EXPECT_EQ(tensors_hash(all), denoiser_before);
    EXPECT_EQ(encoder_hash(m.ae), enc);
    EXPECT_TRUE(r.checkpoint.has_section("sketch/"));
    EXPECT_FALSE(r.checkpoint.has_section("denoiser/"));

    // step 1 with a fresh adapter equals the plain denoiser's loss on the same draws
    std::mt19937_64 rng(derive_seed(cfg.seed, 1));
    auto gen = make_generator(derive_seed(cfg.seed, 1, 1));
    auto batch = sample_batch(clips, cfg.batch_size, cfg.frames, cfg.fps_set, rng);
    torch::NoGradGuard no_grad;
    const auto L = batch.frames.size(1);
    auto z0 = clip_latents(m.ae, batch.frames);
    auto cond = build_condition_from_latents(z0.select(1, 0), z0.select(1, L - 1), L,
                                             m.denoiser->icp(batch.frames.select(1, 0), batch.frames.select(1, L - 1)),
                                             batch.caption, batch.fps);
    const auto schedule = default_schedule();
    auto t = torch::randint(1, schedule.T + 1, {z0.size(0)}, gen, torch::kInt64);
    auto eps = torch::randn(z0.sizes(), gen, torch::kFloat32);
    DenoiseFn plain = [&](const torch::Tensor& z, const torch::Tensor& tt, const ConditionBundle& c) {
        return m.denoiser->forward(z, tt, c);
    };
    EXPECT_NEAR(r.records[0].loss, diffusion_loss(plain, z0, cond, t, eps, schedule).item<double>(), 1e-6);
}

TEST_F(TrainerTest, sketch_stage_selection_mix) {
    auto m = fresh_models();
    SketchEncoder sk(small_denoiser());
    auto cfg = stage(Stage::Sketch, 60);
    cfg.frames = 8;
    cfg.audit_every = 60;
    auto r = train_sketch(m.denoiser, sk, m.ae, tiny_clips(4, 8), cfg);
    double bisection = 0.0;
    for (const auto& rec : r.records) {
        bisection += rec.components.at("bisection_fraction") / static_cast<double>(r.records.size());
        EXPECT_GE(rec.components.at("sketches_per_clip"), 1.0);
        EXPECT_LE(rec.components.at("sketches_per_clip"), 6.0);
    }
    EXPECT_NEAR(bisection, kBisectionProbability, 0.15);
}

TEST_F(TrainerTest, eval_loss_is_reproducible) {
    auto m = fresh_models();
    auto clips = tiny_clips(2);
    const double a = eval_diffusion_loss(m.denoiser, m.ae, clips, 4, 9);
    EXPECT_EQ(a, eval_diffusion_loss(m.denoiser, m.ae, clips, 4, 9));
    EXPECT_NE(a, eval_diffusion_loss(m.denoiser, m.ae, clips, 4, 10));
    EXPECT_GT(a, 0.0);
}
