#include "toon/errors.hpp"
#include "toon/toon_data.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace toon;
namespace fs = std::filesystem;

namespace {

ClipSpec spec_for(MotionKind m, std::int64_t L = 16, RenderStyle style = RenderStyle::Toon) {
    ClipSpec s;
    s.frames = L;
    s.motion = m;
    s.style = style;
    return s;
}

ToonClip translating_square(std::int64_t L, std::int64_t step) {
    torch::manual_seed(9);
    ToonClip clip;
    auto background = torch::rand({3, 64, 64}) * 2 - 1;
    auto texture = torch::rand({3, 16, 16}) * 2 - 1;
    clip.frames = background.unsqueeze(0).repeat({L, 1, 1, 1});
    for (std::int64_t k = 0; k < L; ++k)
        clip.frames[k].slice(1, 16, 32).slice(2, 16 + step * k, 32 + step * k).copy_(texture);
    return clip;
}

const std::vector<MotionKind> kMotions{MotionKind::Linear, MotionKind::Arc, MotionKind::Occlusion, MotionKind::Morph};

}  // namespace

TEST(generate_clip, deterministic_per_seed) {
    for (auto m : kMotions) {
        auto a = generate_clip(spec_for(m), 42), b = generate_clip(spec_for(m), 42);
        EXPECT_TRUE(torch::equal(a.frames, b.frames)) << motion_name(m);
        EXPECT_EQ(a.caption, b.caption);
        EXPECT_FALSE(torch::equal(a.frames, generate_clip(spec_for(m), 43).frames)) << motion_name(m);
    }
}

TEST(generate_clip, shapes_range_and_styles) {
    for (auto style : {RenderStyle::Toon, RenderStyle::Live}) {
        auto c = generate_clip(spec_for(MotionKind::Arc, 8, style), 3);
        EXPECT_EQ(c.frames.sizes(), (std::vector<std::int64_t>{8, 3, 32, 32}));
        EXPECT_GE(c.frames.min().item<double>(), -1.0);
        EXPECT_LE(c.frames.max().item<double>(), 1.0);
        EXPECT_EQ(c.style, style);
        EXPECT_EQ(static_cast<std::int64_t>(c.caption.size()), kCaptionLength);
    }
    EXPECT_THROW(generate_clip(spec_for(MotionKind::Linear, 0), 1), ParameterError);
}

TEST(generate_clip, occluder_covers_square_at_middle_frame) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (std::int64_t L : {2, 5, 16}) {
            auto c = generate_clip(spec_for(MotionKind::Occlusion, L), seed);
            ASSERT_EQ(c.object_masks.size(), 2u);
            const auto& square = c.object_masks[0];
            const auto& circle = c.object_masks[1];
            const auto mid = (L - 1) / 2;
            EXPECT_GT(square[mid].sum().item<std::int64_t>(), 0);
            EXPECT_TRUE(torch::equal(square[mid] & circle[mid], square[mid])) << "seed " << seed << " L " << L;
            EXPECT_TRUE(torch::equal(square[0], square[L - 1]));
        }
    }
}

TEST(generate_clip, two_frame_clips_are_supported) {
    for (auto m : kMotions) {
        auto c = generate_clip(spec_for(m, 2), 5);
        EXPECT_EQ(c.length(), 2);
        EXPECT_GE(mean_flow_magnitude(c), 0.0);
    }
}

TEST(generate_clip, caption_describes_the_clip) {
    auto occ = generate_clip(spec_for(MotionKind::Occlusion), 7);
    auto text = Vocabulary::detokenize(occ.caption);
    EXPECT_NE(text.find("circle passes over"), std::string::npos) << text;
    EXPECT_NE(Vocabulary::detokenize(generate_clip(spec_for(MotionKind::Morph), 7).caption).find("morphs into square"),
              std::string::npos);
    EXPECT_NE(Vocabulary::detokenize(generate_clip(spec_for(MotionKind::Arc), 7).caption).find("arcs around"),
              std::string::npos);
    EXPECT_EQ(Vocabulary::tokenize(text), std::vector<std::int64_t>(occ.caption.begin(),
                                                                      occ.caption.begin() + Vocabulary::tokenize(text).size()));
    EXPECT_EQ(Vocabulary::words().front(), "<pad>");
    EXPECT_THROW(Vocabulary::id("zebra"), ParameterError);
    EXPECT_EQ(pad_caption({3, 4}).size(), static_cast<std::size_t>(kCaptionLength));
}

TEST(flow, static_clip_has_zero_flow) {
    auto c = generate_clip(spec_for(MotionKind::Linear, 4), 1);
    c.frames = c.frames[0].unsqueeze(0).repeat({4, 1, 1, 1});
    EXPECT_EQ(mean_flow_magnitude(c), 0.0);
    ToonClip one;
    one.frames = torch::zeros({1, 3, 16, 16});
    EXPECT_THROW(mean_flow_magnitude(one), ParameterError);
}

TEST(flow, translating_square_matches_displacement_times_area) {
    const std::int64_t step = 2;
    auto clip = translating_square(4, step);
    auto f = block_matching_flow(clip.frames[0], clip.frames[1]);
    EXPECT_EQ(f[2][2][1].item<double>(), static_cast<double>(step));
    EXPECT_EQ(f[2][2][0].item<double>(), 0.0);
    const double expected = step * (16.0 * 16.0) / (64.0 * 64.0);
    EXPECT_NEAR(mean_flow_magnitude(clip), expected, 0.2 * expected);
}

TEST(flow, moving_clips_outscore_static_ones) {
    auto moving = generate_clip(spec_for(MotionKind::Linear, 8), 11);
    auto still = moving;
    still.frames = moving.frames[0].unsqueeze(0).repeat({8, 1, 1, 1});
    EXPECT_GT(mean_flow_magnitude(moving), mean_flow_magnitude(still));
    auto r = flow_magnitude_filter("x", still, 0.01);
    EXPECT_FALSE(r.kept);
    EXPECT_EQ(r.reasons.size(), 1u);
}

TEST(pipeline, thresholds_split_and_determinism) {
    std::vector<NamedClip> clips;
    for (int i = 0; i < 10; ++i) clips.push_back({"c" + std::to_string(i), generate_clip(spec_for(MotionKind::Linear, 2), i)});
    auto index = std::make_shared<ExternalScorer>("index", [&](const ToonClip& c) {
        for (std::size_t i = 0; i < clips.size(); ++i)
            if (torch::equal(clips[i].clip.frames, c.frames)) return static_cast<double>(i);
        return -1.0;
    });
    std::vector<std::shared_ptr<ClipScorer>> scorers{index};
    auto r = run_pipeline(clips, scorers, {{"index", Threshold{2.0, 7.0}}}, 2, 5);
    ASSERT_EQ(r.reports.size(), 10u);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(r.reports[static_cast<std::size_t>(i)].kept, i >= 2 && i <= 7);
    EXPECT_EQ(r.eval_ids.size(), 2u);
    EXPECT_EQ(r.train_ids.size(), 4u);
    EXPECT_TRUE(std::is_sorted(r.train_ids.begin(), r.train_ids.end()));
    auto again = run_pipeline(clips, scorers, {{"index", Threshold{2.0, 7.0}}}, 2, 5);
    EXPECT_EQ(again.eval_ids, r.eval_ids);

    EXPECT_THROW(run_pipeline(clips, {}, {}, 2, 5), ConfigError);
    EXPECT_THROW(run_pipeline(clips, scorers, {{"ocr", Threshold{}}}, 2, 5), ConfigError);
    auto all = run_pipeline(clips, scorers, {}, 20, 5);
    EXPECT_EQ(all.eval_ids.size(), 10u);
    EXPECT_TRUE(all.train_ids.empty());
    SingleShotSplitter splitter;
    EXPECT_EQ(splitter.split(clips[0].clip.frames).size(), 1u);
}

TEST(storage, dataset_round_trip) {
    auto root = fs::temp_directory_path() / "toon_data_store";
    fs::remove_all(root);
    std::vector<NamedClip> clips;
    for (int i = 0; i < 4; ++i)
        clips.push_back({"clip_" + std::to_string(i), generate_clip(spec_for(kMotions[static_cast<std::size_t>(i)], 4), i)});
    std::vector<std::shared_ptr<ClipScorer>> scorers{std::make_shared<FlowScorer>()};
    auto result = run_pipeline(clips, scorers, {}, 1, 0);
    write_dataset(root, clips, result);
    auto train = load_split(root, "train"), eval = load_split(root, "eval");
    EXPECT_EQ(train.size(), 3u);
    EXPECT_EQ(eval.size(), 1u);
    auto back = load_clip(root / "clips" / "clip_2");
    EXPECT_LE((back.frames - clips[2].clip.frames).abs().max().item<double>(), 1.0 / 255.0 + 1e-6);
    EXPECT_EQ(back.caption, clips[2].clip.caption);
    EXPECT_EQ(back.motion, MotionKind::Occlusion);
    EXPECT_TRUE(fs::exists(root / "clips" / "clip_2" / "frame_000.ppm"));
    std::ifstream reports(root / "reports.jsonl");
    EXPECT_EQ(std::count(std::istreambuf_iterator<char>(reports), std::istreambuf_iterator<char>(), '\n'), 4);
    EXPECT_THROW(load_split(root / "missing", "train"), IoError);
}

TEST(names, parse_round_trip) {
    for (auto m : kMotions) EXPECT_EQ(parse_motion(motion_name(m)), m);
    EXPECT_THROW(parse_motion("spin"), ConfigError);
    EXPECT_EQ(parse_style("live"), RenderStyle::Live);
    EXPECT_THROW(parse_style("anime"), ConfigError);
}
