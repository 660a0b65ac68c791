#include "toon/errors.hpp"
#include "toon/sketch.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace toon;

namespace {

void midpoints(std::int64_t i, std::int64_t j, std::int64_t depth, std::set<std::int64_t>& out) {
    if (depth == 0) return;
    const auto m = (i + j) / 2;
    if (m <= i || m >= j) return;
    out.insert(m);
    midpoints(i, m, depth - 1, out);
    midpoints(m, j, depth - 1, out);
}

DenoiserConfig small_config() {
    DenoiserConfig c;
    c.frame_count = 5;
    c.base_width = 16;
    c.context_dim = 16;
    c.fps_embed_dim = 16;
    c.heads = 2;
    return c;
}

ConditionBundle some_condition(InterpDenoiser& model, const torch::Tensor& z) {
    const auto L = z.size(1);
    auto ctx = model->icp(torch::rand({1, 3, 16, 16}), torch::rand({1, 3, 16, 16}));
    return build_condition_from_latents(z.select(1, 0), z.select(1, L - 1), L, ctx,
                                        torch::randint(1, 60, {1, 5}, torch::kInt64), torch::full({1}, 8));
}

SketchSet random_sketches(std::int64_t L) {
    SketchSet s = SketchSet::empty(L);
    for (auto& slot : s.sketches) slot = torch::sign(torch::randn({1, 16, 16})).clamp_min(-1);
    return s;
}

void randomize(nn::Module& m, double scale) {
    torch::NoGradGuard no_grad;
    for (auto& p : m.parameters()) p.add_(torch::randn_like(p) * scale);
}

}  // namespace

TEST(bisection, matches_recursive_oracle) {
    for (std::int64_t L = 2; L <= 40; ++L)
        for (std::int64_t n = 1; n <= 4; ++n) {
            std::set<std::int64_t> expected;
            midpoints(1, L, n, expected);
            EXPECT_EQ(bisection_select(L, n), std::vector<std::int64_t>(expected.begin(), expected.end()))
                << "L=" << L << " n=" << n;
        }
    EXPECT_EQ(bisection_select(16, 1), (std::vector<std::int64_t>{8}));
    EXPECT_EQ(bisection_select(16, 2), (std::vector<std::int64_t>{4, 8, 12}));
    EXPECT_TRUE(bisection_select(2, 3).empty());
    EXPECT_THROW(bisection_select(16, 0), ParameterError);
    EXPECT_THROW(bisection_select(16, 5), ParameterError);
}

TEST(bisection, selections_stay_interior) {
    for (std::int64_t L = 3; L <= 64; ++L)
        for (std::int64_t n = 1; n <= 4; ++n)
            for (auto k : bisection_select(L, n)) {
                EXPECT_GT(k, 1);
                EXPECT_LT(k, L);
            }
}

TEST(training_sketches, mode_ratio_and_random_counts) {
    std::mt19937_64 rng(123);
    const std::int64_t L = 16, draws = 100000;
    auto full = SketchSet::empty(L);
    for (auto& s : full.sketches) s = torch::zeros({1, 1, 1});
    std::int64_t bisect = 0;
    for (std::int64_t d = 0; d < draws; ++d) {
        auto s = sample_training_sketches(full, rng);
        if (s.pattern.mode == SelectionPattern::Mode::Bisection) {
            ++bisect;
            ASSERT_GE(s.pattern.depth, 1);
            ASSERT_LE(s.pattern.depth, 4);
            ASSERT_EQ(s.selected, bisection_select(L, s.pattern.depth));
        } else {
            ASSERT_GE(s.pattern.count, 1);
            ASSERT_LE(s.pattern.count, L - 2);
            ASSERT_EQ(static_cast<std::int64_t>(s.selected.size()), s.pattern.count);
            for (auto k : s.selected) {
                ASSERT_GT(k, 1);
                ASSERT_LT(k, L);
            }
        }
        ASSERT_EQ(s.set.provided(), static_cast<std::int64_t>(s.selected.size()));
    }
    const double ratio = static_cast<double>(bisect) / draws;
    EXPECT_NEAR(ratio, kBisectionProbability, 0.005);
}

TEST(training_sketches, forced_pattern_keeps_selected_frames) {
    std::mt19937_64 rng(1);
    torch::manual_seed(1);
    auto full = random_sketches(9);
    auto s = sample_training_sketches(full, rng, SelectionPattern{SelectionPattern::Mode::Bisection, 2, 0});
    EXPECT_EQ(s.selected, (std::vector<std::int64_t>{3, 5, 7}));
    for (std::int64_t i = 1; i <= 9; ++i) {
        const auto& slot = s.set.sketches[static_cast<std::size_t>(i - 1)];
        const bool chosen = i == 3 || i == 5 || i == 7;
        EXPECT_EQ(slot.has_value(), chosen);
        if (chosen) EXPECT_TRUE(torch::equal(*slot, *full.sketches[static_cast<std::size_t>(i - 1)]));
    }
    EXPECT_THROW(sample_training_sketches(full, rng, SelectionPattern{SelectionPattern::Mode::Random, 1, 8}),
                 ParameterError);
}

TEST(sketch_set, render_uses_white_sentinel) {
    auto s = SketchSet::empty(3);
    s.sketches[1] = -torch::ones({1, 4, 4});
    auto r = s.render(4, 4);
    ASSERT_EQ(r.sizes(), (std::vector<std::int64_t>{3, 1, 4, 4}));
    EXPECT_EQ(r[0].min().item<double>(), 1.0);
    EXPECT_EQ(r[1].max().item<double>(), -1.0);
    EXPECT_EQ(r[2].min().item<double>(), 1.0);
    EXPECT_TRUE(torch::equal(empty_sketch(4, 4), torch::ones({1, 4, 4})));
    EXPECT_THROW(s.render(5, 4), ParameterError);
}

TEST(extract_sketch, dark_lines_on_white) {
    auto frame = -torch::ones({3, 12, 12});
    frame.slice(1, 4, 8).slice(2, 4, 8).fill_(1.0);
    auto s = extract_sketch(frame);
    ASSERT_EQ(s.sizes(), (std::vector<std::int64_t>{1, 12, 12}));
    EXPECT_EQ(s[0][0][0].item<double>(), 1.0);
    EXPECT_EQ(s[0][6][6].item<double>(), 1.0);
    EXPECT_EQ(s[0][4][4].item<double>(), -1.0);
    EXPECT_EQ(s[0][3][5].item<double>(), -1.0);
    EXPECT_EQ(extract_sketch(torch::zeros({3, 6, 6})).min().item<double>(), 1.0);
    EXPECT_EQ(extract_sketch(torch::zeros({2, 3, 6, 6})).sizes(), (std::vector<std::int64_t>{2, 1, 6, 6}));
    EXPECT_THROW(extract_sketch(torch::zeros({1, 6, 6})), ContractError);
}

TEST(adapter, fresh_adapter_is_transparent) {
    torch::manual_seed(2);
    InterpDenoiser model(small_config());
    SketchEncoder adapter(small_config());
    torch::NoGradGuard no_grad;
    randomize(*model->temporal, 0.05);
    auto z = torch::randn({1, 5, 4, 4, 4});
    auto cond = some_condition(model, z);
    auto t = torch::tensor({300}, torch::kInt64);
    auto sketches = random_sketches(5).render(16, 16).unsqueeze(0);
    auto present = torch::ones({1, 5});
    auto plain = model->forward(z, t, cond);
    EXPECT_TRUE(torch::equal(guided_denoise(z, t, cond, sketches, present, model, adapter), plain));
    EXPECT_TRUE(torch::equal(
        guided_denoise(z, t, cond, sketches, torch::zeros({1, 5}), model, adapter, EmptyHandling::Omit), plain));
}

TEST(adapter, sketch_of_one_frame_only_changes_that_frames_injection) {
    torch::manual_seed(3);
    SketchEncoder adapter(small_config());
    randomize(*adapter, 0.1);
    torch::NoGradGuard no_grad;
    auto z = torch::randn({1, 5, 4, 4, 4});
    auto t = torch::tensor({200}, torch::kInt64);
    auto sketches = SketchSet::empty(5).render(16, 16).unsqueeze(0);
    auto base = sketch_injections(z, t, sketches, adapter);
    auto changed = sketches.clone();
    changed[0][2] = random_sketches(1).render(16, 16)[0];
    auto moved = sketch_injections(z, t, changed, adapter);
    ASSERT_EQ(base.size(), moved.size());
    for (std::size_t lvl = 0; lvl < base.size(); ++lvl)
        for (std::int64_t f = 0; f < 5; ++f) {
            if (f == 2)
                EXPECT_FALSE(torch::equal(base[lvl][f], moved[lvl][f]));
            else
                EXPECT_TRUE(torch::equal(base[lvl][f], moved[lvl][f])) << "level " << lvl << " frame " << f;
        }
    EXPECT_THROW(sketch_injections(z, t, sketches.narrow(1, 0, 4), adapter), ContractError);
}

TEST(adapter, omit_zeroes_injections_of_frames_without_sketch) {
    torch::manual_seed(4);
    InterpDenoiser model(small_config());
    SketchEncoder adapter(small_config());
    randomize(*adapter, 0.1);
    torch::NoGradGuard no_grad;
    auto z = torch::randn({1, 5, 4, 4, 4});
    auto cond = some_condition(model, z);
    auto t = torch::tensor({300}, torch::kInt64);
    auto sketches = SketchSet::empty(5).render(16, 16).unsqueeze(0);
    auto plain = model->forward(z, t, cond);
    auto omit = guided_denoise(z, t, cond, sketches, torch::zeros({1, 5}), model, adapter, EmptyHandling::Omit);
    EXPECT_TRUE(torch::equal(omit, plain));
    auto sentinel = guided_denoise(z, t, cond, sketches, torch::zeros({1, 5}), model, adapter);
    EXPECT_FALSE(torch::equal(sentinel, plain));
}
