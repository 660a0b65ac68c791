#include "toon/sketch.hpp"

#include "toon/autoencoder.hpp"
#include "toon/errors.hpp"

#include <algorithm>
#include <deque>
#include <numeric>

namespace toon {

namespace F = torch::nn::functional;

std::int64_t SketchSet::provided() const {
    return std::count_if(sketches.begin(), sketches.end(), [](const auto& s) { return s.has_value(); });
}

torch::Tensor empty_sketch(std::int64_t height, std::int64_t width) { return torch::ones({1, height, width}); }

void SketchSet::validate(std::int64_t height, std::int64_t width) const {
    for (const auto& s : sketches)
        if (s && (s->dim() != 3 || s->size(0) != 1 || s->size(1) != height || s->size(2) != width))
            throw ParameterError("sketch resolution does not match the clip");
}

torch::Tensor SketchSet::render(std::int64_t height, std::int64_t width) const {
    validate(height, width);
    std::vector<torch::Tensor> frames;
    frames.reserve(sketches.size());
    for (const auto& s : sketches) frames.push_back(s ? s->to(torch::kFloat32) : empty_sketch(height, width));
    return torch::stack(frames, 0);
}

torch::Tensor extract_sketch(const torch::Tensor& frame, double threshold) {
    const bool single = frame.dim() == 3;
    auto x = single ? frame.unsqueeze(0) : frame;
    if (x.dim() != 4 || x.size(1) != 3) throw ContractError("extract_sketch expects [3,H,W] or [N,3,H,W]");
    auto luma = (0.299 * x.select(1, 0) + 0.587 * x.select(1, 1) + 0.114 * x.select(1, 2)).unsqueeze(1);
    auto padded = F::pad(luma, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
    const auto h = luma.size(2), w = luma.size(3);
    auto diff = torch::zeros_like(luma);
    for (auto [dy, dx] : {std::pair{0, 1}, std::pair{2, 1}, std::pair{1, 0}, std::pair{1, 2}}) {
        auto nb = padded.narrow(2, dy, h).narrow(3, dx, w);
        diff = torch::maximum(diff, (nb - luma).abs());
    }
    auto sketch = torch::where(diff > threshold, -torch::ones_like(luma), torch::ones_like(luma));
    return single ? sketch.squeeze(0) : sketch;
}

std::vector<std::int64_t> bisection_select(std::int64_t L, std::int64_t n) {
    if (n < 1 || n > 4) throw ParameterError("bisection_select: depth must be in [1, 4]");
    std::vector<std::int64_t> out;
    if (L < 3) return out;
    // Breadth-first over segments, one level per depth step.
    std::deque<std::pair<std::int64_t, std::int64_t>> level{{1, L}};
    for (std::int64_t d = 0; d < n; ++d) {
        std::deque<std::pair<std::int64_t, std::int64_t>> next;
        for (auto [i, j] : level) {
            const auto m = (i + j) / 2;
            if (m <= i || m >= j) continue;
            out.push_back(m);
            next.emplace_back(i, m);
            next.emplace_back(m, j);
        }
        level = std::move(next);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

SampledSketches sample_training_sketches(const SketchSet& full, std::mt19937_64& rng,
                                         std::optional<SelectionPattern> forced) {
    const auto L = full.length();
    SampledSketches out;
    if (forced) {
        out.pattern = *forced;
    } else {
        std::bernoulli_distribution bisect(kBisectionProbability);
        if (bisect(rng)) {
            out.pattern.mode = SelectionPattern::Mode::Bisection;
            out.pattern.depth = std::uniform_int_distribution<std::int64_t>(1, 4)(rng);
        } else {
            out.pattern.mode = SelectionPattern::Mode::Random;
            out.pattern.count = L >= 3 ? std::uniform_int_distribution<std::int64_t>(1, L - 2)(rng) : 0;
        }
    }

    if (out.pattern.mode == SelectionPattern::Mode::Bisection) {
        out.selected = bisection_select(L, out.pattern.depth);
    } else {
        std::vector<std::int64_t> interior(static_cast<std::size_t>(std::max<std::int64_t>(L - 2, 0)));
        std::iota(interior.begin(), interior.end(), 2);
        if (out.pattern.count > static_cast<std::int64_t>(interior.size()))
            throw ParameterError("sample_training_sketches: count exceeds interior frame count");
        std::shuffle(interior.begin(), interior.end(), rng);
        out.selected.assign(interior.begin(), interior.begin() + out.pattern.count);
        std::sort(out.selected.begin(), out.selected.end());
    }

    out.set = SketchSet::empty(L);
    for (auto idx : out.selected) out.set.sketches[static_cast<std::size_t>(idx - 1)] = full.sketches[static_cast<std::size_t>(idx - 1)];
    return out;
}

SketchEncoderImpl::SketchEncoderImpl(const DenoiserConfig& cfg_) : cfg(cfg_) {
    cfg.validate();
    const auto base = cfg.base_width;
    const auto emb = cfg.embed_dim();
    sketch_stem = register_module(
        "sketch_stem",
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(1, 16, 3).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(16, 32, 3).stride(2).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(32, base, 3).stride(2).padding(1))));
    latent_in = register_module("latent_in", nn::Conv2d(nn::Conv2dOptions(cfg.latent_channels, base, 3).padding(1)));
    time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(base, emb), nn::SiLU(), nn::Linear(emb, emb)));
    std::int64_t in_ch = base;
    for (std::int64_t l = 0; l < cfg.num_levels; ++l) {
        const auto ch = cfg.level_width(l);
        blocks->push_back(ResBlock(in_ch, ch, emb));
        auto zc = nn::Conv2d(nn::Conv2dOptions(ch, ch, 1));
        zero_parameters(*zc);
        zero_convs->push_back(zc);
        if (l + 1 < cfg.num_levels) downsamplers->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
        in_ch = ch;
    }
    register_module("blocks", blocks);
    register_module("downsamplers", downsamplers);
    register_module("zero_convs", zero_convs);
}

Injections SketchEncoderImpl::forward(const torch::Tensor& sketches, const torch::Tensor& z, const torch::Tensor& t) {
    if (sketches.dim() != 4 || sketches.size(1) != 1) throw ContractError("sketch encoder: sketches must be [N,1,H,W]");
    if (z.dim() != 4 || z.size(1) != cfg.latent_channels) throw ContractError("sketch encoder: z must be [N,C,h,w]");
    if (sketches.size(0) != z.size(0) || t.size(0) != z.size(0)) throw ContractError("sketch encoder: batch mismatch");
    if (sketches.size(2) != z.size(2) * AutoencoderConfig::kDownsample ||
        sketches.size(3) != z.size(3) * AutoencoderConfig::kDownsample)
        throw ContractError("sketch encoder: sketch resolution must be 4x the latent resolution");

    auto emb = time_mlp->forward(sinusoidal_embedding(t, cfg.base_width));
    auto x = sketch_stem->forward(sketches) + latent_in(z);
    Injections out;
    for (std::int64_t l = 0; l < cfg.num_levels; ++l) {
        const auto i = static_cast<std::size_t>(l);
        x = blocks->ptr<ResBlockImpl>(i)->forward(x, emb);
        out.push_back(zero_convs->ptr<nn::Conv2dImpl>(i)->forward(x));
        if (l + 1 < cfg.num_levels) x = downsamplers->ptr<nn::Conv2dImpl>(i)->forward(x);
    }
    return out;
}

Injections sketch_injections(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& sketches,
                             SketchEncoder& adapter) {
    if (z_t.dim() != 5 || sketches.dim() != 5) throw ContractError("sketch_injections: expected clip tensors");
    const auto b = z_t.size(0), L = z_t.size(1);
    if (sketches.size(0) != b || sketches.size(1) != L) throw ContractError("sketch_injections: sketch/clip length mismatch");
    auto frames_z = z_t.reshape({b * L, z_t.size(2), z_t.size(3), z_t.size(4)});
    auto frames_s = sketches.reshape({b * L, 1, sketches.size(3), sketches.size(4)});
    return adapter(frames_s, frames_z, t.repeat_interleave(L, 0));
}

torch::Tensor guided_denoise(const torch::Tensor& z_t, const torch::Tensor& t, const ConditionBundle& cond,
                             const torch::Tensor& sketches, const torch::Tensor& present, InterpDenoiser& denoiser,
                             SketchEncoder& adapter, EmptyHandling empty) {
    auto inj = sketch_injections(z_t, t, sketches, adapter);
    if (empty == EmptyHandling::Omit) {
        auto gate = present.reshape({-1, 1, 1, 1}).to(z_t.scalar_type());
        for (auto& f : inj) f = f * gate;
    }
    return denoiser->forward(z_t, t, cond, inference_policy(), &inj);
}

}  // namespace toon
