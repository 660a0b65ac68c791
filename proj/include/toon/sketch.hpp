#pragma once

#include "toon/condition.hpp"
#include "toon/denoiser.hpp"
#include "toon/layers.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

namespace toon {

/// Per-frame optional sketches. An empty slot is the EMPTY sentinel, which the
/// adapter sees as an all-white image (no strokes).
struct SketchSet {
    std::vector<std::optional<torch::Tensor>> sketches;  // each [1, H, W] in [-1, 1]

    static SketchSet empty(std::int64_t L) { return SketchSet{std::vector<std::optional<torch::Tensor>>(static_cast<std::size_t>(L))}; }
    std::int64_t length() const { return static_cast<std::int64_t>(sketches.size()); }
    std::int64_t provided() const;
    /// [L, 1, H, W]; EMPTY slots rendered white.
    torch::Tensor render(std::int64_t height, std::int64_t width) const;
    /// Throws ParameterError when a provided sketch is not [1, height, width].
    void validate(std::int64_t height, std::int64_t width) const;
};

/// The all-white sentinel image.
torch::Tensor empty_sketch(std::int64_t height, std::int64_t width);

/// Edge-based line extraction: dark (-1) lines on white (+1). Accepts [3,H,W]
/// or [N,3,H,W]; a pixel is a line pixel when its luminance differs from a
/// 4-neighbour by more than `threshold`.
torch::Tensor extract_sketch(const torch::Tensor& frame, double threshold = 0.1);

/// Recursive midpoint selection from segment (1, L) down to depth n; 1-based,
/// sorted, endpoints excluded. Empty for L < 3.
std::vector<std::int64_t> bisection_select(std::int64_t L, std::int64_t n);

struct SelectionPattern {
    enum class Mode { Bisection, Random };
    Mode mode = Mode::Bisection;
    std::int64_t depth = 1;  // bisection, in [1, 4]
    std::int64_t count = 0;  // random
};

inline constexpr double kBisectionProbability = 0.8;

struct SampledSketches {
    SketchSet set;
    SelectionPattern pattern;
    std::vector<std::int64_t> selected;  // 1-based
};

/// Keeps the sketches of the selected interior frames, EMPTY elsewhere.
/// Without `forced`, picks bisection (depth uniform in [1,4]) with probability
/// 0.8, else `count` uniform in [1, L-2] random interior frames.
SampledSketches sample_training_sketches(const SketchSet& full, std::mt19937_64& rng,
                                         std::optional<SelectionPattern> forced = std::nullopt);

// Frame-wise adapter mirroring the denoiser's downsampling path. Each output
// passes through a zero-initialised 1x1 projection.
struct SketchEncoderImpl : nn::Module {
    explicit SketchEncoderImpl(const DenoiserConfig& cfg);

    /// sketches [N, 1, H, W], z [N, C, h, w] with H = 4h, t [N]; one entry per frame.
    Injections forward(const torch::Tensor& sketches, const torch::Tensor& z, const torch::Tensor& t);

    DenoiserConfig cfg;
    nn::Sequential sketch_stem{nullptr}, time_mlp{nullptr};
    nn::Conv2d latent_in{nullptr};
    nn::ModuleList blocks, downsamplers, zero_convs;
};
TORCH_MODULE(SketchEncoder);

/// How frames without a sketch are handled. Sentinel feeds the white image
/// through the adapter; Omit zeroes those frames' injections (ablation).
enum class EmptyHandling { Sentinel, Omit };

/// Noise prediction of the denoiser steered by per-frame sketch injections.
/// `sketches` is [B, L, 1, H, W]; `present` is [B, L] (1 where a sketch was given).
torch::Tensor guided_denoise(const torch::Tensor& z_t, const torch::Tensor& t, const ConditionBundle& cond,
                             const torch::Tensor& sketches, const torch::Tensor& present, InterpDenoiser& denoiser,
                             SketchEncoder& adapter, EmptyHandling empty = EmptyHandling::Sentinel);

/// Per-frame injections for a whole clip batch; returned tensors are [B*L, ...].
Injections sketch_injections(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& sketches,
                             SketchEncoder& adapter);

}  // namespace toon
