#pragma once

// Ablation runner: trains every variant of a suite on the same data with the
// same budget and seed, then ranks them and checks the expected orderings.
//
//   decoder  full / w/o P3D / w/o HAR & P3D reconstruction PSNR, plus the
//            per-frame-index curve of the full decoder
//   rectify  freeze variants I..V, held-out diffusion loss on cartoon clips
//            after a base stage on live-style clips (ordering is advisory)

#include "toon/autoencoder.hpp"
#include "toon/denoiser.hpp"
#include "toon/metrics.hpp"
#include "toon/toon_data.hpp"

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace toon {

struct AblationBudget {
    std::int64_t frames = 8;
    std::int64_t height = 32;
    std::int64_t width = 32;
    std::int64_t train_clips = 64;
    std::int64_t eval_clips = 50;
    std::int64_t batch_size = 4;
    std::uint64_t seed = 0;
    AutoencoderConfig autoencoder;
    DenoiserConfig denoiser;

    // decoder suite
    std::int64_t pretrain_steps = 600;
    double pretrain_lr = 1e-3;
    std::int64_t decoder_steps = 3000;
    double decoder_lr = 2e-4;

    // rectify suite
    std::int64_t base_steps = 300;
    std::int64_t rectify_steps = 200;
    double base_lr = 3e-4;
    double rectify_lr = 1e-4;
};

struct OrderingCheck {
    std::string description;
    double lhs = 0.0;
    double rhs = 0.0;
    double min_gap = 0.0;
    bool passed = false;
    bool advisory = false;
};

struct AblationReport {
    std::string suite;
    std::vector<MetricReport> decoders;                   // decoder suite, ranked by PSNR
    std::vector<std::pair<std::string, double>> losses;   // rectify suite, ranked by loss
    std::vector<OrderingCheck> checks;

    /// True when every non-advisory check passed.
    bool passed() const;
    std::string table() const;
    std::string to_json() const;
};

/// Synthetic cartoon clips cycling through the motion kinds.
std::vector<ToonClip> make_clips(std::int64_t count, std::int64_t frames, std::int64_t height, std::int64_t width,
                                 RenderStyle style, std::uint64_t seed);

/// Checks run on a finished decoder table: PSNR ordering with `min_gap` dB
/// gaps, and the endpoint privilege of the full decoder's frame-index curve.
std::vector<OrderingCheck> decoder_checks(const std::map<std::string, MetricReport>& by_label, double min_gap = 0.2);

/// Evaluates decoder checkpoints (label -> path); throws IoError for a missing file.
AblationReport evaluate_decoder_checkpoints(const std::map<std::string, std::filesystem::path>& checkpoints,
                                            const AutoencoderConfig& cfg, const std::vector<ToonClip>& eval);

/// Trains the vanilla autoencoder every suite starts from and saves it to `path`.
void pretrain_autoencoder(const AblationBudget& budget, const std::filesystem::path& path,
                          std::ostream* progress = nullptr);

/// Pretrains a vanilla autoencoder, trains each decoder variant from it and
/// evaluates. Checkpoints and reports go to `workdir`.
AblationReport run_decoder_ablation(const AblationBudget& budget, const std::filesystem::path& workdir,
                                    std::ostream* progress = nullptr);

/// Needs a trained autoencoder checkpoint for the latents.
AblationReport run_rectify_ablation(const AblationBudget& budget, const std::filesystem::path& autoencoder_ckpt,
                                    const std::filesystem::path& workdir, std::ostream* progress = nullptr);

}  // namespace toon
