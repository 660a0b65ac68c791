#pragma once

// Training stages. Every stage draws its randomness from generators derived
// from (seed, step), so a resumed run replays the same batches and noise as an
// uninterrupted one.
//
//   autoencoder  encoder + vanilla decoder, frame-wise, compound loss
//   base         all denoiser groups on live-style clips (stands in for the
//                pretrained video model that rectification starts from)
//   rectify      denoiser under a freeze policy on cartoon clips
//   decoder      dual-reference decoder with the encoder frozen
//   sketch       sketch encoder with the denoiser frozen

#include "toon/autoencoder.hpp"
#include "toon/checkpoint.hpp"
#include "toon/config.hpp"
#include "toon/denoiser.hpp"
#include "toon/diffusion.hpp"
#include "toon/sketch.hpp"
#include "toon/toon_data.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace toon {

enum class Stage { Autoencoder, Base, Rectify, Decoder, Sketch };
std::string stage_name(Stage s);
Stage parse_stage(const std::string& name);

struct StageConfig {
    Stage stage = Stage::Rectify;
    std::int64_t steps = 100;
    double learning_rate = 1e-5;
    double weight_decay = 0.01;
    std::int64_t batch_size = 2;
    std::int64_t frames = 16;  // frames per training clip window
    FreezeVariant freeze = FreezeVariant::IV;
    std::uint64_t seed = 0;
    std::int64_t audit_every = 10;
    /// Candidate fps values; each batch picks one that the clips support.
    std::vector<std::int64_t> fps_set{8, 4};
    /// Probability of training a batch with the null condition (guidance).
    double condition_dropout = 0.1;
    /// Decoder / autoencoder stages: first step with the adversarial term.
    std::int64_t adversarial_start = 1000000;
    double discriminator_lr = 1e-4;

    /// lr 1e-5 (rectify, base), 4.5e-6 (decoder), 5e-5 (sketch), 1e-3 (autoencoder).
    static StageConfig defaults(Stage stage);
    /// Reads `train.*` keys over the stage defaults.
    static StageConfig from_config(Stage stage, KeyValueConfig& cfg);
    void validate() const;
};

struct StepRecord {
    std::int64_t step = 0;
    double loss = 0.0;
    std::map<std::string, double> components;
    double lr = 0.0;

    std::string to_json(Stage stage) const;
};

struct TrainResult {
    std::vector<StepRecord> records;  // steps run by this call only
    TensorArchive checkpoint;          // model sections + optimizer state + metadata
    std::int64_t final_step = 0;
};

struct TrainOptions {
    std::ostream* log = nullptr;            // JSON lines, one per step
    const TensorArchive* resume = nullptr;  // checkpoint of an earlier run of the same stage
    std::optional<std::int64_t> stop_after; // run at most this many steps (for interrupted runs)
};

/// Frames of one batch plus the fps they were sampled at.
struct ClipBatch {
    torch::Tensor frames;   // [B, L, 3, H, W]
    torch::Tensor caption;  // [B, kCaptionLength]
    torch::Tensor fps;      // [B]
};

/// Picks `batch` clips and a window of `frames` frames at a fps from `fps_set`.
ClipBatch sample_batch(const std::vector<ToonClip>& clips, std::int64_t batch, std::int64_t frames,
                       const std::vector<std::int64_t>& fps_set, std::mt19937_64& rng);

/// Deterministic 64-bit seed for (seed, step, salt).
std::uint64_t derive_seed(std::uint64_t seed, std::int64_t step, std::uint64_t salt = 0);

/// Decay / no-decay split of trainable parameters (norms and biases get none).
std::vector<torch::optim::OptimizerParamGroup> adamw_groups(const std::vector<std::pair<std::string, torch::Tensor>>& named,
                                                            double lr, double weight_decay);

TrainResult train_autoencoder(Autoencoder& ae, PatchDiscriminator& disc, const std::vector<ToonClip>& data,
                              const StageConfig& cfg, const TrainOptions& opts = {});

/// Base and rectify stages; `cfg.freeze` selects the policy (variant I is refused).
TrainResult train_denoiser(InterpDenoiser& model, Autoencoder& ae, const std::vector<ToonClip>& data,
                           const StageConfig& cfg, const TrainOptions& opts = {});

TrainResult train_rectify(InterpDenoiser& model, Autoencoder& ae, const std::vector<ToonClip>& data,
                          const StageConfig& cfg, const TrainOptions& opts = {});

TrainResult train_decoder(Autoencoder& ae, PatchDiscriminator& disc, const std::vector<ToonClip>& data,
                          const StageConfig& cfg, const TrainOptions& opts = {});

TrainResult train_sketch(InterpDenoiser& model, SketchEncoder& sketch, Autoencoder& ae,
                         const std::vector<ToonClip>& data, const StageConfig& cfg, const TrainOptions& opts = {});

/// Mean diffusion loss over the first `frames` frames of each clip, with noise
/// and timesteps fixed by `seed`.
double eval_diffusion_loss(InterpDenoiser& model, Autoencoder& ae, const std::vector<ToonClip>& clips,
                           std::int64_t frames, std::uint64_t seed, std::int64_t draws = 4,
                           const FreezePolicy& policy = inference_policy());

/// Diffusion-scale latents of [B, L, 3, H, W] frames (no grad).
torch::Tensor clip_latents(Autoencoder& ae, const torch::Tensor& frames);

/// Model-size keys (`model.*`) shared by every command.
DenoiserConfig denoiser_config(KeyValueConfig& cfg);
AutoencoderConfig autoencoder_config(KeyValueConfig& cfg);

/// Sets single-threaded deterministic execution.
void enable_determinism();

}  // namespace toon
