#pragma once

// Schedule, forward noising, training objective and DDIM sampling. Nothing here
// knows about a particular denoiser architecture; timesteps are 1-based (1..T).

#include "toon/condition.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <vector>

namespace toon {

enum class ScheduleKind { Linear, ScaledLinear };

struct NoiseSchedule {
    std::int64_t T = 0;
    std::vector<double> betas;           // betas[t-1]
    std::vector<double> alphas_cumprod;  // alphas_cumprod[t-1] = prod_{s<=t} (1 - beta_s)

    double beta(std::int64_t t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
    double alpha_bar(std::int64_t t) const { return alphas_cumprod.at(static_cast<std::size_t>(t - 1)); }
};

NoiseSchedule make_schedule(std::int64_t T, double beta_start, double beta_end,
                            ScheduleKind kind = ScheduleKind::ScaledLinear);

/// Latent-diffusion default: scaled-linear, T = 1000, betas 8.5e-4 .. 1.2e-2.
NoiseSchedule default_schedule();

ScheduleKind parse_schedule_kind(const std::string& name);

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with one timestep per batch
/// element (`t` is [B], z0 is [B, ...]).
torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule);
torch::Tensor q_sample(const torch::Tensor& z0, std::int64_t t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule);

/// Mean squared error between `eps` and the denoiser's prediction at z_t.
torch::Tensor diffusion_loss(const DenoiseFn& denoiser, const torch::Tensor& z0, const ConditionBundle& cond,
                             const torch::Tensor& t, const torch::Tensor& eps, const NoiseSchedule& schedule);

/// eps_u + w (eps_c - eps_u); returns eps_cond itself when w == 1.
torch::Tensor cfg_combine(const torch::Tensor& eps_cond, const torch::Tensor& eps_uncond, double w);

struct DDIMConfig {
    std::int64_t num_steps = 50;
    double eta = 0.0;
    double guidance_scale = 1.0;
    std::uint64_t seed = 0;
};

/// Uniform-stride timestep subsequence, ascending, ending at T.
std::vector<std::int64_t> ddim_timesteps(std::int64_t T, std::int64_t num_steps);

/// Deterministic DDIM sampling (for eta = 0) with classifier-free guidance.
/// Starts from `x_T` when given, else from seeded standard normal noise.
torch::Tensor ddim_sample(const DenoiseFn& denoiser, at::IntArrayRef shape, const ConditionBundle& cond,
                          const DDIMConfig& cfg, const NoiseSchedule& schedule,
                          std::optional<torch::Tensor> x_T = std::nullopt);

/// Seeded CPU generator; all randomness in the project flows through these.
at::Generator make_generator(std::uint64_t seed);

}  // namespace toon
