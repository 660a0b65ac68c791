#include "toon/diffusion.hpp"

#include "toon/errors.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

namespace toon {

NoiseSchedule make_schedule(std::int64_t T, double beta_start, double beta_end, ScheduleKind kind) {
    if (T < 2) throw ParameterError("make_schedule: T must be >= 2");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ParameterError("make_schedule: require 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.T = T;
    s.betas.resize(static_cast<std::size_t>(T));
    for (std::int64_t i = 0; i < T; ++i) {
        double frac = static_cast<double>(i) / static_cast<double>(T - 1);
        double b = 0.0;
        if (kind == ScheduleKind::Linear) {
            b = beta_start + frac * (beta_end - beta_start);
        } else {
            double r = std::sqrt(beta_start) + frac * (std::sqrt(beta_end) - std::sqrt(beta_start));
            b = r * r;
        }
        s.betas[static_cast<std::size_t>(i)] = b;
    }
    // Pin the endpoints so they are exact, not the result of interpolation rounding.
    s.betas.front() = beta_start;
    s.betas.back() = beta_end;

    s.alphas_cumprod.resize(s.betas.size());
    double acc = 1.0;
    for (std::size_t i = 0; i < s.betas.size(); ++i) {
        acc *= 1.0 - s.betas[i];
        s.alphas_cumprod[i] = acc;
    }
    return s;
}

NoiseSchedule default_schedule() { return make_schedule(1000, 8.5e-4, 1.2e-2, ScheduleKind::ScaledLinear); }

ScheduleKind parse_schedule_kind(const std::string& name) {
    if (name == "linear") return ScheduleKind::Linear;
    if (name == "scaled_linear") return ScheduleKind::ScaledLinear;
    throw ConfigError("unknown schedule kind '" + name + "'");
}

at::Generator make_generator(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

namespace {

// Broadcastable [B, 1, 1, ...] coefficient tensor for per-sample timesteps.
torch::Tensor gather_coeff(const NoiseSchedule& schedule, const torch::Tensor& t, const torch::Tensor& like,
                           bool noise_coeff) {
    auto tc = t.to(torch::kCPU).to(torch::kInt64).contiguous();
    if (tc.dim() != 1 || tc.size(0) != like.size(0))
        throw ContractError("timestep tensor must be [B] matching the batch dimension");
    std::vector<double> c(static_cast<std::size_t>(tc.size(0)));
    auto* tp = tc.data_ptr<std::int64_t>();
    for (std::size_t i = 0; i < c.size(); ++i) {
        auto ti = tp[i];
        if (ti < 1 || ti > schedule.T) throw ParameterError("timestep out of range [1, T]");
        double ab = schedule.alpha_bar(ti);
        c[i] = noise_coeff ? std::sqrt(1.0 - ab) : std::sqrt(ab);
    }
    std::vector<std::int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
    shape[0] = like.size(0);
    return torch::tensor(c, torch::kFloat64).to(like.scalar_type()).view(shape);
}

}  // namespace

torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule) {
    if (z0.sizes() != eps.sizes()) throw ContractError("q_sample: eps shape must equal z0 shape");
    return gather_coeff(schedule, t, z0, false) * z0 + gather_coeff(schedule, t, z0, true) * eps;
}

torch::Tensor q_sample(const torch::Tensor& z0, std::int64_t t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule) {
    if (z0.sizes() != eps.sizes()) throw ContractError("q_sample: eps shape must equal z0 shape");
    if (t < 1 || t > schedule.T) throw ParameterError("timestep out of range [1, T]");
    double ab = schedule.alpha_bar(t);
    return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor diffusion_loss(const DenoiseFn& denoiser, const torch::Tensor& z0, const ConditionBundle& cond,
                             const torch::Tensor& t, const torch::Tensor& eps, const NoiseSchedule& schedule) {
    auto z_t = q_sample(z0, t, eps, schedule);
    auto pred = denoiser(z_t, t, cond);
    if (pred.sizes() != eps.sizes()) throw ContractError("diffusion_loss: prediction shape differs from eps");
    return (eps - pred).pow(2).mean();
}

torch::Tensor cfg_combine(const torch::Tensor& eps_cond, const torch::Tensor& eps_uncond, double w) {
    if (eps_cond.sizes() != eps_uncond.sizes()) throw ContractError("cfg_combine: shape mismatch");
    if (w == 1.0) return eps_cond;
    return eps_uncond + w * (eps_cond - eps_uncond);
}

std::vector<std::int64_t> ddim_timesteps(std::int64_t T, std::int64_t num_steps) {
    if (num_steps < 1 || num_steps > T) throw ParameterError("ddim: num_steps must be in [1, T]");
    std::vector<std::int64_t> ts;
    ts.reserve(static_cast<std::size_t>(num_steps));
    for (std::int64_t i = 1; i <= num_steps; ++i) ts.push_back(i * T / num_steps);
    return ts;
}

torch::Tensor ddim_sample(const DenoiseFn& denoiser, at::IntArrayRef shape, const ConditionBundle& cond,
                          const DDIMConfig& cfg, const NoiseSchedule& schedule, std::optional<torch::Tensor> x_T) {
    if (cfg.eta < 0.0) throw ParameterError("ddim: eta must be >= 0");
    if (cfg.guidance_scale < 1.0) throw ParameterError("ddim: guidance_scale must be >= 1");
    auto ts = ddim_timesteps(schedule.T, cfg.num_steps);

    torch::NoGradGuard no_grad;
    auto gen = make_generator(cfg.seed);
    torch::Tensor x = x_T ? x_T->clone() : torch::randn(shape, gen, torch::kFloat32);
    const auto batch = x.size(0);
    const bool guided = cfg.guidance_scale != 1.0;
    const ConditionBundle uncond = guided ? cond.null() : cond;

    for (auto it = ts.rbegin(); it != ts.rend(); ++it) {
        const std::int64_t t = *it;
        const auto next = std::next(it);
        const double a = schedule.alpha_bar(t);
        const double a_prev = next == ts.rend() ? 1.0 : schedule.alpha_bar(*next);

        auto t_vec = torch::full({batch}, t, torch::kInt64);
        auto eps = denoiser(x, t_vec, cond);
        if (guided) eps = cfg_combine(eps, denoiser(x, t_vec, uncond), cfg.guidance_scale);

        auto x0 = (x - std::sqrt(1.0 - a) * eps) / std::sqrt(a);
        const double sigma = cfg.eta * std::sqrt((1.0 - a_prev) / (1.0 - a)) * std::sqrt(1.0 - a / a_prev);
        x = std::sqrt(a_prev) * x0 + std::sqrt(std::max(0.0, 1.0 - a_prev - sigma * sigma)) * eps;
        if (sigma > 0.0) x = x + sigma * torch::randn(x.sizes(), gen, x.scalar_type());
        if (!torch::isfinite(x).all().item<bool>()) throw NumericalError("ddim: non-finite latent at t=" + std::to_string(t));
    }
    return x;
}

}  // namespace toon
