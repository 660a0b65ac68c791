#pragma once

#include "toon/autoencoder.hpp"
#include "toon/toon_data.hpp"

#include <torch/torch.h>

#include <string>
#include <vector>

namespace toon {

/// Reported instead of infinity for identical images.
inline constexpr double kPsnrCap = 99.0;

/// PSNR in dB over [0,1]-rescaled images; inputs in [-1, 1], any matching shape.
double psnr(const torch::Tensor& x, const torch::Tensor& y);

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, valid region) over channels and
/// batch. Accepts [C,H,W] or [N,C,H,W] in [-1, 1]; H and W must be >= 11.
double ssim(const torch::Tensor& x, const torch::Tensor& y);

struct MetricReport {
    std::string label;
    std::vector<double> clip_psnr;  // mean over frames, per clip
    std::vector<double> clip_ssim;
    double psnr = 0.0;  // mean of clip_psnr
    double ssim = 0.0;
    std::vector<double> index_curve;  // per-frame-index PSNR averaged over clips

    std::string to_json() const;
};

/// Reconstructs every clip with `ae` (no grad) and scores it against the input.
MetricReport evaluate_reconstruction(Autoencoder& ae, const std::vector<ToonClip>& clips, const std::string& label);

/// Per-frame-index PSNR averaged over clips; length L.
std::vector<double> frame_index_curve(Autoencoder& ae, const std::vector<ToonClip>& clips);

}  // namespace toon
