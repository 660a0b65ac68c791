#include "toon/metrics.hpp"

#include "toon/errors.hpp"

#include <json.hpp>

#include <cmath>

namespace toon {

namespace {

torch::Tensor unit_range(const torch::Tensor& x) { return ((x.to(torch::kFloat64) + 1.0) / 2.0).clamp(0.0, 1.0); }

void check_pair(const torch::Tensor& x, const torch::Tensor& y, const char* what) {
    if (x.sizes() != y.sizes()) throw ParameterError(std::string(what) + ": shape mismatch");
    if (x.numel() == 0) throw ParameterError(std::string(what) + ": empty input");
}

torch::Tensor gaussian_window(std::int64_t size, double sigma) {
    auto r = torch::arange(size, torch::kFloat64) - static_cast<double>(size - 1) / 2.0;
    auto g = torch::exp(-r.pow(2) / (2.0 * sigma * sigma));
    g = g / g.sum();
    return torch::outer(g, g);
}

std::vector<double> per_frame_psnr(const torch::Tensor& a, const torch::Tensor& b) {
    std::vector<double> out;
    for (std::int64_t k = 0; k < a.size(0); ++k) out.push_back(psnr(a[k], b[k]));
    return out;
}

}  // namespace

double psnr(const torch::Tensor& x, const torch::Tensor& y) {
    check_pair(x, y, "psnr");
    const double mse = (unit_range(x) - unit_range(y)).pow(2).mean().item<double>();
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const torch::Tensor& x, const torch::Tensor& y) {
    check_pair(x, y, "ssim");
    auto a = unit_range(x), b = unit_range(y);
    if (a.dim() == 3) {
        a = a.unsqueeze(0);
        b = b.unsqueeze(0);
    }
    if (a.dim() != 4) throw ParameterError("ssim: expected [C,H,W] or [N,C,H,W]");
    constexpr std::int64_t kWindow = 11;
    if (a.size(2) < kWindow || a.size(3) < kWindow) throw ParameterError("ssim: image smaller than the 11x11 window");
    a = a.reshape({-1, 1, a.size(2), a.size(3)});
    b = b.reshape({-1, 1, b.size(2), b.size(3)});
    auto w = gaussian_window(kWindow, 1.5).view({1, 1, kWindow, kWindow});
    auto filt = [&](const torch::Tensor& t) { return torch::conv2d(t, w); };
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    auto mu_a = filt(a), mu_b = filt(b);
    auto var_a = filt(a * a) - mu_a.pow(2);
    auto var_b = filt(b * b) - mu_b.pow(2);
    auto cov = filt(a * b) - mu_a * mu_b;
    auto map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a.pow(2) + mu_b.pow(2) + c1) * (var_a + var_b + c2));
    return map.mean().item<double>();
}

std::string MetricReport::to_json() const {
    nlohmann::json j{{"label", label}, {"psnr", psnr},           {"ssim", ssim},
                     {"clip_psnr", clip_psnr}, {"clip_ssim", clip_ssim}, {"index_curve", index_curve}};
    return j.dump(2);
}

MetricReport evaluate_reconstruction(Autoencoder& ae, const std::vector<ToonClip>& clips, const std::string& label) {
    if (clips.empty()) throw ParameterError("evaluate_reconstruction: no clips");
    torch::NoGradGuard no_grad;
    MetricReport r;
    r.label = label;
    const auto L = clips.front().length();
    r.index_curve.assign(static_cast<std::size_t>(L), 0.0);
    for (const auto& clip : clips) {
        if (clip.length() != L) throw ParameterError("evaluate_reconstruction: clips differ in length");
        auto rec = ae->reconstruct(clip.frames.unsqueeze(0)).squeeze(0);
        auto frames = per_frame_psnr(rec, clip.frames);
        double mean = 0.0;
        for (std::size_t k = 0; k < frames.size(); ++k) {
            r.index_curve[k] += frames[k] / static_cast<double>(clips.size());
            mean += frames[k] / static_cast<double>(frames.size());
        }
        r.clip_psnr.push_back(mean);
        r.clip_ssim.push_back(ssim(rec, clip.frames));
    }
    for (auto v : r.clip_psnr) r.psnr += v / static_cast<double>(r.clip_psnr.size());
    for (auto v : r.clip_ssim) r.ssim += v / static_cast<double>(r.clip_ssim.size());
    return r;
}

std::vector<double> frame_index_curve(Autoencoder& ae, const std::vector<ToonClip>& clips) {
    return evaluate_reconstruction(ae, clips, "curve").index_curve;
}

}  // namespace toon
