#pragma once

#include <torch/torch.h>

#include <functional>

namespace toon {

/// Conditioning for one batch of interpolation clips.
///
/// `c_img` is [B, L, C+1, h, w]: the endpoint latents sit in frame slots 0 and
/// L-1, interior slots are zero, and the last channel is the presence mask
/// (1 at the endpoints, 0 elsewhere). `c_ctx` holds the image-context tokens
/// [B, K, D], `c_txt` caption token ids [B, N] and `fps` [B].
struct ConditionBundle {
    torch::Tensor c_img;
    torch::Tensor c_ctx;
    torch::Tensor c_txt;
    torch::Tensor fps;
    /// Text tokens are replaced by zero vectors inside the denoiser.
    bool text_dropped = false;

    std::int64_t batch() const { return c_img.size(0); }
    std::int64_t frames() const { return c_img.size(1); }

    /// Null condition for classifier-free guidance: context and text zeroed,
    /// endpoint latents kept (they define the interpolation task).
    ConditionBundle null() const {
        ConditionBundle n = *this;
        n.c_ctx = torch::zeros_like(c_ctx);
        n.text_dropped = true;
        return n;
    }
};

/// Noise predictor eps(z_t, t, cond). `t` is an int64 tensor of shape [B].
using DenoiseFn =
    std::function<torch::Tensor(const torch::Tensor& z_t, const torch::Tensor& t, const ConditionBundle& cond)>;

}  // namespace toon
