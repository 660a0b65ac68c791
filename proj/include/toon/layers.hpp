#pragma once

// Building blocks shared by the autoencoder, the denoiser and the sketch adapter.

#include <torch/torch.h>

#include <cstdint>

namespace toon {

namespace nn = torch::nn;

/// Largest group count <= 8 that divides `channels`.
std::int64_t norm_groups(std::int64_t channels);

nn::GroupNorm group_norm(std::int64_t channels);

/// Sinusoidal features of `values` ([B], any numeric dtype) -> [B, dim].
torch::Tensor sinusoidal_embedding(const torch::Tensor& values, std::int64_t dim);

/// Multi-head scaled dot-product attention. q: [N, Tq, d], k: [N, Tk, d], v: [N, Tk, dv].
torch::Tensor multihead_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                  std::int64_t heads);

/// Zero every parameter of a module (ZeroConv / zero output projections).
void zero_parameters(nn::Module& module);

// GroupNorm -> SiLU -> conv3x3, twice, plus an optional additive embedding
// projection and a 1x1 skip when channel counts differ.
struct ResBlockImpl : nn::Module {
    ResBlockImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t emb_dim = 0);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb = {});

    nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
    nn::Linear emb_proj{nullptr};
};
TORCH_MODULE(ResBlock);

// Self-attention over the spatial positions of each image, residual.
struct SpatialSelfAttentionImpl : nn::Module {
    SpatialSelfAttentionImpl(std::int64_t channels, std::int64_t heads);
    torch::Tensor forward(const torch::Tensor& x);

    std::int64_t heads;
    nn::GroupNorm norm{nullptr};
    nn::Linear qkv{nullptr}, out{nullptr};
};
TORCH_MODULE(SpatialSelfAttention);

// Cross-attention from spatial positions to a token sequence, residual.
struct CrossAttentionImpl : nn::Module {
    CrossAttentionImpl(std::int64_t channels, std::int64_t context_dim, std::int64_t heads);
    /// x: [N, C, h, w]; context: [N, T, D].
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

    std::int64_t heads;
    nn::GroupNorm norm{nullptr};
    nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, out{nullptr};
};
TORCH_MODULE(CrossAttention);

}  // namespace toon
