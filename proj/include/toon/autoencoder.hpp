#pragma once

// Continuous-latent autoencoder with a dual-reference decoder.
//
// The encoder has five residual blocks; block i (counted from the end of the
// encoder) yields feature F_i, which pairs with decoder layer i at the same
// resolution. Decoder layer 1 is the lowest-resolution block.
//
// Detail injection from the two endpoint frames x^1 and x^L:
//   shallow layers (default {1,2}): cross-frame attention, every frame queries
//       the concatenated endpoint features [F_i^1; F_i^L]
//   deep layers (default {3,4,5}): ZeroConv(F_i^1) added to frame 1 and
//       ZeroConv(F_i^L) added to frame L only
//   P3D: a temporal convolution after each decoder resolution level
// All injected parts start as exact identities, so a fresh dual-reference
// decoder reproduces the vanilla decoder it was initialised from.

#include "toon/checkpoint.hpp"
#include "toon/layers.hpp"

#include <torch/torch.h>

#include <array>
#include <memory>
#include <set>
#include <string>

namespace toon {

inline constexpr int kPyramidBlocks = 5;

/// features[i-1] holds F_i, shaped [B, C_i, h_i, w_i].
struct EncoderFeaturePyramid {
    std::array<torch::Tensor, kPyramidBlocks> features;

    const torch::Tensor& block(int i) const { return features.at(static_cast<std::size_t>(i - 1)); }
    /// Pyramid of one batch element, keeping the batch dimension.
    EncoderFeaturePyramid slice(std::int64_t start, std::int64_t length) const;
};

struct AutoencoderConfig {
    std::int64_t latent_channels = 4;
    /// Channel widths at full, half and quarter resolution.
    std::array<std::int64_t, 3> widths{16, 32, 48};
    std::int64_t attention_dim = 32;
    std::int64_t attention_heads = 1;
    std::set<int> shallow_layers{1, 2};
    std::set<int> deep_layers{3, 4, 5};
    std::int64_t temporal_kernel = 3;

    static constexpr std::int64_t kDownsample = 4;
    void validate() const;
    /// Channel width of encoder block / decoder layer i.
    std::int64_t layer_width(int i) const;
    /// Downsampling of layer i relative to the frame (4, 4, 4, 2, 1).
    std::int64_t layer_stride(int i) const;
};

struct EncoderImpl : nn::Module {
    explicit EncoderImpl(const AutoencoderConfig& cfg);
    /// frames [N, 3, H, W] -> latent [N, C, H/4, W/4] and the feature pyramid.
    std::pair<torch::Tensor, EncoderFeaturePyramid> forward(const torch::Tensor& frames);

    nn::Conv2d conv_in{nullptr}, down1{nullptr}, down2{nullptr}, conv_out{nullptr};
    ResBlock block5{nullptr}, block4{nullptr}, block3{nullptr}, block2{nullptr}, block1{nullptr};
    nn::GroupNorm out_norm{nullptr};
    /// Multiplier taking encoder output to unit-scale diffusion latents.
    torch::Tensor latent_scale;
};
TORCH_MODULE(Encoder);

struct VanillaDecoderImpl : nn::Module {
    explicit VanillaDecoderImpl(const AutoencoderConfig& cfg);

    nn::Conv2d conv_in{nullptr}, up1{nullptr}, up2{nullptr}, conv_out{nullptr};
    nn::ModuleList layers;  // decoder layers 1..5
    nn::GroupNorm out_norm{nullptr};
};
TORCH_MODULE(VanillaDecoder);

/// Cross-frame attention: G_out = G_in + out_proj(Softmax(Q K^T / sqrt(d)) V) with
/// Q = G_in W_Q and K, V from [F^1; F^L]. out_proj starts at zero.
struct HARAttentionImpl : nn::Module {
    HARAttentionImpl(std::int64_t decoder_channels, std::int64_t encoder_channels, std::int64_t attention_dim,
                     std::int64_t heads);
    /// g_in: [B, L, C, h, w]; f1, fL: [B, C_enc, h, w].
    torch::Tensor forward(const torch::Tensor& g_in, const torch::Tensor& f1, const torch::Tensor& fL);

    std::int64_t encoder_channels, heads;
    nn::Linear w_q{nullptr}, w_k{nullptr}, w_v{nullptr}, out_proj{nullptr};
};
TORCH_MODULE(HARAttention);

/// 1x1 convolution from encoder to decoder width, weights and bias start at zero.
struct ZeroResidualInjectorImpl : nn::Module {
    ZeroResidualInjectorImpl(std::int64_t encoder_channels, std::int64_t decoder_channels);
    torch::Tensor forward(const torch::Tensor& f) { return conv(f); }

    nn::Conv2d conv{nullptr};
};
TORCH_MODULE(ZeroResidualInjector);

/// G_out = ZeroConv(F) + G_in for an endpoint frame. `frame_index` is 0-based;
/// anything other than 0 or L-1 is a contract violation.
torch::Tensor residual_inject(const torch::Tensor& g_in, const torch::Tensor& f, ZeroResidualInjector& injector,
                              std::int64_t frame_index, std::int64_t L);

/// Pseudo-3D temporal convolution mixing channels across neighbouring frames,
/// reflect padding at the clip boundaries, no bias (linear), centre-tap identity init.
struct P3DConvImpl : nn::Module {
    P3DConvImpl(std::int64_t channels, std::int64_t kernel);
    /// x: [B, L, C, h, w]
    torch::Tensor forward(const torch::Tensor& x);

    std::int64_t kernel;
    torch::Tensor weight;  // [kernel, C_out, C_in]
};
TORCH_MODULE(P3DConv);

/// Reflect index into [0, L) (e.g. -1 -> 1, L -> L-2).
std::int64_t reflect_index(std::int64_t i, std::int64_t L);

struct DecoderVariant {
    bool har = true;
    bool p3d = true;
    std::string label() const;
    static DecoderVariant full() { return {true, true}; }
    static DecoderVariant without_p3d() { return {true, false}; }
    static DecoderVariant vanilla() { return {false, false}; }
};

struct DualRefDecoderImpl : nn::Module {
    DualRefDecoderImpl(const AutoencoderConfig& cfg, DecoderVariant variant);

    /// latents [B, L, C, h, w] (raw encoder scale) -> frames [B, L, 3, H, W].
    /// Pyramids come from the endpoint frames; unused when HAR is off.
    torch::Tensor forward(const torch::Tensor& latents, const EncoderFeaturePyramid& pyr1,
                          const EncoderFeaturePyramid& pyrL);

    /// Weight of the final convolution, used for the adaptive adversarial weight.
    torch::Tensor last_layer_weight() const { return vanilla->conv_out->weight; }

    AutoencoderConfig cfg;
    DecoderVariant variant;
    VanillaDecoder vanilla{nullptr};
    nn::ModuleDict har{nullptr};  // "attn<i>" for shallow i, "inject<i>" for deep i
    nn::ModuleDict p3d{nullptr};  // "level1".."level3"
};
TORCH_MODULE(DualRefDecoder);

struct AutoencoderImpl : nn::Module {
    AutoencoderImpl(const AutoencoderConfig& cfg, DecoderVariant variant);

    /// frames [B, L, 3, H, W] -> raw latents [B, L, C, h, w] and endpoint pyramids.
    struct Encoded {
        torch::Tensor latents;
        EncoderFeaturePyramid first, last;
    };
    Encoded encode_clip(const torch::Tensor& frames);
    /// Endpoint pyramids only, from [B, 3, H, W] frames.
    EncoderFeaturePyramid pyramid(const torch::Tensor& frame);
    torch::Tensor reconstruct(const torch::Tensor& frames);

    torch::Tensor to_diffusion(const torch::Tensor& raw) const { return raw * encoder->latent_scale; }
    torch::Tensor from_diffusion(const torch::Tensor& z) const { return z / encoder->latent_scale; }

    /// Checkpoint sections: encoder/, decoder_vanilla/, decoder_har/, decoder_p3d/.
    void save_to(TensorArchive& archive) const;
    /// Loads whatever sections the variant needs; missing optional sections
    /// leave the fresh identity-initialised parameters in place.
    void load_from(const TensorArchive& archive);

    AutoencoderConfig cfg;
    Encoder encoder{nullptr};
    DualRefDecoder decoder{nullptr};
};
TORCH_MODULE(Autoencoder);

/// Pluggable perceptual distance (LPIPS-shaped interface).
class PerceptualLoss {
public:
    virtual ~PerceptualLoss() = default;
    /// Mean distance over the batch; frames [N, 3, H, W].
    virtual torch::Tensor distance(const torch::Tensor& x, const torch::Tensor& y) = 0;
};

/// Fixed, seeded random conv features with channel-normalised squared differences.
class RandomFeaturePerceptual final : public PerceptualLoss {
public:
    explicit RandomFeaturePerceptual(std::uint64_t seed = 7);
    torch::Tensor distance(const torch::Tensor& x, const torch::Tensor& y) override;

private:
    std::vector<torch::Tensor> weights_;
    std::vector<std::int64_t> strides_;
};

/// Three-layer patch discriminator, hinge objective.
struct PatchDiscriminatorImpl : nn::Module {
    explicit PatchDiscriminatorImpl(std::int64_t width = 16);
    torch::Tensor forward(const torch::Tensor& frames);

    nn::Sequential net{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

struct CompoundLoss {
    torch::Tensor total;
    double l1 = 0.0;
    double perceptual = 0.0;
    double adversarial = 0.0;
    double lambda_d = 0.0;
};

inline constexpr double kPerceptualWeight = 0.1;

/// ||grad L_rec|| / (||grad L_adv|| + 1e-4) at `last_layer`, clamped to [0, 1e4], detached.
torch::Tensor adaptive_adversarial_weight(const torch::Tensor& rec_loss, const torch::Tensor& adv_loss,
                                          const torch::Tensor& last_layer);

/// L1 + 0.1 L_p + lambda_d L_adv. With `adversarial_active` false the
/// discriminator is not evaluated and lambda_d is 0.
CompoundLoss compound_loss(const torch::Tensor& x, const torch::Tensor& x_hat, PerceptualLoss& perceptual,
                           PatchDiscriminator& disc, const torch::Tensor& last_layer, bool adversarial_active);

/// Hinge loss for the discriminator update.
torch::Tensor discriminator_hinge_loss(PatchDiscriminator& disc, const torch::Tensor& real, const torch::Tensor& fake);

}  // namespace toon
