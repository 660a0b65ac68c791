#pragma once

// Miniature image-to-video interpolation denoiser.
//
// Parameters live in exactly three top-level submodules, which are also the
// freeze-policy groups and the checkpoint sections:
//   icp/       image-context projector (endpoint frames -> context tokens)
//   spatial/   per-frame U-Net path: convs, self/cross attention, embeddings
//   temporal/  attention across the frame axis at every level

#include "toon/condition.hpp"
#include "toon/layers.hpp"

#include <torch/torch.h>

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace toon {

struct DenoiserConfig {
    std::int64_t frame_count = 16;
    std::int64_t latent_channels = 4;
    std::int64_t base_width = 64;
    std::int64_t num_levels = 2;
    std::int64_t context_tokens = 4;
    std::int64_t context_dim = 64;
    std::int64_t text_vocab_size = 64;
    std::int64_t fps_embed_dim = 64;
    std::int64_t heads = 4;

    std::int64_t level_width(std::int64_t level) const { return base_width << level; }
    std::int64_t embed_dim() const { return 2 * base_width; }
    void validate() const;
};

enum class ParamGroup { ICP, Spatial, Temporal };
inline constexpr std::array<ParamGroup, 3> kParamGroups{ParamGroup::ICP, ParamGroup::Spatial, ParamGroup::Temporal};
std::string group_name(ParamGroup g);

enum class FreezeVariant { I, II, III, IV, V };

/// Which groups a rectification variant fine-tunes.
///   I   nothing (pretrained model as-is)
///   II  ICP + spatial + temporal
///   III ICP + spatial, temporal layers bypassed in the forward pass
///   IV  ICP + spatial, temporal frozen (the rectification strategy)
///   V   ICP only
struct FreezePolicy {
    FreezeVariant variant = FreezeVariant::IV;
    bool train_icp = true;
    bool train_spatial = true;
    bool train_temporal = false;
    bool bypass_temporal = false;

    static FreezePolicy make(FreezeVariant v);
    static FreezePolicy parse(const std::string& name);  // "I".."V"
    bool trainable(ParamGroup g) const;
    std::string name() const;
};

/// Eval-time policy: nothing bypassed.
inline FreezePolicy inference_policy() { return FreezePolicy::make(FreezeVariant::I); }

// Conv encoder over the two endpoint frames producing K context tokens
// (K/2 per frame plus a learned first/last role embedding).
struct ImageContextProjectorImpl : nn::Module {
    ImageContextProjectorImpl(std::int64_t tokens, std::int64_t dim);
    torch::Tensor forward(const torch::Tensor& x1, const torch::Tensor& xL);

    std::int64_t tokens_per_frame, dim;
    nn::Sequential features{nullptr};
    nn::Linear to_tokens{nullptr};
    torch::Tensor role_embedding;
};
TORCH_MODULE(ImageContextProjector);

struct SpatialBlockImpl : nn::Module {
    SpatialBlockImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t emb_dim, std::int64_t context_dim,
                     std::int64_t heads);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb, const torch::Tensor& context);

    ResBlock res{nullptr};
    SpatialSelfAttention self_attn{nullptr};
    CrossAttention cross_attn{nullptr};
};
TORCH_MODULE(SpatialBlock);

// Attention across the L axis independently at every spatial location.
// The output projection starts at zero, so a fresh block is the identity.
struct TemporalBlockImpl : nn::Module {
    TemporalBlockImpl(std::int64_t channels, std::int64_t heads);
    /// x: [B, L, C, h, w]
    torch::Tensor forward(const torch::Tensor& x);

    std::int64_t heads;
    nn::LayerNorm norm{nullptr};
    nn::Linear qkv{nullptr}, out{nullptr};
};
TORCH_MODULE(TemporalBlock);

struct SpatialTrunkImpl : nn::Module {
    explicit SpatialTrunkImpl(const DenoiserConfig& cfg);

    nn::Conv2d conv_in{nullptr};
    nn::Sequential time_mlp{nullptr}, fps_mlp{nullptr};
    nn::Embedding text_embed{nullptr};
    nn::ModuleList down_blocks, downsamplers, up_convs, up_blocks;
    nn::GroupNorm out_norm{nullptr};
    nn::Conv2d out_conv{nullptr};
};
TORCH_MODULE(SpatialTrunk);

struct TemporalTrunkImpl : nn::Module {
    explicit TemporalTrunkImpl(const DenoiserConfig& cfg);

    nn::ModuleList down_blocks, up_blocks;
};
TORCH_MODULE(TemporalTrunk);

/// Per-level additive feature injections, each [B*L, level_width(l), h_l, w_l].
using Injections = std::vector<torch::Tensor>;

struct InterpDenoiserImpl : nn::Module {
    explicit InterpDenoiserImpl(DenoiserConfig cfg);

    /// z_t: [B, L, C, h, w]; t: [B]. Returns the noise prediction, shape of z_t.
    torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t, const ConditionBundle& cond,
                          const FreezePolicy& policy = inference_policy(), const Injections* injections = nullptr);

    DenoiserConfig cfg;
    ImageContextProjector icp{nullptr};
    SpatialTrunk spatial{nullptr};
    TemporalTrunk temporal{nullptr};
};
TORCH_MODULE(InterpDenoiser);

/// Encodes pixel frames [N, 3, H, W] to latents [N, C, h, w].
using LatentEncoder = std::function<torch::Tensor(const torch::Tensor&)>;

/// Assembles the conditioning for interpolating between x1 and xL ([B, 3, H, W]).
ConditionBundle build_condition(const torch::Tensor& x1, const torch::Tensor& xL, std::int64_t L,
                                const LatentEncoder& encode, ImageContextProjector& icp,
                                const torch::Tensor& caption, const torch::Tensor& fps);

/// Same, when the endpoint latents are already available ([B, C, h, w] each).
ConditionBundle build_condition_from_latents(const torch::Tensor& z1, const torch::Tensor& zL, std::int64_t L,
                                             const torch::Tensor& context, const torch::Tensor& caption,
                                             const torch::Tensor& fps);

using NamedParams = std::vector<std::pair<std::string, torch::Tensor>>;

/// Partition of every parameter into ICP / Spatial / Temporal by top-level submodule.
/// Throws ContractError if a parameter falls outside the three groups.
std::map<ParamGroup, NamedParams> parameter_groups(const InterpDenoiser& model);

void apply_freeze_policy(InterpDenoiser& model, const FreezePolicy& policy);

/// SHA-1 over one group's parameter names and values.
std::string group_hash(const InterpDenoiser& model, ParamGroup g);

}  // namespace toon
