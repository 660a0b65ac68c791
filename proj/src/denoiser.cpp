#include "toon/denoiser.hpp"

#include "toon/checkpoint.hpp"
#include "toon/errors.hpp"

namespace toon {

namespace F = torch::nn::functional;

void DenoiserConfig::validate() const {
    if (frame_count < 2) throw ParameterError("denoiser: frame_count must be >= 2");
    for (auto v : {latent_channels, base_width, num_levels, context_tokens, context_dim, text_vocab_size,
                   fps_embed_dim, heads})
        if (v <= 0) throw ParameterError("denoiser: all dimensions must be positive");
    if (context_tokens % 2 != 0) throw ParameterError("denoiser: context_tokens must be even (split over two frames)");
    if (base_width % heads != 0 || context_dim % heads != 0)
        throw ParameterError("denoiser: widths must be divisible by heads");
}

std::string group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::ICP: return "icp";
        case ParamGroup::Spatial: return "spatial";
        case ParamGroup::Temporal: return "temporal";
    }
    return "?";
}

FreezePolicy FreezePolicy::make(FreezeVariant v) {
    FreezePolicy p;
    p.variant = v;
    switch (v) {
        case FreezeVariant::I: p.train_icp = p.train_spatial = p.train_temporal = false; break;
        case FreezeVariant::II: p.train_icp = p.train_spatial = p.train_temporal = true; break;
        case FreezeVariant::III:
            p.train_icp = p.train_spatial = true;
            p.train_temporal = false;
            p.bypass_temporal = true;
            break;
        case FreezeVariant::IV:
            p.train_icp = p.train_spatial = true;
            p.train_temporal = false;
            break;
        case FreezeVariant::V:
            p.train_icp = true;
            p.train_spatial = p.train_temporal = false;
            break;
    }
    return p;
}

FreezePolicy FreezePolicy::parse(const std::string& name) {
    static const std::map<std::string, FreezeVariant> kNames{{"I", FreezeVariant::I},   {"II", FreezeVariant::II},
                                                             {"III", FreezeVariant::III}, {"IV", FreezeVariant::IV},
                                                             {"V", FreezeVariant::V}};
    auto it = kNames.find(name);
    if (it == kNames.end()) throw ConfigError("unknown freeze policy '" + name + "' (expected I..V)");
    return make(it->second);
}

bool FreezePolicy::trainable(ParamGroup g) const {
    switch (g) {
        case ParamGroup::ICP: return train_icp;
        case ParamGroup::Spatial: return train_spatial;
        case ParamGroup::Temporal: return train_temporal;
    }
    return false;
}

std::string FreezePolicy::name() const {
    static const char* kNames[] = {"I", "II", "III", "IV", "V"};
    return kNames[static_cast<int>(variant)];
}

ImageContextProjectorImpl::ImageContextProjectorImpl(std::int64_t tokens, std::int64_t dim_)
    : tokens_per_frame(tokens / 2), dim(dim_) {
    features = register_module(
        "features",
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, 32, 3).stride(2).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(32, 64, 3).stride(2).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(64, dim, 3).padding(1)), nn::SiLU(),
                       nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions(1)), nn::Flatten()));
    to_tokens = register_module("to_tokens", nn::Linear(dim, tokens_per_frame * dim));
    role_embedding = register_parameter("role_embedding", torch::randn({2, dim}) * 0.02);
}

torch::Tensor ImageContextProjectorImpl::forward(const torch::Tensor& x1, const torch::Tensor& xL) {
    if (x1.sizes() != xL.sizes()) throw ParameterError("icp: endpoint frames differ in size");
    const auto b = x1.size(0);
    auto feats = features->forward(torch::cat({x1, xL}, 0));              // [2B, D]
    auto tok = to_tokens(feats).view({2, b, tokens_per_frame, dim});     // frame-major
    tok = tok + role_embedding.view({2, 1, 1, dim});
    return torch::cat({tok[0], tok[1]}, 1);                              // [B, K, D]
}

SpatialBlockImpl::SpatialBlockImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t emb_dim,
                                   std::int64_t context_dim, std::int64_t heads) {
    res = register_module("res", ResBlock(in_ch, out_ch, emb_dim));
    self_attn = register_module("self_attn", SpatialSelfAttention(out_ch, heads));
    cross_attn = register_module("cross_attn", CrossAttention(out_ch, context_dim, heads));
}

torch::Tensor SpatialBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb,
                                        const torch::Tensor& context) {
    return cross_attn(self_attn(res(x, emb)), context);
}

TemporalBlockImpl::TemporalBlockImpl(std::int64_t channels, std::int64_t heads_) : heads(heads_) {
    norm = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({channels})));
    qkv = register_module("qkv", nn::Linear(channels, 3 * channels));
    out = register_module("out", nn::Linear(channels, channels));
    zero_parameters(*out);
}

torch::Tensor TemporalBlockImpl::forward(const torch::Tensor& x) {
    const auto b = x.size(0), l = x.size(1), c = x.size(2), h = x.size(3), w = x.size(4);
    // [B, L, C, h, w] -> [B*h*w, L, C]
    auto tokens = x.permute({0, 3, 4, 1, 2}).reshape({b * h * w, l, c});
    auto pos = sinusoidal_embedding(torch::arange(l), c).unsqueeze(0);
    auto parts = qkv(norm(tokens) + pos).chunk(3, -1);
    auto attn = out(multihead_attention(parts[0], parts[1], parts[2], heads));
    auto delta = attn.reshape({b, h, w, l, c}).permute({0, 3, 4, 1, 2});
    return x + delta;
}

SpatialTrunkImpl::SpatialTrunkImpl(const DenoiserConfig& cfg) {
    const auto emb = cfg.embed_dim();
    conv_in = register_module(
        "conv_in", nn::Conv2d(nn::Conv2dOptions(2 * cfg.latent_channels + 1, cfg.base_width, 3).padding(1)));
    time_mlp = register_module("time_mlp",
                               nn::Sequential(nn::Linear(cfg.base_width, emb), nn::SiLU(), nn::Linear(emb, emb)));
    fps_mlp = register_module("fps_mlp",
                              nn::Sequential(nn::Linear(cfg.fps_embed_dim, emb), nn::SiLU(), nn::Linear(emb, emb)));
    text_embed = register_module("text_embed", nn::Embedding(cfg.text_vocab_size, cfg.context_dim));

    std::int64_t in_ch = cfg.base_width;
    for (std::int64_t l = 0; l < cfg.num_levels; ++l) {
        const auto ch = cfg.level_width(l);
        down_blocks->push_back(SpatialBlock(in_ch, ch, emb, cfg.context_dim, cfg.heads));
        if (l + 1 < cfg.num_levels)
            downsamplers->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
        in_ch = ch;
    }
    for (std::int64_t l = cfg.num_levels - 2; l >= 0; --l) {
        const auto ch = cfg.level_width(l);
        up_convs->push_back(nn::Conv2d(nn::Conv2dOptions(cfg.level_width(l + 1), ch, 3).padding(1)));
        up_blocks->push_back(SpatialBlock(2 * ch, ch, emb, cfg.context_dim, cfg.heads));
    }
    register_module("down_blocks", down_blocks);
    register_module("downsamplers", downsamplers);
    register_module("up_convs", up_convs);
    register_module("up_blocks", up_blocks);
    out_norm = register_module("out_norm", group_norm(cfg.base_width));
    out_conv = register_module("out_conv",
                               nn::Conv2d(nn::Conv2dOptions(cfg.base_width, cfg.latent_channels, 3).padding(1)));
}

TemporalTrunkImpl::TemporalTrunkImpl(const DenoiserConfig& cfg) {
    for (std::int64_t l = 0; l < cfg.num_levels; ++l) down_blocks->push_back(TemporalBlock(cfg.level_width(l), cfg.heads));
    for (std::int64_t l = cfg.num_levels - 2; l >= 0; --l) up_blocks->push_back(TemporalBlock(cfg.level_width(l), cfg.heads));
    register_module("down_blocks", down_blocks);
    register_module("up_blocks", up_blocks);
}

namespace {

// Every parameter is assigned by its top-level submodule name.
std::map<ParamGroup, NamedParams> partition_parameters(const nn::Module& model) {
    std::map<ParamGroup, NamedParams> groups;
    for (auto g : kParamGroups) groups[g];
    for (const auto& p : model.named_parameters(true)) {
        const auto& key = p.key();
        const auto top = key.substr(0, key.find('.'));
        bool placed = false;
        for (auto g : kParamGroups) {
            if (top == group_name(g)) {
                groups[g].emplace_back(key, p.value());
                placed = true;
            }
        }
        if (!placed) throw ContractError("parameter '" + key + "' belongs to no group");
    }
    return groups;
}

}  // namespace

InterpDenoiserImpl::InterpDenoiserImpl(DenoiserConfig cfg_) : cfg(cfg_) {
    cfg.validate();
    icp = register_module("icp", ImageContextProjector(cfg.context_tokens, cfg.context_dim));
    spatial = register_module("spatial", SpatialTrunk(cfg));
    temporal = register_module("temporal", TemporalTrunk(cfg));
    std::size_t grouped = 0;
    for (const auto& [g, params] : partition_parameters(*this)) grouped += params.size();
    if (grouped != parameters().size()) throw ContractError("denoiser: parameter outside icp/spatial/temporal");
}

torch::Tensor InterpDenoiserImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t,
                                          const ConditionBundle& cond, const FreezePolicy& policy,
                                          const Injections* injections) {
    if (z_t.dim() != 5) throw ContractError("denoiser: z_t must be [B, L, C, h, w]");
    const auto b = z_t.size(0), l = z_t.size(1), c = z_t.size(2), h = z_t.size(3), w = z_t.size(4);
    if (c != cfg.latent_channels) throw ContractError("denoiser: latent channel mismatch");
    if (cond.c_img.dim() != 5 || cond.c_img.size(0) != b || cond.c_img.size(1) != l || cond.c_img.size(2) != c + 1 ||
        cond.c_img.size(3) != h || cond.c_img.size(4) != w)
        throw ContractError("denoiser: c_img shape inconsistent with z_t");
    const auto stride = std::int64_t{1} << (cfg.num_levels - 1);
    if (h % stride != 0 || w % stride != 0) throw ContractError("denoiser: latent size not divisible by level stride");
    if (injections && static_cast<std::int64_t>(injections->size()) != cfg.num_levels)
        throw ContractError("denoiser: one injection per level required");

    const auto n = b * l;
    auto per_frame = [&](const torch::Tensor& x) { return x.repeat_interleave(l, 0); };
    auto to_clip = [&](const torch::Tensor& x) { return x.view({b, l, x.size(1), x.size(2), x.size(3)}); };
    auto to_frames = [&](const torch::Tensor& x) { return x.reshape({n, x.size(2), x.size(3), x.size(4)}); };
    auto temporal_pass = [&](nn::ModuleList& blocks, std::size_t idx, const torch::Tensor& x) {
        if (policy.bypass_temporal) return x;
        return to_frames(blocks->ptr<TemporalBlockImpl>(idx)->forward(to_clip(x)));
    };

    auto emb = spatial->time_mlp->forward(sinusoidal_embedding(t, cfg.base_width)) +
               spatial->fps_mlp->forward(sinusoidal_embedding(cond.fps, cfg.fps_embed_dim));
    emb = per_frame(emb);

    auto txt = spatial->text_embed(cond.c_txt);
    if (cond.text_dropped) txt = torch::zeros_like(txt);
    auto context = per_frame(torch::cat({cond.c_ctx, txt}, 1));

    auto x = spatial->conv_in(torch::cat({z_t, cond.c_img}, 2).reshape({n, 2 * c + 1, h, w}));
    std::vector<torch::Tensor> skips;
    for (std::int64_t lvl = 0; lvl < cfg.num_levels; ++lvl) {
        const auto i = static_cast<std::size_t>(lvl);
        x = spatial->down_blocks->ptr<SpatialBlockImpl>(i)->forward(x, emb, context);
        if (injections) x = x + (*injections)[i];
        x = temporal_pass(temporal->down_blocks, i, x);
        skips.push_back(x);
        if (lvl + 1 < cfg.num_levels) x = spatial->downsamplers->ptr<nn::Conv2dImpl>(i)->forward(x);
    }
    for (std::int64_t lvl = cfg.num_levels - 2, k = 0; lvl >= 0; --lvl, ++k) {
        const auto i = static_cast<std::size_t>(k);
        x = F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
        x = spatial->up_convs->ptr<nn::Conv2dImpl>(i)->forward(x);
        x = torch::cat({x, skips[static_cast<std::size_t>(lvl)]}, 1);
        x = spatial->up_blocks->ptr<SpatialBlockImpl>(i)->forward(x, emb, context);
        x = temporal_pass(temporal->up_blocks, i, x);
    }
    auto out = spatial->out_conv(torch::silu(spatial->out_norm(x)));
    return out.view({b, l, c, h, w});
}

ConditionBundle build_condition_from_latents(const torch::Tensor& z1, const torch::Tensor& zL, std::int64_t L,
                                             const torch::Tensor& context, const torch::Tensor& caption,
                                             const torch::Tensor& fps) {
    if (L < 2) throw ParameterError("build_condition: L must be >= 2");
    if (z1.sizes() != zL.sizes()) throw ParameterError("build_condition: endpoint latents differ in size");
    const auto b = z1.size(0), c = z1.size(1), h = z1.size(2), w = z1.size(3);
    auto slots = torch::zeros({b, L, c, h, w}, z1.options());
    auto mask = torch::zeros({b, L, 1, h, w}, z1.options());
    slots.select(1, 0).copy_(z1.detach());
    slots.select(1, L - 1).copy_(zL.detach());
    mask.select(1, 0).fill_(1.0);
    mask.select(1, L - 1).fill_(1.0);
    ConditionBundle cond;
    cond.c_img = torch::cat({slots, mask}, 2);
    cond.c_ctx = context;
    cond.c_txt = caption.to(torch::kInt64);
    cond.fps = fps.to(torch::kInt64);
    if (cond.c_txt.size(0) != b || cond.fps.size(0) != b) throw ParameterError("build_condition: batch mismatch");
    if ((cond.fps <= 0).any().item<bool>()) throw ParameterError("build_condition: fps must be positive");
    return cond;
}

ConditionBundle build_condition(const torch::Tensor& x1, const torch::Tensor& xL, std::int64_t L,
                                const LatentEncoder& encode, ImageContextProjector& icp,
                                const torch::Tensor& caption, const torch::Tensor& fps) {
    if (x1.sizes() != xL.sizes()) throw ParameterError("build_condition: endpoint frames differ in size");
    if (L < 2) throw ParameterError("build_condition: L must be >= 2");
    torch::Tensor z1, zL;
    {
        torch::NoGradGuard no_grad;
        z1 = encode(x1);
        zL = encode(xL);
    }
    return build_condition_from_latents(z1, zL, L, icp(x1, xL), caption, fps);
}

std::map<ParamGroup, NamedParams> parameter_groups(const InterpDenoiser& model) {
    return partition_parameters(*model);
}

void apply_freeze_policy(InterpDenoiser& model, const FreezePolicy& policy) {
    for (auto& [g, params] : parameter_groups(model))
        for (auto& [name, p] : params) p.requires_grad_(policy.trainable(g));
}

std::string group_hash(const InterpDenoiser& model, ParamGroup g) {
    return tensors_hash(parameter_groups(model).at(g));
}

}  // namespace toon
