#include "toon/autoencoder.hpp"

#include "toon/diffusion.hpp"
#include "toon/errors.hpp"

#include <cmath>

namespace toon {

namespace F = torch::nn::functional;

namespace {

torch::Tensor upsample2(const torch::Tensor& x) {
    return F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
}

nn::Conv2d conv3(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

std::string layer_key(const char* prefix, int i) { return prefix + std::to_string(i); }

}  // namespace

EncoderFeaturePyramid EncoderFeaturePyramid::slice(std::int64_t start, std::int64_t length) const {
    EncoderFeaturePyramid out;
    for (std::size_t i = 0; i < features.size(); ++i) out.features[i] = features[i].narrow(0, start, length);
    return out;
}

void AutoencoderConfig::validate() const {
    if (latent_channels <= 0 || attention_dim <= 0 || attention_heads <= 0)
        throw ParameterError("autoencoder: dimensions must be positive");
    for (auto w : widths)
        if (w <= 0) throw ParameterError("autoencoder: widths must be positive");
    if (temporal_kernel <= 0 || temporal_kernel % 2 == 0) throw ParameterError("P3D temporal kernel must be odd");
    std::set<int> all;
    for (int i : shallow_layers) all.insert(i);
    for (int i : deep_layers) {
        if (shallow_layers.count(i)) throw ParameterError("decoder: shallow and deep layer sets overlap");
        all.insert(i);
    }
    if (all != std::set<int>{1, 2, 3, 4, 5}) throw ParameterError("decoder: shallow/deep sets must cover layers 1..5");
    if (attention_dim % attention_heads != 0) throw ParameterError("decoder: attention_dim not divisible by heads");
}

std::int64_t AutoencoderConfig::layer_width(int i) const {
    if (i <= 3) return widths[2];
    if (i == 4) return widths[1];
    return widths[0];
}

std::int64_t AutoencoderConfig::layer_stride(int i) const {
    if (i <= 3) return 4;
    if (i == 4) return 2;
    return 1;
}

EncoderImpl::EncoderImpl(const AutoencoderConfig& cfg) {
    const auto [c0, c1, c2] = cfg.widths;
    conv_in = register_module("conv_in", conv3(3, c0));
    block5 = register_module("block5", ResBlock(c0, c0));
    down1 = register_module("down1", conv3(c0, c1, 2));
    block4 = register_module("block4", ResBlock(c1, c1));
    down2 = register_module("down2", conv3(c1, c2, 2));
    block3 = register_module("block3", ResBlock(c2, c2));
    block2 = register_module("block2", ResBlock(c2, c2));
    block1 = register_module("block1", ResBlock(c2, c2));
    out_norm = register_module("out_norm", group_norm(c2));
    conv_out = register_module("conv_out", conv3(c2, cfg.latent_channels));
    latent_scale = register_buffer("latent_scale", torch::ones({1}));
}

std::pair<torch::Tensor, EncoderFeaturePyramid> EncoderImpl::forward(const torch::Tensor& frames) {
    if (frames.dim() != 4 || frames.size(1) != 3) throw ContractError("encoder expects [N, 3, H, W]");
    if (frames.size(2) % AutoencoderConfig::kDownsample != 0 || frames.size(3) % AutoencoderConfig::kDownsample != 0)
        throw ParameterError("encoder: frame size must be divisible by 4");
    EncoderFeaturePyramid pyr;
    auto x = block5(conv_in(frames));
    pyr.features[4] = x;
    x = block4(down1(x));
    pyr.features[3] = x;
    x = block3(down2(x));
    pyr.features[2] = x;
    x = block2(x);
    pyr.features[1] = x;
    x = block1(x);
    pyr.features[0] = x;
    return {conv_out(torch::silu(out_norm(x))), pyr};
}

VanillaDecoderImpl::VanillaDecoderImpl(const AutoencoderConfig& cfg) {
    const auto [c0, c1, c2] = cfg.widths;
    conv_in = register_module("conv_in", conv3(cfg.latent_channels, c2));
    for (int i = 1; i <= kPyramidBlocks; ++i) layers->push_back(ResBlock(cfg.layer_width(i), cfg.layer_width(i)));
    register_module("layers", layers);
    up1 = register_module("up1", conv3(c2, c1));
    up2 = register_module("up2", conv3(c1, c0));
    out_norm = register_module("out_norm", group_norm(c0));
    conv_out = register_module("conv_out", conv3(c0, 3));
}

HARAttentionImpl::HARAttentionImpl(std::int64_t decoder_channels, std::int64_t encoder_channels_,
                                   std::int64_t attention_dim, std::int64_t heads_)
    : encoder_channels(encoder_channels_), heads(heads_) {
    w_q = register_module("w_q", nn::Linear(nn::LinearOptions(decoder_channels, attention_dim).bias(false)));
    w_k = register_module("w_k", nn::Linear(nn::LinearOptions(encoder_channels, attention_dim).bias(false)));
    w_v = register_module("w_v", nn::Linear(nn::LinearOptions(encoder_channels, attention_dim).bias(false)));
    out_proj = register_module("out_proj", nn::Linear(attention_dim, decoder_channels));
    zero_parameters(*out_proj);
}

torch::Tensor HARAttentionImpl::forward(const torch::Tensor& g_in, const torch::Tensor& f1, const torch::Tensor& fL) {
    if (g_in.dim() != 5) throw ContractError("har_attend: G_in must be [B, L, C, h, w]");
    if (f1.sizes() != fL.sizes() || f1.dim() != 4 || f1.size(1) != encoder_channels)
        throw ContractError("har_attend: endpoint feature dims do not match the layer");
    if (f1.size(0) != g_in.size(0)) throw ContractError("har_attend: batch mismatch");
    const auto b = g_in.size(0), l = g_in.size(1), c = g_in.size(2), h = g_in.size(3), w = g_in.size(4);
    auto queries = g_in.permute({0, 1, 3, 4, 2}).reshape({b * l, h * w, c});
    auto refs = torch::cat({f1.flatten(2).transpose(1, 2), fL.flatten(2).transpose(1, 2)}, 1);  // [B, 2hw', Ce]
    refs = refs.repeat_interleave(l, 0);
    auto read = multihead_attention(w_q(queries), w_k(refs), w_v(refs), heads);
    auto delta = out_proj(read).reshape({b, l, h, w, c}).permute({0, 1, 4, 2, 3});
    return g_in + delta;
}

ZeroResidualInjectorImpl::ZeroResidualInjectorImpl(std::int64_t encoder_channels, std::int64_t decoder_channels) {
    conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(encoder_channels, decoder_channels, 1)));
    zero_parameters(*conv);
}

torch::Tensor residual_inject(const torch::Tensor& g_in, const torch::Tensor& f, ZeroResidualInjector& injector,
                              std::int64_t frame_index, std::int64_t L) {
    if (frame_index != 0 && frame_index != L - 1)
        throw ContractError("residual_inject: only the first and last frame receive residual injection");
    if (f.size(2) != g_in.size(2) || f.size(3) != g_in.size(3))
        throw ContractError("residual_inject: feature resolution mismatch");
    return injector(f) + g_in;
}

std::int64_t reflect_index(std::int64_t i, std::int64_t L) {
    if (L == 1) return 0;
    const auto period = 2 * (L - 1);
    auto m = i % period;
    if (m < 0) m += period;
    return m < L ? m : period - m;
}

P3DConvImpl::P3DConvImpl(std::int64_t channels, std::int64_t kernel_) : kernel(kernel_) {
    if (kernel <= 0 || kernel % 2 == 0) throw ParameterError("P3D: temporal kernel must be odd");
    auto w = torch::zeros({kernel, channels, channels});
    w[kernel / 2] = torch::eye(channels);
    weight = register_parameter("weight", w);
}

torch::Tensor P3DConvImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 5) throw ContractError("P3D expects [B, L, C, h, w]");
    if (x.size(2) != weight.size(2)) throw ContractError("P3D: channel mismatch");
    const auto L = x.size(1);
    if (L == 1) return x;  // no temporal neighbours to propagate from
    torch::Tensor out;
    for (std::int64_t k = 0; k < kernel; ++k) {
        const auto offset = k - kernel / 2;
        std::vector<std::int64_t> idx(static_cast<std::size_t>(L));
        for (std::int64_t t = 0; t < L; ++t) idx[static_cast<std::size_t>(t)] = reflect_index(t + offset, L);
        auto shifted = x.index_select(1, torch::tensor(idx, torch::kInt64));
        // Channel mixing as a matmul over the channel axis.
        auto term = torch::matmul(shifted.movedim(2, -1), weight[k].t()).movedim(-1, 2);
        out = out.defined() ? out + term : term;
    }
    return out;
}

std::string DecoderVariant::label() const {
    if (har && p3d) return "full";
    if (har) return "wo_p3d";
    if (p3d) return "wo_har";
    return "wo_har_p3d";
}

DualRefDecoderImpl::DualRefDecoderImpl(const AutoencoderConfig& cfg_, DecoderVariant variant_)
    : cfg(cfg_), variant(variant_) {
    cfg.validate();
    vanilla = register_module("vanilla", VanillaDecoder(cfg));
    torch::OrderedDict<std::string, std::shared_ptr<nn::Module>> har_modules;
    for (int i : cfg.shallow_layers)
        har_modules.insert(layer_key("attn", i),
                           HARAttention(cfg.layer_width(i), cfg.layer_width(i), cfg.attention_dim, cfg.attention_heads)
                               .ptr());
    for (int i : cfg.deep_layers)
        har_modules.insert(layer_key("inject", i), ZeroResidualInjector(cfg.layer_width(i), cfg.layer_width(i)).ptr());
    har = register_module("har", nn::ModuleDict(har_modules));

    torch::OrderedDict<std::string, std::shared_ptr<nn::Module>> p3d_modules;
    p3d_modules.insert("level1", P3DConv(cfg.layer_width(3), cfg.temporal_kernel).ptr());
    p3d_modules.insert("level2", P3DConv(cfg.layer_width(4), cfg.temporal_kernel).ptr());
    p3d_modules.insert("level3", P3DConv(cfg.layer_width(5), cfg.temporal_kernel).ptr());
    p3d = register_module("p3d", nn::ModuleDict(p3d_modules));
}

torch::Tensor DualRefDecoderImpl::forward(const torch::Tensor& latents, const EncoderFeaturePyramid& pyr1,
                                          const EncoderFeaturePyramid& pyrL) {
    if (latents.dim() != 5 || latents.size(2) != cfg.latent_channels)
        throw ContractError("decoder expects latents [B, L, C, h, w]");
    const auto b = latents.size(0), L = latents.size(1), h = latents.size(3), w = latents.size(4);
    const auto n = b * L;
    const auto full_h = h * AutoencoderConfig::kDownsample, full_w = w * AutoencoderConfig::kDownsample;

    if (variant.har) {
        for (int i = 1; i <= kPyramidBlocks; ++i) {
            const auto& f1 = pyr1.block(i);
            const auto& fL = pyrL.block(i);
            const auto s = cfg.layer_stride(i);
            if (!f1.defined() || !fL.defined() || f1.size(0) != b || f1.size(2) * s != full_h ||
                f1.size(3) * s != full_w || fL.sizes() != f1.sizes())
                throw ParameterError("decode: reference pyramid does not match latent resolution");
        }
    }

    auto as_clip = [&](const torch::Tensor& x) { return x.view({b, L, x.size(1), x.size(2), x.size(3)}); };
    auto as_frames = [&](const torch::Tensor& x) { return x.reshape({n, x.size(2), x.size(3), x.size(4)}).contiguous(); };

    auto x = vanilla->conv_in(latents.reshape({n, latents.size(2), h, w}));
    for (int i = 1; i <= kPyramidBlocks; ++i) {
        if (i == 4) x = vanilla->up1(upsample2(x));
        if (i == 5) x = vanilla->up2(upsample2(x));
        x = vanilla->layers->ptr<ResBlockImpl>(static_cast<std::size_t>(i - 1))->forward(x);

        if (variant.har && cfg.shallow_layers.count(i)) {
            auto attn = har[layer_key("attn", i)]->as<HARAttentionImpl>();
            x = as_frames(attn->forward(as_clip(x), pyr1.block(i), pyrL.block(i)));
        }
        if (variant.har && cfg.deep_layers.count(i)) {
            auto injector = ZeroResidualInjector(
                std::dynamic_pointer_cast<ZeroResidualInjectorImpl>(har[layer_key("inject", i)]));
            auto clip = as_clip(x);
            std::vector<torch::Tensor> frames = clip.unbind(1);
            frames.front() = residual_inject(frames.front(), pyr1.block(i), injector, 0, L);
            if (L > 1) frames.back() = residual_inject(frames.back(), pyrL.block(i), injector, L - 1, L);
            x = as_frames(torch::stack(frames, 1));
        }
        if (variant.p3d && i >= 3) {
            auto conv = p3d[layer_key("level", i - 2)]->as<P3DConvImpl>();
            x = as_frames(conv->forward(as_clip(x)));
        }
    }
    auto out = vanilla->conv_out(torch::silu(vanilla->out_norm(x)));
    return out.view({b, L, 3, out.size(2), out.size(3)});
}

AutoencoderImpl::AutoencoderImpl(const AutoencoderConfig& cfg_, DecoderVariant variant) : cfg(cfg_) {
    cfg.validate();
    encoder = register_module("encoder", Encoder(cfg));
    decoder = register_module("decoder", DualRefDecoder(cfg, variant));
}

AutoencoderImpl::Encoded AutoencoderImpl::encode_clip(const torch::Tensor& frames) {
    if (frames.dim() != 5 || frames.size(2) != 3) throw ContractError("encode_clip expects [B, L, 3, H, W]");
    const auto b = frames.size(0), L = frames.size(1);
    auto [lat, pyr] = encoder->forward(frames.reshape({b * L, 3, frames.size(3), frames.size(4)}));
    Encoded out;
    out.latents = lat.view({b, L, lat.size(1), lat.size(2), lat.size(3)});
    for (std::size_t i = 0; i < pyr.features.size(); ++i) {
        auto f = pyr.features[i];
        auto clip = f.view({b, L, f.size(1), f.size(2), f.size(3)});
        out.first.features[i] = clip.select(1, 0);
        out.last.features[i] = clip.select(1, L - 1);
    }
    return out;
}

EncoderFeaturePyramid AutoencoderImpl::pyramid(const torch::Tensor& frame) { return encoder->forward(frame).second; }

torch::Tensor AutoencoderImpl::reconstruct(const torch::Tensor& frames) {
    auto enc = encode_clip(frames);
    return decoder->forward(enc.latents, enc.first, enc.last);
}

void AutoencoderImpl::save_to(TensorArchive& archive) const {
    export_module(*encoder, "encoder/", archive);
    export_module(*decoder->vanilla, "decoder_vanilla/", archive);
    if (decoder->variant.har) export_module(*decoder->har, "decoder_har/", archive);
    if (decoder->variant.p3d) export_module(*decoder->p3d, "decoder_p3d/", archive);
}

void AutoencoderImpl::load_from(const TensorArchive& archive) {
    import_module(*encoder, "encoder/", archive);
    import_module(*decoder->vanilla, "decoder_vanilla/", archive);
    if (decoder->variant.har && archive.has_section("decoder_har/")) import_module(*decoder->har, "decoder_har/", archive);
    if (decoder->variant.p3d && archive.has_section("decoder_p3d/")) import_module(*decoder->p3d, "decoder_p3d/", archive);
}

RandomFeaturePerceptual::RandomFeaturePerceptual(std::uint64_t seed) {
    auto gen = make_generator(seed);
    const std::vector<std::array<std::int64_t, 3>> layers{{3, 16, 1}, {16, 32, 2}, {32, 64, 2}};
    for (const auto& [in, out, stride] : layers) {
        weights_.push_back(torch::randn({out, in, 3, 3}, gen, torch::kFloat32) * std::sqrt(2.0 / (9.0 * in)));
        strides_.push_back(stride);
    }
}

torch::Tensor RandomFeaturePerceptual::distance(const torch::Tensor& x, const torch::Tensor& y) {
    auto fx = x, fy = y;
    torch::Tensor total;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
        auto opts = F::Conv2dFuncOptions().stride(strides_[i]).padding(1);
        fx = torch::relu(F::conv2d(fx, weights_[i], opts));
        fy = torch::relu(F::conv2d(fy, weights_[i], opts));
        auto nx = fx / (fx.pow(2).sum(1, true).sqrt() + 1e-10);
        auto ny = fy / (fy.pow(2).sum(1, true).sqrt() + 1e-10);
        auto d = (nx - ny).pow(2).sum(1).mean();
        total = total.defined() ? total + d : d;
    }
    return total;
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(std::int64_t width) {
    net = register_module(
        "net", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, width, 4).stride(2).padding(1)),
                              nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                              nn::Conv2d(nn::Conv2dOptions(width, 2 * width, 4).stride(2).padding(1)),
                              group_norm(2 * width), nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                              nn::Conv2d(nn::Conv2dOptions(2 * width, 1, 3).padding(1))));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& frames) { return net->forward(frames); }

torch::Tensor adaptive_adversarial_weight(const torch::Tensor& rec_loss, const torch::Tensor& adv_loss,
                                          const torch::Tensor& last_layer) {
    auto rec_grad = torch::autograd::grad({rec_loss}, {last_layer}, {}, /*retain_graph=*/true)[0];
    auto adv_grad = torch::autograd::grad({adv_loss}, {last_layer}, {}, /*retain_graph=*/true)[0];
    auto weight = rec_grad.norm() / (adv_grad.norm() + 1e-4);
    return weight.clamp(0.0, 1e4).detach();
}

CompoundLoss compound_loss(const torch::Tensor& x, const torch::Tensor& x_hat, PerceptualLoss& perceptual,
                           PatchDiscriminator& disc, const torch::Tensor& last_layer, bool adversarial_active) {
    if (x.sizes() != x_hat.sizes()) throw ContractError("compound_loss: shape mismatch");
    auto flat = [](const torch::Tensor& t) { return t.reshape({-1, 3, t.size(-2), t.size(-1)}); };
    auto l1 = (x - x_hat).abs().mean();
    auto lp = perceptual.distance(flat(x_hat), flat(x));
    auto rec = l1 + kPerceptualWeight * lp;

    CompoundLoss out;
    out.l1 = l1.item<double>();
    out.perceptual = lp.item<double>();
    if (!adversarial_active) {
        out.total = rec;
        return out;
    }
    auto adv = -disc(flat(x_hat)).mean();
    auto lambda = adaptive_adversarial_weight(rec, adv, last_layer);
    out.total = rec + lambda * adv;
    out.adversarial = adv.item<double>();
    out.lambda_d = lambda.item<double>();
    return out;
}

torch::Tensor discriminator_hinge_loss(PatchDiscriminator& disc, const torch::Tensor& real, const torch::Tensor& fake) {
    auto flat = [](const torch::Tensor& t) { return t.reshape({-1, 3, t.size(-2), t.size(-1)}); };
    return torch::relu(1.0 - disc(flat(real))).mean() + torch::relu(1.0 + disc(flat(fake.detach()))).mean();
}

}  // namespace toon
