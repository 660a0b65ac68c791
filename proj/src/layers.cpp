#include "toon/layers.hpp"

#include "toon/errors.hpp"

#include <cmath>

namespace toon {

std::int64_t norm_groups(std::int64_t channels) {
    for (std::int64_t g = 8; g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

nn::GroupNorm group_norm(std::int64_t channels) {
    return nn::GroupNorm(nn::GroupNormOptions(norm_groups(channels), channels));
}

torch::Tensor sinusoidal_embedding(const torch::Tensor& values, std::int64_t dim) {
    const auto half = dim / 2;
    auto v = values.to(torch::kFloat32).unsqueeze(1);
    auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / static_cast<double>(half));
    auto args = v * freqs.unsqueeze(0);
    auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
    if (dim % 2 == 1) emb = torch::nn::functional::pad(emb, torch::nn::functional::PadFuncOptions({0, 1}));
    return emb;
}

torch::Tensor multihead_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                  std::int64_t heads) {
    if (q.size(-1) != k.size(-1)) throw ContractError("attention: query/key width mismatch");
    if (k.size(1) != v.size(1)) throw ContractError("attention: key/value length mismatch");
    const auto n = q.size(0);
    const auto dq = q.size(2) / heads;
    const auto dv = v.size(2) / heads;
    auto split = [&](const torch::Tensor& x, std::int64_t d) {
        return x.reshape({n, x.size(1), heads, d}).permute({0, 2, 1, 3});
    };
    auto qh = split(q, dq), kh = split(k, dq), vh = split(v, dv);
    auto scores = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(dq));
    auto out = torch::matmul(torch::softmax(scores, -1), vh);
    return out.permute({0, 2, 1, 3}).reshape({n, q.size(1), heads * dv});
}

void zero_parameters(nn::Module& module) {
    torch::NoGradGuard no_grad;
    for (auto& p : module.parameters()) p.zero_();
}

ResBlockImpl::ResBlockImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t emb_dim) {
    norm1 = register_module("norm1", group_norm(in_ch));
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)));
    norm2 = register_module("norm2", group_norm(out_ch));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)));
    if (emb_dim > 0) emb_proj = register_module("emb_proj", nn::Linear(emb_dim, out_ch));
    if (in_ch != out_ch) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
    auto h = conv1(torch::silu(norm1(x)));
    if (emb_proj && emb.defined()) h = h + emb_proj(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2(torch::silu(norm2(h)));
    return (skip ? skip(x) : x) + h;
}

SpatialSelfAttentionImpl::SpatialSelfAttentionImpl(std::int64_t channels, std::int64_t heads_) : heads(heads_) {
    norm = register_module("norm", group_norm(channels));
    qkv = register_module("qkv", nn::Linear(channels, 3 * channels));
    out = register_module("out", nn::Linear(channels, channels));
}

torch::Tensor SpatialSelfAttentionImpl::forward(const torch::Tensor& x) {
    const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    auto tokens = norm(x).flatten(2).transpose(1, 2);  // [N, hw, C]
    auto parts = qkv(tokens).chunk(3, -1);
    auto attn = out(multihead_attention(parts[0], parts[1], parts[2], heads));
    return x + attn.transpose(1, 2).reshape({n, c, h, w});
}

CrossAttentionImpl::CrossAttentionImpl(std::int64_t channels, std::int64_t context_dim, std::int64_t heads_)
    : heads(heads_) {
    norm = register_module("norm", group_norm(channels));
    to_q = register_module("to_q", nn::Linear(channels, channels));
    to_k = register_module("to_k", nn::Linear(context_dim, channels));
    to_v = register_module("to_v", nn::Linear(context_dim, channels));
    out = register_module("out", nn::Linear(channels, channels));
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
    const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    auto tokens = norm(x).flatten(2).transpose(1, 2);
    auto attn = out(multihead_attention(to_q(tokens), to_k(context), to_v(context), heads));
    return x + attn.transpose(1, 2).reshape({n, c, h, w});
}

}  // namespace toon
