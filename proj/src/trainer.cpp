#include "toon/trainer.hpp"

#include "toon/errors.hpp"

#include <json.hpp>

#include <algorithm>

namespace toon {

using json = nlohmann::json;

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::Autoencoder: return "autoencoder";
        case Stage::Base: return "base";
        case Stage::Rectify: return "rectify";
        case Stage::Decoder: return "decoder";
        case Stage::Sketch: return "sketch";
    }
    return "?";
}

Stage parse_stage(const std::string& name) {
    for (auto s : {Stage::Autoencoder, Stage::Base, Stage::Rectify, Stage::Decoder, Stage::Sketch})
        if (stage_name(s) == name) return s;
    throw ConfigError("unknown stage '" + name + "'");
}

StageConfig StageConfig::defaults(Stage stage) {
    StageConfig c;
    c.stage = stage;
    switch (stage) {
        case Stage::Autoencoder:
            c.learning_rate = 1e-3;
            c.frames = 1;
            c.batch_size = 8;
            c.weight_decay = 0.0;
            c.fps_set = {};
            break;
        case Stage::Base:
            c.learning_rate = 1e-5;
            c.freeze = FreezeVariant::II;
            break;
        case Stage::Rectify: c.learning_rate = 1e-5; break;
        case Stage::Decoder:
            c.learning_rate = 4.5e-6;
            c.frames = 8;
            c.weight_decay = 0.0;
            break;
        case Stage::Sketch: c.learning_rate = 5e-5; break;
    }
    return c;
}

StageConfig StageConfig::from_config(Stage stage, KeyValueConfig& cfg) {
    auto c = defaults(stage);
    c.steps = cfg.get_int("train.steps", c.steps);
    c.learning_rate = cfg.get_double("train.lr", c.learning_rate);
    c.weight_decay = cfg.get_double("train.weight_decay", c.weight_decay);
    c.batch_size = cfg.get_int("train.batch_size", c.batch_size);
    c.frames = cfg.get_int("train.frames", c.frames);
    c.audit_every = cfg.get_int("train.audit_every", c.audit_every);
    c.fps_set = cfg.get_int_list("train.fps_set", c.fps_set);
    c.condition_dropout = cfg.get_double("train.condition_dropout", c.condition_dropout);
    c.adversarial_start = cfg.get_int("train.adversarial_start", c.adversarial_start);
    c.discriminator_lr = cfg.get_double("train.discriminator_lr", c.discriminator_lr);
    if (stage == Stage::Rectify || stage == Stage::Base) {
        try {
            c.freeze = FreezePolicy::parse(cfg.get_string("train.freeze", FreezePolicy::make(c.freeze).name())).variant;
        } catch (const ParameterError& e) {
            throw ConfigError(e.what());
        }
    }
    c.validate();
    return c;
}

void StageConfig::validate() const {
    if (steps < 0) throw ConfigError("train.steps must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("train.lr must be positive");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (frames < 1) throw ConfigError("train.frames must be >= 1");
    if (audit_every < 1) throw ConfigError("train.audit_every must be >= 1");
    if (condition_dropout < 0.0 || condition_dropout > 1.0) throw ConfigError("train.condition_dropout must be in [0, 1]");
    for (auto f : fps_set)
        if (f <= 0) throw ConfigError("train.fps_set entries must be positive");
}

std::string StepRecord::to_json(Stage stage) const {
    json j{{"stage", stage_name(stage)}, {"step", step}, {"loss", loss}, {"components", components}, {"lr", lr}};
    return j.dump();
}

std::uint64_t derive_seed(std::uint64_t seed, std::int64_t step, std::uint64_t salt) {
    // splitmix64 over the three inputs
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ static_cast<std::uint64_t>(step)) ^ salt);
}

ClipBatch sample_batch(const std::vector<ToonClip>& clips, std::int64_t batch, std::int64_t frames,
                       const std::vector<std::int64_t>& fps_set, std::mt19937_64& rng) {
    if (clips.empty()) throw ParameterError("sample_batch: no clips");
    std::uniform_int_distribution<std::size_t> pick(0, clips.size() - 1);
    std::vector<std::size_t> chosen;
    for (std::int64_t b = 0; b < batch; ++b) chosen.push_back(pick(rng));

    // Strides every chosen clip supports at the candidate fps values.
    auto stride_for = [&](const ToonClip& c, std::int64_t fps) -> std::int64_t {
        if (fps > c.fps || c.fps % fps != 0) return 0;
        const auto s = c.fps / fps;
        return (frames - 1) * s + 1 <= c.length() ? s : 0;
    };
    std::vector<std::int64_t> feasible;
    for (auto f : fps_set) {
        bool ok = true;
        for (auto i : chosen) ok = ok && stride_for(clips[i], f) > 0;
        if (ok) feasible.push_back(f);
    }

    std::vector<torch::Tensor> frame_list;
    std::vector<std::int64_t> captions, fps_values;
    std::int64_t fps = 0;
    if (!feasible.empty()) fps = feasible[std::uniform_int_distribution<std::size_t>(0, feasible.size() - 1)(rng)];
    for (auto i : chosen) {
        const auto& c = clips[i];
        const auto f = fps > 0 ? fps : c.fps;
        const auto stride = fps > 0 ? stride_for(c, fps) : 1;
        const auto span = (frames - 1) * stride + 1;
        if (span > c.length()) throw ParameterError("sample_batch: clip shorter than the training window");
        const auto offset = std::uniform_int_distribution<std::int64_t>(0, c.length() - span)(rng);
        frame_list.push_back(c.frames.slice(0, offset, offset + span, stride));
        auto cap = pad_caption(c.caption);
        captions.insert(captions.end(), cap.begin(), cap.end());
        fps_values.push_back(f);
    }
    ClipBatch out;
    out.frames = torch::stack(frame_list, 0);
    out.caption = torch::tensor(captions, torch::kInt64).view({batch, kCaptionLength});
    out.fps = torch::tensor(fps_values, torch::kInt64);
    return out;
}

std::vector<torch::optim::OptimizerParamGroup> adamw_groups(const std::vector<std::pair<std::string, torch::Tensor>>& named,
                                                            double lr, double weight_decay) {
    std::vector<torch::Tensor> decay, no_decay;
    for (const auto& [name, p] : named) {
        if (!p.requires_grad()) continue;
        const bool is_bias = name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0;
        const bool is_norm = name.find("norm") != std::string::npos;
        (is_bias || is_norm || p.dim() <= 1 ? no_decay : decay).push_back(p);
    }
    auto options = [&](double wd) {
        return std::make_unique<torch::optim::AdamWOptions>(
            torch::optim::AdamWOptions(lr).betas({0.9, 0.999}).weight_decay(wd));
    };
    std::vector<torch::optim::OptimizerParamGroup> groups;
    if (!decay.empty()) groups.emplace_back(decay, options(weight_decay));
    if (!no_decay.empty()) groups.emplace_back(no_decay, options(0.0));
    return groups;
}

torch::Tensor clip_latents(Autoencoder& ae, const torch::Tensor& frames) {
    torch::NoGradGuard no_grad;
    return ae->to_diffusion(ae->encode_clip(frames).latents);
}

DenoiserConfig denoiser_config(KeyValueConfig& cfg) {
    DenoiserConfig d;
    d.frame_count = cfg.get_int("model.frames", d.frame_count);
    d.base_width = cfg.get_int("model.base_width", d.base_width);
    d.num_levels = cfg.get_int("model.levels", d.num_levels);
    d.context_tokens = cfg.get_int("model.context_tokens", d.context_tokens);
    d.context_dim = cfg.get_int("model.context_dim", d.context_dim);
    d.fps_embed_dim = cfg.get_int("model.fps_embed_dim", d.fps_embed_dim);
    d.heads = cfg.get_int("model.heads", d.heads);
    d.latent_channels = cfg.get_int("model.latent_channels", d.latent_channels);
    d.text_vocab_size = Vocabulary::size();
    try {
        d.validate();
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    return d;
}

AutoencoderConfig autoencoder_config(KeyValueConfig& cfg) {
    AutoencoderConfig a;
    a.latent_channels = cfg.get_int("model.latent_channels", a.latent_channels);
    auto widths = cfg.get_int_list("model.ae_widths", {a.widths[0], a.widths[1], a.widths[2]});
    if (widths.size() != 3) throw ConfigError("model.ae_widths needs three values");
    std::copy(widths.begin(), widths.end(), a.widths.begin());
    a.attention_dim = cfg.get_int("model.attention_dim", a.attention_dim);
    a.temporal_kernel = cfg.get_int("model.temporal_kernel", a.temporal_kernel);
    try {
        a.validate();
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    return a;
}

void enable_determinism() {
    at::set_num_threads(1);
    try {
        at::set_num_interop_threads(1);
    } catch (const c10::Error&) {
        // already fixed once parallel work has started
    }
    at::globalContext().setDeterministicAlgorithms(true, false);
}

namespace {

std::string optimizer_key(const std::string& prefix, std::size_t group, std::size_t param, const char* field) {
    return prefix + std::to_string(group) + "/" + std::to_string(param) + "/" + field;
}

void export_optimizer(torch::optim::Optimizer& opt, const std::string& prefix, TensorArchive& archive) {
    auto& state = opt.state();
    const auto& groups = opt.param_groups();
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (std::size_t p = 0; p < groups[g].params().size(); ++p) {
            auto it = state.find(groups[g].params()[p].unsafeGetTensorImpl());
            if (it == state.end()) continue;
            const auto& s = static_cast<const torch::optim::AdamWParamState&>(*it->second);
            archive.put(optimizer_key(prefix, g, p, "step"), torch::tensor(s.step(), torch::kInt64));
            archive.put(optimizer_key(prefix, g, p, "exp_avg"), s.exp_avg().clone());
            archive.put(optimizer_key(prefix, g, p, "exp_avg_sq"), s.exp_avg_sq().clone());
            if (s.max_exp_avg_sq().defined())
                archive.put(optimizer_key(prefix, g, p, "max_exp_avg_sq"), s.max_exp_avg_sq().clone());
        }
}

void restore_optimizer(torch::optim::Optimizer& opt, const std::string& prefix, const TensorArchive& archive) {
    auto& state = opt.state();
    const auto& groups = opt.param_groups();
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (std::size_t p = 0; p < groups[g].params().size(); ++p) {
            if (!archive.contains(optimizer_key(prefix, g, p, "step"))) continue;
            const auto& param = groups[g].params()[p];
            auto s = std::make_unique<torch::optim::AdamWParamState>();
            s->step(archive.get(optimizer_key(prefix, g, p, "step")).item<std::int64_t>());
            auto moment = [&](const char* field) {
                const auto& t = archive.get(optimizer_key(prefix, g, p, field));
                if (t.sizes() != param.sizes()) throw ConfigError("resume: optimizer state does not match the model");
                return t.clone();
            };
            s->exp_avg(moment("exp_avg"));
            s->exp_avg_sq(moment("exp_avg_sq"));
            if (archive.contains(optimizer_key(prefix, g, p, "max_exp_avg_sq"))) s->max_exp_avg_sq(moment("max_exp_avg_sq"));
            state[param.unsafeGetTensorImpl()] = std::move(s);
        }
}

void check_finite(const torch::Tensor& loss, Stage stage, std::int64_t step) {
    if (!std::isfinite(loss.item<double>()))
        throw NumericalError(stage_name(stage) + ": non-finite loss at step " + std::to_string(step));
}

struct Audited {
    std::string name;
    std::function<std::string()> hash;
    std::string expected;
};

struct Loop {
    Stage stage;
    const StageConfig& cfg;
    std::vector<torch::optim::Optimizer*> optimizers;
    std::function<StepRecord(std::int64_t step)> step;
    std::function<void(TensorArchive&)> save_models;
    std::function<void(const TensorArchive&)> load_models;
    std::vector<Audited> frozen;
    json extra_meta = json::object();
};

void audit(std::vector<Audited>& frozen, Stage stage, std::int64_t step) {
    for (const auto& f : frozen)
        if (f.hash() != f.expected)
            throw ContractError(stage_name(stage) + ": freeze audit failed at step " + std::to_string(step) + ", " +
                                f.name + " drifted");
}

TrainResult run_loop(Loop& loop, const TrainOptions& opts) {
    const auto& cfg = loop.cfg;
    std::int64_t start = 0;
    if (opts.resume) {
        auto meta = json::parse(opts.resume->metadata());
        if (meta.value("stage", "") != stage_name(loop.stage))
            throw ConfigError("resume checkpoint belongs to a different stage");
        start = meta.at("step").get<std::int64_t>();
        loop.load_models(*opts.resume);
        for (std::size_t i = 0; i < loop.optimizers.size(); ++i) {
            restore_optimizer(*loop.optimizers[i], "optim/" + std::to_string(i) + "/", *opts.resume);
        }
    }
    for (auto& f : loop.frozen) f.expected = f.hash();

    TrainResult result;
    std::int64_t end = cfg.steps;
    if (opts.stop_after) end = std::min(end, start + *opts.stop_after);
    for (std::int64_t step = start + 1; step <= end; ++step) {
        auto rec = loop.step(step);
        rec.step = step;
        if (!std::isfinite(rec.loss))
            throw NumericalError(stage_name(loop.stage) + ": non-finite loss at step " + std::to_string(step));
        if (opts.log) *opts.log << rec.to_json(loop.stage) << "\n";
        result.records.push_back(std::move(rec));
        if (step % cfg.audit_every == 0) audit(loop.frozen, loop.stage, step);
    }
    audit(loop.frozen, loop.stage, end);
    result.final_step = std::max(start, end);

    loop.save_models(result.checkpoint);
    for (std::size_t i = 0; i < loop.optimizers.size(); ++i)
        export_optimizer(*loop.optimizers[i], "optim/" + std::to_string(i) + "/", result.checkpoint);
    json meta = loop.extra_meta;
    meta["stage"] = stage_name(loop.stage);
    meta["step"] = result.final_step;
    meta["seed"] = cfg.seed;
    meta["lr"] = cfg.learning_rate;
    for (const auto& f : loop.frozen) meta["frozen_hashes"][f.name] = f.expected;
    result.checkpoint.metadata() = meta.dump();
    return result;
}

NamedParams named_trainable(const nn::Module& m, const std::string& prefix = "") {
    NamedParams out;
    for (const auto& item : m.named_parameters())
        if (item.value().requires_grad()) out.emplace_back(prefix + item.key(), item.value());
    return out;
}

NamedParams named_all(const nn::Module& m) {
    NamedParams out;
    for (const auto& item : m.named_parameters()) out.emplace_back(item.key(), item.value());
    for (const auto& item : m.named_buffers()) out.emplace_back(item.key(), item.value());
    return out;
}

void set_requires_grad(nn::Module& m, bool on) {
    for (auto& p : m.parameters()) p.requires_grad_(on);
}

double current_lr(torch::optim::Optimizer& opt) { return opt.param_groups().front().options().get_lr(); }

}  // namespace

TrainResult train_autoencoder(Autoencoder& ae, PatchDiscriminator& disc, const std::vector<ToonClip>& data,
                              const StageConfig& cfg, const TrainOptions& opts) {
    cfg.validate();
    if (ae->decoder->variant.har || ae->decoder->variant.p3d)
        throw ParameterError("train_autoencoder: pretraining uses the vanilla decoder variant");
    set_requires_grad(*ae, true);
    set_requires_grad(*disc, true);
    auto named = named_trainable(*ae->encoder, "encoder.");
    auto dec = named_trainable(*ae->decoder->vanilla, "decoder.");
    named.insert(named.end(), dec.begin(), dec.end());
    torch::optim::AdamW opt(adamw_groups(named, cfg.learning_rate, cfg.weight_decay));
    torch::optim::AdamW disc_opt(adamw_groups(named_trainable(*disc), cfg.discriminator_lr, 0.0));
    RandomFeaturePerceptual perceptual;

    Loop loop{Stage::Autoencoder, cfg, {&opt, &disc_opt}, {}, {}, {}, {}};
    loop.step = [&](std::int64_t step) {
        std::mt19937_64 rng(derive_seed(cfg.seed, step));
        auto batch = sample_batch(data, cfg.batch_size, cfg.frames, cfg.fps_set, rng);
        auto x = batch.frames.reshape({-1, 1, 3, batch.frames.size(3), batch.frames.size(4)});
        auto enc = ae->encode_clip(x);
        auto x_hat = ae->decoder->forward(enc.latents, enc.first, enc.last);
        const bool adv = step >= cfg.adversarial_start;
        auto loss = compound_loss(x, x_hat, perceptual, disc, ae->decoder->last_layer_weight(), adv);
        opt.zero_grad();
        check_finite(loss.total, Stage::Autoencoder, step);
        loss.total.backward();
        opt.step();
        StepRecord rec;
        if (adv) {
            disc_opt.zero_grad();
            auto d = discriminator_hinge_loss(disc, x, x_hat);
            d.backward();
            disc_opt.step();
            rec.components["disc"] = d.item<double>();
        }
        rec.loss = loss.total.item<double>();
        rec.components["l1"] = loss.l1;
        rec.components["perceptual"] = loss.perceptual;
        rec.components["adversarial"] = loss.adversarial;
        rec.components["lambda_d"] = loss.lambda_d;
        rec.lr = current_lr(opt);
        return rec;
    };
    loop.save_models = [&](TensorArchive& a) {
        // Unit-variance diffusion latents: rescale by the spread of the training latents.
        {
            torch::NoGradGuard no_grad;
            std::mt19937_64 rng(derive_seed(cfg.seed, -1));
            auto batch = sample_batch(data, std::max<std::int64_t>(cfg.batch_size, 8), cfg.frames, cfg.fps_set, rng);
            auto lat = ae->encoder->forward(batch.frames.reshape({-1, 3, batch.frames.size(3), batch.frames.size(4)})).first;
            const double sd = lat.std().item<double>();
            ae->encoder->latent_scale.fill_(sd > 1e-8 ? 1.0 / sd : 1.0);
        }
        ae->save_to(a);
        export_module(*disc, "disc/", a);
    };
    loop.load_models = [&](const TensorArchive& a) {
        ae->load_from(a);
        if (a.has_section("disc/")) import_module(*disc, "disc/", a);
    };
    return run_loop(loop, opts);
}

namespace {

TrainResult train_denoiser_stage(Stage stage, InterpDenoiser& model, Autoencoder& ae, const std::vector<ToonClip>& data,
                                 const StageConfig& cfg, const TrainOptions& opts) {
    cfg.validate();
    const auto policy = FreezePolicy::make(cfg.freeze);
    if (!policy.train_icp && !policy.train_spatial && !policy.train_temporal)
        throw ParameterError(stage_name(stage) + ": freeze variant " + policy.name() +
                             " leaves no trainable parameters");
    if (cfg.frames < 2) throw ParameterError(stage_name(stage) + ": training clips need at least two frames");
    set_requires_grad(*ae, false);
    apply_freeze_policy(model, policy);

    NamedParams trainable;
    for (const auto& [g, params] : parameter_groups(model))
        if (policy.trainable(g)) trainable.insert(trainable.end(), params.begin(), params.end());
    torch::optim::AdamW opt(adamw_groups(trainable, cfg.learning_rate, cfg.weight_decay));
    const auto schedule = default_schedule();

    Loop loop{stage, cfg, {&opt}, {}, {}, {}, {}};
    loop.extra_meta["freeze"] = policy.name();
    for (auto g : kParamGroups)
        if (!policy.trainable(g))
            loop.frozen.push_back({group_name(g), [&model, g] { return group_hash(model, g); }, ""});
    loop.frozen.push_back({"encoder", [&ae] { return tensors_hash(named_all(*ae->encoder)); }, ""});

    loop.step = [&, policy](std::int64_t step) {
        std::mt19937_64 rng(derive_seed(cfg.seed, step));
        auto gen = make_generator(derive_seed(cfg.seed, step, 1));
        auto batch = sample_batch(data, cfg.batch_size, cfg.frames, cfg.fps_set, rng);
        const auto L = batch.frames.size(1);
        auto z0 = clip_latents(ae, batch.frames);
        auto x1 = batch.frames.select(1, 0), xL = batch.frames.select(1, L - 1);
        auto cond = build_condition_from_latents(z0.select(1, 0), z0.select(1, L - 1), L, model->icp(x1, xL),
                                                 batch.caption, batch.fps);
        const bool dropped = std::bernoulli_distribution(cfg.condition_dropout)(rng);
        if (dropped) cond = cond.null();
        auto t = torch::randint(1, schedule.T + 1, {z0.size(0)}, gen, torch::kInt64);
        auto eps = torch::randn(z0.sizes(), gen, torch::kFloat32);
        DenoiseFn fn = [&](const torch::Tensor& z, const torch::Tensor& tt, const ConditionBundle& c) {
            return model->forward(z, tt, c, policy);
        };
        auto loss = diffusion_loss(fn, z0, cond, t, eps, schedule);
        opt.zero_grad();
        check_finite(loss, stage, step);
        if (loss.requires_grad()) {
            loss.backward();
            opt.step();
        }
        StepRecord rec;
        rec.loss = loss.item<double>();
        rec.components["diffusion"] = rec.loss;
        rec.components["null_condition"] = dropped ? 1.0 : 0.0;
        rec.components["fps"] = static_cast<double>(batch.fps[0].item<std::int64_t>());
        rec.lr = current_lr(opt);
        return rec;
    };
    loop.save_models = [&](TensorArchive& a) { export_module(*model, "denoiser/", a); };
    loop.load_models = [&](const TensorArchive& a) { import_module(*model, "denoiser/", a); };
    auto result = run_loop(loop, opts);
    apply_freeze_policy(model, policy);
    return result;
}

}  // namespace

TrainResult train_denoiser(InterpDenoiser& model, Autoencoder& ae, const std::vector<ToonClip>& data,
                           const StageConfig& cfg, const TrainOptions& opts) {
    return train_denoiser_stage(cfg.stage == Stage::Base ? Stage::Base : Stage::Rectify, model, ae, data, cfg, opts);
}

TrainResult train_rectify(InterpDenoiser& model, Autoencoder& ae, const std::vector<ToonClip>& data,
                          const StageConfig& cfg, const TrainOptions& opts) {
    return train_denoiser_stage(Stage::Rectify, model, ae, data, cfg, opts);
}

TrainResult train_decoder(Autoencoder& ae, PatchDiscriminator& disc, const std::vector<ToonClip>& data,
                          const StageConfig& cfg, const TrainOptions& opts) {
    cfg.validate();
    set_requires_grad(*ae->encoder, false);
    set_requires_grad(*ae->decoder, true);
    set_requires_grad(*disc, true);
    torch::optim::AdamW opt(adamw_groups(named_trainable(*ae->decoder), cfg.learning_rate, cfg.weight_decay));
    torch::optim::AdamW disc_opt(adamw_groups(named_trainable(*disc), cfg.discriminator_lr, 0.0));
    RandomFeaturePerceptual perceptual;

    Loop loop{Stage::Decoder, cfg, {&opt, &disc_opt}, {}, {}, {}, {}};
    loop.extra_meta["variant"] = ae->decoder->variant.label();
    loop.frozen.push_back({"encoder", [&ae] { return tensors_hash(named_all(*ae->encoder)); }, ""});
    loop.step = [&](std::int64_t step) {
        std::mt19937_64 rng(derive_seed(cfg.seed, step));
        auto batch = sample_batch(data, cfg.batch_size, cfg.frames, cfg.fps_set, rng);
        AutoencoderImpl::Encoded enc;
        {
            torch::NoGradGuard no_grad;
            enc = ae->encode_clip(batch.frames);
        }
        auto x_hat = ae->decoder->forward(enc.latents, enc.first, enc.last);
        const bool adv = step >= cfg.adversarial_start;
        auto loss = compound_loss(batch.frames, x_hat, perceptual, disc, ae->decoder->last_layer_weight(), adv);
        opt.zero_grad();
        check_finite(loss.total, Stage::Decoder, step);
        loss.total.backward();
        opt.step();
        StepRecord rec;
        if (adv) {
            disc_opt.zero_grad();
            auto d = discriminator_hinge_loss(disc, batch.frames, x_hat);
            d.backward();
            disc_opt.step();
            rec.components["disc"] = d.item<double>();
        }
        rec.loss = loss.total.item<double>();
        rec.components["l1"] = loss.l1;
        rec.components["perceptual"] = loss.perceptual;
        rec.components["adversarial"] = loss.adversarial;
        rec.components["lambda_d"] = loss.lambda_d;
        rec.lr = current_lr(opt);
        return rec;
    };
    loop.save_models = [&](TensorArchive& a) {
        ae->save_to(a);
        export_module(*disc, "disc/", a);
    };
    loop.load_models = [&](const TensorArchive& a) {
        ae->load_from(a);
        if (a.has_section("disc/")) import_module(*disc, "disc/", a);
    };
    auto result = run_loop(loop, opts);
    set_requires_grad(*ae->encoder, true);
    return result;
}

TrainResult train_sketch(InterpDenoiser& model, SketchEncoder& sketch, Autoencoder& ae,
                         const std::vector<ToonClip>& data, const StageConfig& cfg, const TrainOptions& opts) {
    cfg.validate();
    if (cfg.frames < 3) throw ParameterError("sketch: training clips need interior frames (L >= 3)");
    set_requires_grad(*ae, false);
    set_requires_grad(*model, false);
    set_requires_grad(*sketch, true);
    torch::optim::AdamW opt(adamw_groups(named_trainable(*sketch), cfg.learning_rate, cfg.weight_decay));
    const auto schedule = default_schedule();

    Loop loop{Stage::Sketch, cfg, {&opt}, {}, {}, {}, {}};
    loop.frozen.push_back({"denoiser", [&model] { return tensors_hash(named_all(*model)); }, ""});
    loop.frozen.push_back({"encoder", [&ae] { return tensors_hash(named_all(*ae->encoder)); }, ""});
    loop.step = [&](std::int64_t step) {
        std::mt19937_64 rng(derive_seed(cfg.seed, step));
        auto gen = make_generator(derive_seed(cfg.seed, step, 1));
        auto batch = sample_batch(data, cfg.batch_size, cfg.frames, cfg.fps_set, rng);
        const auto B = batch.frames.size(0), L = batch.frames.size(1);
        const auto H = batch.frames.size(3), W = batch.frames.size(4);
        auto z0 = clip_latents(ae, batch.frames);

        std::vector<torch::Tensor> rendered, present;
        double bisection = 0.0, selected = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
            auto lines = extract_sketch(batch.frames[b]);
            SketchSet full = SketchSet::empty(L);
            for (std::int64_t k = 0; k < L; ++k) full.sketches[static_cast<std::size_t>(k)] = lines[k];
            auto sampled = sample_training_sketches(full, rng);
            rendered.push_back(sampled.set.render(H, W));
            auto mask = torch::zeros({L});
            for (auto idx : sampled.selected) mask[idx - 1] = 1.0;
            present.push_back(mask);
            bisection += sampled.pattern.mode == SelectionPattern::Mode::Bisection ? 1.0 : 0.0;
            selected += static_cast<double>(sampled.selected.size());
        }
        auto sketches = torch::stack(rendered, 0);
        auto present_t = torch::stack(present, 0);

        ConditionBundle cond;
        {
            torch::NoGradGuard no_grad;
            auto x1 = batch.frames.select(1, 0), xL = batch.frames.select(1, L - 1);
            cond = build_condition_from_latents(z0.select(1, 0), z0.select(1, L - 1), L, model->icp(x1, xL),
                                                batch.caption, batch.fps);
        }
        auto t = torch::randint(1, schedule.T + 1, {B}, gen, torch::kInt64);
        auto eps = torch::randn(z0.sizes(), gen, torch::kFloat32);
        DenoiseFn fn = [&](const torch::Tensor& z, const torch::Tensor& tt, const ConditionBundle& c) {
            return guided_denoise(z, tt, c, sketches, present_t, model, sketch);
        };
        auto loss = diffusion_loss(fn, z0, cond, t, eps, schedule);
        opt.zero_grad();
        check_finite(loss, Stage::Sketch, step);
        loss.backward();
        opt.step();
        StepRecord rec;
        rec.loss = loss.item<double>();
        rec.components["diffusion"] = rec.loss;
        rec.components["bisection_fraction"] = bisection / static_cast<double>(B);
        rec.components["sketches_per_clip"] = selected / static_cast<double>(B);
        rec.lr = current_lr(opt);
        return rec;
    };
    loop.save_models = [&](TensorArchive& a) { export_module(*sketch, "sketch/", a); };
    loop.load_models = [&](const TensorArchive& a) { import_module(*sketch, "sketch/", a); };
    loop.extra_meta["denoiser_hash"] = tensors_hash(named_all(*model));
    return run_loop(loop, opts);
}

double eval_diffusion_loss(InterpDenoiser& model, Autoencoder& ae, const std::vector<ToonClip>& clips,
                           std::int64_t frames, std::uint64_t seed, std::int64_t draws, const FreezePolicy& policy) {
    if (clips.empty()) throw ParameterError("eval_diffusion_loss: no clips");
    torch::NoGradGuard no_grad;
    const auto schedule = default_schedule();
    double total = 0.0;
    std::int64_t count = 0;
    for (std::size_t i = 0; i < clips.size(); ++i) {
        const auto& c = clips[i];
        if (c.length() < frames) throw ParameterError("eval_diffusion_loss: clip shorter than the window");
        auto x = c.frames.slice(0, 0, frames).unsqueeze(0);
        auto z0 = clip_latents(ae, x);
        auto caption = torch::tensor(pad_caption(c.caption), torch::kInt64).unsqueeze(0);
        auto fps = torch::tensor(std::vector<std::int64_t>{c.fps}, torch::kInt64);
        auto cond = build_condition_from_latents(z0.select(1, 0), z0.select(1, frames - 1), frames,
                                                 model->icp(x.select(1, 0), x.select(1, frames - 1)), caption, fps);
        for (std::int64_t d = 0; d < draws; ++d) {
            auto gen = make_generator(derive_seed(seed, static_cast<std::int64_t>(i), static_cast<std::uint64_t>(d)));
            auto t = torch::randint(1, schedule.T + 1, {1}, gen, torch::kInt64);
            auto eps = torch::randn(z0.sizes(), gen, torch::kFloat32);
            auto pred = model->forward(q_sample(z0, t, eps, schedule), t, cond, policy);
            total += (eps - pred).pow(2).mean().item<double>();
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

}  // namespace toon
