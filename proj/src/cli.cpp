#include "toon/cli.hpp"

#include "toon/ablation.hpp"
#include "toon/autoencoder.hpp"
#include "toon/checkpoint.hpp"
#include "toon/config.hpp"
#include "toon/denoiser.hpp"
#include "toon/diffusion.hpp"
#include "toon/errors.hpp"
#include "toon/image_io.hpp"
#include "toon/metrics.hpp"
#include "toon/sketch.hpp"
#include "toon/toon_data.hpp"
#include "toon/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace toon {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunContext {
    std::string command;
    std::string config_path;
    std::uint64_t seed = 0;
    std::string out;
    std::vector<std::string> overrides;

    KeyValueConfig cfg;
    json checkpoints = json::object();
    json outputs = json::object();

    fs::path out_dir() const { return fs::path(out); }

    void load() {
        if (!config_path.empty()) cfg = KeyValueConfig::load(config_path);
        for (const auto& o : overrides) cfg.set_override(o);
        fs::create_directories(out_dir());
    }

    /// Path from a config key; records the content hash of the file it names.
    fs::path checkpoint(const std::string& key) {
        fs::path p = cfg.get_string(key);
        if (!fs::exists(p)) throw IoError("checkpoint '" + p.string() + "' (" + key + ") not found");
        checkpoints[key] = {{"path", p.string()}, {"hash", file_content_hash(p)}};
        return p;
    }

    std::optional<fs::path> optional_checkpoint(const std::string& key) {
        if (!cfg.has(key) || cfg.get_string(key).empty()) return std::nullopt;
        return checkpoint(key);
    }

    void output(const std::string& name, const fs::path& p) { outputs[name] = {{"path", p.string()}, {"hash", file_content_hash(p)}}; }

    void finish() const {
        std::ofstream(out_dir() / "resolved_config.txt") << cfg.resolved();
        std::ofstream(out_dir() / "seed.txt") << seed << "\n";
        json run{{"command", command},
                 {"seed", seed},
                 {"config_file", config_path},
                 {"overrides", overrides},
                 {"checkpoints", checkpoints},
                 {"outputs", outputs}};
        std::ofstream(out_dir() / "run.json") << run.dump(2) << "\n";
    }
};

void add_common(CLI::App* sub, RunContext& ctx) {
    sub->add_option("--config", ctx.config_path, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", ctx.seed, "run seed");
    sub->add_option("--out", ctx.out, "output directory")->required();
    sub->add_option("--set", ctx.overrides, "config override key=value (repeatable)");
}

std::vector<MotionKind> motions_from(const std::string& text) {
    std::vector<MotionKind> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(parse_motion(item));
    if (out.empty()) throw ConfigError("data.motions is empty");
    return out;
}

DecoderVariant decoder_variant(KeyValueConfig& cfg) {
    const auto name = cfg.get_string("model.decoder", "full");
    for (auto v : {DecoderVariant::full(), DecoderVariant::without_p3d(), DecoderVariant::vanilla()})
        if (v.label() == name) return v;
    throw ConfigError("model.decoder must be full, wo_p3d or wo_har_p3d");
}

std::vector<ToonClip> load_data(RunContext& ctx, const std::string& split) {
    fs::path root = ctx.cfg.get_string("data.root");
    auto clips = load_split(root, split);
    if (clips.empty()) throw ConfigError("no '" + split + "' clips in " + root.string());
    return clips;
}

// ---- gen-data ------------------------------------------------------------------

int cmd_gen_data(RunContext& ctx) {
    auto& cfg = ctx.cfg;
    const auto count = cfg.get_int("data.clips", 64);
    const auto eval_count = cfg.get_int("data.eval", 8);
    ClipSpec spec;
    spec.frames = cfg.get_int("data.frames", spec.frames);
    spec.height = cfg.get_int("data.height", spec.height);
    spec.width = cfg.get_int("data.width", spec.width);
    spec.fps = cfg.get_int("data.fps", spec.fps);
    spec.style = parse_style(cfg.get_string("data.style", "toon"));
    const auto motions = motions_from(cfg.get_string("data.motions", "linear,arc,occlusion,morph"));
    const double flow_min = cfg.get_double("filter.flow_min", 0.0);
    if (count < 1 || spec.frames < 2 || spec.fps < 1) throw ConfigError("gen-data: need clips >= 1, frames >= 2, fps >= 1");

    std::vector<NamedClip> clips;
    for (std::int64_t i = 0; i < count; ++i) {
        spec.motion = motions[static_cast<std::size_t>(i) % motions.size()];
        std::ostringstream id;
        id << "clip_" << std::setw(4) << std::setfill('0') << i;
        clips.push_back({id.str(), generate_clip(spec, derive_seed(ctx.seed, i, 31))});
    }
    std::vector<std::shared_ptr<ClipScorer>> scorers{std::make_shared<FlowScorer>()};
    std::map<std::string, Threshold> thresholds{{"flow", Threshold{flow_min}}};
    auto result = run_pipeline(clips, scorers, thresholds, eval_count, ctx.seed);
    write_dataset(ctx.out_dir(), clips, result);
    ctx.output("manifest", ctx.out_dir() / "manifest.jsonl");
    std::cout << "clips kept: " << result.train_ids.size() + result.eval_ids.size() << " of " << clips.size()
              << " (train " << result.train_ids.size() << ", eval " << result.eval_ids.size() << ")\n";
    return kExitOk;
}

// ---- train ---------------------------------------------------------------------

int cmd_train(RunContext& ctx, const std::string& stage_text) {
    auto& cfg = ctx.cfg;
    const auto stage = parse_stage(stage_text);
    auto stage_cfg = StageConfig::from_config(stage, cfg);
    stage_cfg.seed = ctx.seed;
    const auto ae_cfg = autoencoder_config(cfg);
    const auto d_cfg = denoiser_config(cfg);
    auto data = load_data(ctx, "train");

    const auto log_path = ctx.out_dir() / "train_log.jsonl";
    std::ofstream log(log_path);
    TrainOptions opts;
    opts.log = &log;
    std::optional<TensorArchive> resume;
    if (auto p = ctx.optional_checkpoint("train.resume")) {
        resume = TensorArchive::load(*p);
        opts.resume = &*resume;
    }

    torch::manual_seed(ctx.seed);
    TrainResult result;
    switch (stage) {
        case Stage::Autoencoder: {
            Autoencoder ae(ae_cfg, DecoderVariant::vanilla());
            PatchDiscriminator disc;
            result = train_autoencoder(ae, disc, data, stage_cfg, opts);
            break;
        }
        case Stage::Base:
        case Stage::Rectify: {
            Autoencoder ae(ae_cfg, DecoderVariant::vanilla());
            ae->load_from(TensorArchive::load(ctx.checkpoint("ckpt.autoencoder")));
            InterpDenoiser model(d_cfg);
            if (auto p = ctx.optional_checkpoint("ckpt.base")) import_module(*model, "denoiser/", TensorArchive::load(*p));
            result = stage == Stage::Base ? train_denoiser(model, ae, data, stage_cfg, opts)
                                          : train_rectify(model, ae, data, stage_cfg, opts);
            break;
        }
        case Stage::Decoder: {
            Autoencoder ae(ae_cfg, decoder_variant(cfg));
            ae->load_from(TensorArchive::load(ctx.checkpoint("ckpt.autoencoder")));
            PatchDiscriminator disc;
            result = train_decoder(ae, disc, data, stage_cfg, opts);
            break;
        }
        case Stage::Sketch: {
            Autoencoder ae(ae_cfg, DecoderVariant::vanilla());
            ae->load_from(TensorArchive::load(ctx.checkpoint("ckpt.autoencoder")));
            InterpDenoiser model(d_cfg);
            import_module(*model, "denoiser/", TensorArchive::load(ctx.checkpoint("ckpt.denoiser")));
            SketchEncoder sketch(d_cfg);
            result = train_sketch(model, sketch, ae, data, stage_cfg, opts);
            break;
        }
    }
    log.close();
    const auto ckpt = ctx.out_dir() / (stage_name(stage) + ".ckpt");
    result.checkpoint.save(ckpt);
    ctx.output("checkpoint", ckpt);
    ctx.output("log", log_path);
    std::cout << stage_name(stage) << ": " << result.final_step << " steps";
    if (!result.records.empty()) std::cout << ", final loss " << result.records.back().loss;
    std::cout << "\n";
    return kExitOk;
}

// ---- sample --------------------------------------------------------------------

struct SampleArgs {
    std::string first, last, caption;
    std::int64_t frames = 16;
    std::int64_t fps = 8;
    std::vector<std::string> sketches;
};

torch::Tensor read_frame(const std::string& path) {
    auto img = read_netpbm(path);
    if (img.size(0) != 3) throw ConfigError("'" + path + "' is not a color (P6) image");
    return img;
}

torch::Tensor read_sketch(const std::string& path) {
    auto img = read_netpbm(path);
    if (img.size(0) == 3) img = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).unsqueeze(0);
    return img;
}

int cmd_sample(RunContext& ctx, const SampleArgs& args) {
    auto& cfg = ctx.cfg;
    const auto L = args.frames;
    if (L < 2) throw ConfigError("--frames must be >= 2");
    if (args.fps < 1) throw ConfigError("--fps must be >= 1");
    const auto ae_cfg = autoencoder_config(cfg);
    const auto d_cfg = denoiser_config(cfg);

    auto x1 = read_frame(args.first).unsqueeze(0), xL = read_frame(args.last).unsqueeze(0);
    if (x1.sizes() != xL.sizes()) throw ConfigError("first and last frames differ in size");
    const auto H = x1.size(2), W = x1.size(3);
    const auto multiple = AutoencoderConfig::kDownsample << (d_cfg.num_levels - 1);
    if (H % multiple != 0 || W % multiple != 0)
        throw ConfigError("frame size must be a multiple of " + std::to_string(multiple));

    SketchSet sketch_set = SketchSet::empty(L);
    for (const auto& entry : args.sketches) {
        const auto eq = entry.find('=');
        if (eq == std::string::npos) throw ConfigError("--sketch expects INDEX=PATH, got '" + entry + "'");
        std::int64_t index = 0;
        try {
            std::size_t used = 0;
            index = std::stoll(entry.substr(0, eq), &used);
            if (used != eq) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw ConfigError("--sketch index '" + entry.substr(0, eq) + "' is not an integer");
        }
        if (index < 1 || index > L)
            throw ConfigError("--sketch index " + std::to_string(index) + " outside 1.." + std::to_string(L));
        auto& slot = sketch_set.sketches[static_cast<std::size_t>(index - 1)];
        if (slot) throw ConfigError("--sketch index " + std::to_string(index) + " given twice");
        slot = read_sketch(entry.substr(eq + 1));
    }
    try {
        sketch_set.validate(H, W);
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }

    std::vector<std::int64_t> tokens;
    try {
        tokens = pad_caption(Vocabulary::tokenize(args.caption));
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }

    DDIMConfig ddim;
    ddim.num_steps = cfg.get_int("sample.steps", 25);
    ddim.eta = cfg.get_double("sample.eta", 0.0);
    ddim.guidance_scale = cfg.get_double("sample.guidance", 1.0);
    ddim.seed = ctx.seed;

    Autoencoder ae(ae_cfg, decoder_variant(cfg));
    ae->load_from(TensorArchive::load(ctx.checkpoint("ckpt.decoder")));
    ae->eval();

    torch::NoGradGuard no_grad;
    auto [raw1, pyr1] = ae->encoder->forward(x1);
    auto [rawL, pyrL] = ae->encoder->forward(xL);

    torch::Tensor raw;
    if (L == 2) {
        raw = torch::stack({raw1, rawL}, 1);
    } else {
        InterpDenoiser model(d_cfg);
        import_module(*model, "denoiser/", TensorArchive::load(ctx.checkpoint("ckpt.denoiser")));
        model->eval();
        auto caption = torch::tensor(tokens, torch::kInt64).unsqueeze(0);
        auto fps = torch::tensor(std::vector<std::int64_t>{args.fps}, torch::kInt64);
        auto z1 = ae->to_diffusion(raw1), zL = ae->to_diffusion(rawL);
        auto cond = build_condition_from_latents(z1, zL, L, model->icp(x1, xL), caption, fps);

        DenoiseFn fn;
        SketchEncoder adapter(d_cfg);
        if (sketch_set.provided() > 0) {
            import_module(*adapter, "sketch/", TensorArchive::load(ctx.checkpoint("ckpt.sketch")));
            adapter->eval();
            auto sketches = sketch_set.render(H, W).unsqueeze(0);
            auto present = torch::zeros({1, L});
            for (std::int64_t k = 0; k < L; ++k)
                if (sketch_set.sketches[static_cast<std::size_t>(k)]) present[0][k] = 1.0;
            fn = [&, sketches, present](const torch::Tensor& z, const torch::Tensor& t, const ConditionBundle& c) {
                return guided_denoise(z, t, c, sketches, present, model, adapter);
            };
        } else {
            fn = [&](const torch::Tensor& z, const torch::Tensor& t, const ConditionBundle& c) {
                return model->forward(z, t, c);
            };
        }
        auto z = ddim_sample(fn, {1, L, z1.size(1), z1.size(2), z1.size(3)}, cond, ddim, default_schedule());
        raw = ae->from_diffusion(z);
        raw.select(1, 0).copy_(raw1);
        raw.select(1, L - 1).copy_(rawL);
    }
    auto frames = ae->decoder->forward(raw, pyr1, pyrL).squeeze(0).clamp(-1.0, 1.0);
    if (!torch::isfinite(frames).all().item<bool>()) throw NumericalError("sample: non-finite decoded frames");

    for (std::int64_t k = 0; k < L; ++k) {
        std::ostringstream name;
        name << "frame_" << std::setw(3) << std::setfill('0') << (k + 1) << ".ppm";
        const auto path = ctx.out_dir() / name.str();
        write_ppm(path, frames[k]);
        ctx.output(name.str(), path);
    }
    std::cout << "wrote " << L << " frames to " << ctx.out << "\n";
    return kExitOk;
}

// ---- eval ----------------------------------------------------------------------

int cmd_eval(RunContext& ctx) {
    auto& cfg = ctx.cfg;
    const auto variant = decoder_variant(cfg);
    Autoencoder ae(autoencoder_config(cfg), variant);
    ae->load_from(TensorArchive::load(ctx.checkpoint("ckpt.decoder")));
    ae->eval();
    auto clips = load_data(ctx, "eval");
    auto report = evaluate_reconstruction(ae, clips, variant.label());
    const auto path = ctx.out_dir() / "report.json";
    std::ofstream(path) << report.to_json() << "\n";
    ctx.output("report", path);
    std::cout << std::fixed << std::setprecision(4) << variant.label() << " psnr " << report.psnr << " ssim "
              << report.ssim << "\nindex curve:";
    for (auto v : report.index_curve) std::cout << " " << std::setprecision(2) << v;
    std::cout << "\n";
    return kExitOk;
}

// ---- ablate --------------------------------------------------------------------

AblationBudget budget_from(KeyValueConfig& cfg, std::uint64_t seed) {
    AblationBudget b;
    b.seed = seed;
    b.frames = cfg.get_int("ablate.frames", b.frames);
    b.height = cfg.get_int("ablate.height", b.height);
    b.width = cfg.get_int("ablate.width", b.width);
    b.train_clips = cfg.get_int("ablate.train_clips", b.train_clips);
    b.eval_clips = cfg.get_int("ablate.eval_clips", b.eval_clips);
    b.batch_size = cfg.get_int("ablate.batch_size", b.batch_size);
    b.pretrain_steps = cfg.get_int("ablate.pretrain_steps", b.pretrain_steps);
    b.pretrain_lr = cfg.get_double("ablate.pretrain_lr", b.pretrain_lr);
    b.decoder_steps = cfg.get_int("ablate.decoder_steps", b.decoder_steps);
    b.decoder_lr = cfg.get_double("ablate.decoder_lr", b.decoder_lr);
    b.base_steps = cfg.get_int("ablate.base_steps", b.base_steps);
    b.base_lr = cfg.get_double("ablate.base_lr", b.base_lr);
    b.rectify_steps = cfg.get_int("ablate.rectify_steps", b.rectify_steps);
    b.rectify_lr = cfg.get_double("ablate.rectify_lr", b.rectify_lr);
    b.autoencoder = autoencoder_config(cfg);
    b.denoiser = denoiser_config(cfg);
    if (b.frames < 2 || b.train_clips < 1 || b.eval_clips < 1) throw ConfigError("ablate: invalid budget");
    return b;
}

int cmd_ablate(RunContext& ctx, const std::string& suite) {
    auto budget = budget_from(ctx.cfg, ctx.seed);
    AblationReport report;
    if (suite == "decoder") {
        report = run_decoder_ablation(budget, ctx.out_dir(), &std::cout);
    } else if (suite == "rectify") {
        fs::path ae_path;
        if (auto p = ctx.optional_checkpoint("ckpt.autoencoder")) {
            ae_path = *p;
        } else {
            ae_path = ctx.out_dir() / "autoencoder.ckpt";
            pretrain_autoencoder(budget, ae_path, &std::cout);
        }
        report = run_rectify_ablation(budget, ae_path, ctx.out_dir(), &std::cout);
    } else {
        throw ConfigError("--suite must be decoder or rectify");
    }
    const auto path = ctx.out_dir() / "ablation_report.json";
    std::ofstream(path) << report.to_json() << "\n";
    ctx.output("report", path);
    std::cout << report.table();
    return report.passed() ? kExitOk : kExitOrdering;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Cartoon interpolation with latent diffusion"};
    app.require_subcommand(1);
    RunContext ctx;
    std::string stage, suite = "decoder";
    SampleArgs sample;

    auto gen = app.add_subcommand("gen-data", "generate a synthetic cartoon dataset");
    add_common(gen, ctx);
    auto train = app.add_subcommand("train", "run one training stage");
    add_common(train, ctx);
    train->add_option("--stage", stage, "autoencoder | base | rectify | decoder | sketch")->required();
    auto samp = app.add_subcommand("sample", "interpolate between two frames");
    add_common(samp, ctx);
    samp->add_option("--first", sample.first, "first frame (PPM)")->required();
    samp->add_option("--last", sample.last, "last frame (PPM)")->required();
    samp->add_option("--frames", sample.frames, "clip length L");
    samp->add_option("--fps", sample.fps, "frame rate condition");
    samp->add_option("--caption", sample.caption, "caption text");
    samp->add_option("--sketch", sample.sketches, "INDEX=PATH, 1-based frame index (repeatable)");
    auto eval = app.add_subcommand("eval", "reconstruction metrics on the eval split");
    add_common(eval, ctx);
    auto ablate = app.add_subcommand("ablate", "train and rank the variants of a suite");
    add_common(ablate, ctx);
    ablate->add_option("--suite", suite, "decoder | rectify");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        enable_determinism();
        ctx.load();
        int code = kExitOk;
        if (gen->parsed()) {
            ctx.command = "gen-data";
            code = cmd_gen_data(ctx);
        } else if (train->parsed()) {
            ctx.command = "train " + stage;
            code = cmd_train(ctx, stage);
        } else if (samp->parsed()) {
            ctx.command = "sample";
            code = cmd_sample(ctx, sample);
        } else if (eval->parsed()) {
            ctx.command = "eval";
            code = cmd_eval(ctx);
        } else {
            ctx.command = "ablate " + suite;
            code = cmd_ablate(ctx, suite);
        }
        ctx.finish();
        return code;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ParameterError& e) {
        std::cerr << "invalid argument: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInternal;
    }
}

}  // namespace toon
