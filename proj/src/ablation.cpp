#include "toon/ablation.hpp"

#include "toon/errors.hpp"
#include "toon/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace toon {

using json = nlohmann::json;

bool AblationReport::passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed || c.advisory; });
}

std::string AblationReport::table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "suite: " << suite << "\n";
    if (!decoders.empty()) {
        os << std::left << std::setw(14) << "variant" << std::setw(10) << "psnr" << std::setw(10) << "ssim"
           << "index curve\n";
        for (const auto& r : decoders) {
            os << std::setw(14) << r.label << std::setw(10) << r.psnr << std::setw(10) << r.ssim;
            for (auto v : r.index_curve) os << std::setprecision(2) << v << " ";
            os << std::setprecision(4) << "\n";
        }
    }
    if (!losses.empty()) {
        os << std::left << std::setw(14) << "variant" << "eval loss\n";
        for (const auto& [label, loss] : losses) os << std::setw(14) << label << loss << "\n";
    }
    for (const auto& c : checks)
        os << (c.passed ? "PASS " : (c.advisory ? "WARN " : "FAIL ")) << c.description << " (" << c.lhs << " vs "
           << c.rhs << ")\n";
    return os.str();
}

std::string AblationReport::to_json() const {
    json j;
    j["suite"] = suite;
    j["passed"] = passed();
    j["decoders"] = json::array();
    for (const auto& r : decoders) j["decoders"].push_back(json::parse(r.to_json()));
    j["losses"] = json::array();
    for (const auto& [label, loss] : losses) j["losses"].push_back({{"variant", label}, {"eval_loss", loss}});
    j["checks"] = json::array();
    for (const auto& c : checks)
        j["checks"].push_back({{"description", c.description},
                               {"lhs", c.lhs},
                               {"rhs", c.rhs},
                               {"min_gap", c.min_gap},
                               {"passed", c.passed},
                               {"advisory", c.advisory}});
    return j.dump(2);
}

std::vector<ToonClip> make_clips(std::int64_t count, std::int64_t frames, std::int64_t height, std::int64_t width,
                                 RenderStyle style, std::uint64_t seed) {
    const MotionKind kinds[] = {MotionKind::Linear, MotionKind::Arc, MotionKind::Occlusion, MotionKind::Morph};
    std::vector<ToonClip> out;
    for (std::int64_t i = 0; i < count; ++i) {
        ClipSpec spec;
        spec.frames = frames;
        spec.height = height;
        spec.width = width;
        spec.style = style;
        spec.motion = kinds[i % 4];
        out.push_back(generate_clip(spec, derive_seed(seed, i, 17)));
    }
    return out;
}

std::vector<OrderingCheck> decoder_checks(const std::map<std::string, MetricReport>& by_label, double min_gap) {
    auto get = [&](const std::string& label) -> const MetricReport& {
        auto it = by_label.find(label);
        if (it == by_label.end()) throw ParameterError("decoder_checks: missing variant " + label);
        return it->second;
    };
    const auto& full = get(DecoderVariant::full().label());
    const auto& wo_p3d = get(DecoderVariant::without_p3d().label());
    const auto& vanilla = get(DecoderVariant::vanilla().label());

    std::vector<OrderingCheck> checks;
    auto gap_check = [&](const MetricReport& a, const MetricReport& b) {
        OrderingCheck c;
        c.description = "psnr(" + a.label + ") >= psnr(" + b.label + ") + " + std::to_string(min_gap).substr(0, 4) + " dB";
        c.lhs = a.psnr;
        c.rhs = b.psnr;
        c.min_gap = min_gap;
        c.passed = a.psnr >= b.psnr + min_gap;
        return c;
    };
    checks.push_back(gap_check(full, wo_p3d));
    checks.push_back(gap_check(wo_p3d, vanilla));

    const auto& curve = full.index_curve;
    const double ends = std::min(curve.front(), curve.back());
    double middle = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k + 1 < curve.size(); ++k) middle = std::max(middle, curve[k]);
    const double lowest = *std::min_element(curve.begin(), curve.end());

    OrderingCheck privilege;
    privilege.description = "full curve: min endpoint psnr >= max middle psnr - 0.1 dB";
    privilege.lhs = ends;
    privilege.rhs = middle;
    privilege.min_gap = -0.1;
    privilege.passed = curve.size() <= 2 || ends >= middle - 0.1;
    checks.push_back(privilege);

    OrderingCheck strict;
    strict.description = "full curve: endpoints exceed the curve minimum";
    strict.lhs = ends;
    strict.rhs = lowest;
    strict.passed = curve.size() <= 2 || ends > lowest;
    checks.push_back(strict);
    return checks;
}

AblationReport evaluate_decoder_checkpoints(const std::map<std::string, std::filesystem::path>& checkpoints,
                                            const AutoencoderConfig& cfg, const std::vector<ToonClip>& eval) {
    const std::vector<DecoderVariant> variants{DecoderVariant::full(), DecoderVariant::without_p3d(),
                                               DecoderVariant::vanilla()};
    AblationReport report;
    report.suite = "decoder";
    std::map<std::string, MetricReport> by_label;
    for (const auto& v : variants) {
        auto it = checkpoints.find(v.label());
        if (it == checkpoints.end() || !std::filesystem::exists(it->second))
            throw IoError("missing decoder checkpoint for variant " + v.label());
        Autoencoder ae(cfg, v);
        ae->load_from(TensorArchive::load(it->second));
        ae->eval();
        by_label[v.label()] = evaluate_reconstruction(ae, eval, v.label());
    }
    for (const auto& [label, r] : by_label) report.decoders.push_back(r);
    std::sort(report.decoders.begin(), report.decoders.end(),
              [](const auto& a, const auto& b) { return a.psnr > b.psnr; });
    report.checks = decoder_checks(by_label);
    return report;
}

void pretrain_autoencoder(const AblationBudget& budget, const std::filesystem::path& path, std::ostream* progress) {
    auto train = make_clips(budget.train_clips, budget.frames, budget.height, budget.width, RenderStyle::Toon,
                            derive_seed(budget.seed, 0, 101));
    torch::manual_seed(budget.seed);
    Autoencoder ae(budget.autoencoder, DecoderVariant::vanilla());
    PatchDiscriminator disc;
    auto cfg = StageConfig::defaults(Stage::Autoencoder);
    cfg.steps = budget.pretrain_steps;
    cfg.learning_rate = budget.pretrain_lr;
    cfg.seed = budget.seed;
    cfg.audit_every = std::max<std::int64_t>(1, budget.pretrain_steps);
    auto result = train_autoencoder(ae, disc, train, cfg);
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    result.checkpoint.save(path);
    if (progress)
        *progress << "pretrained autoencoder: " << budget.pretrain_steps << " steps, final loss "
                  << (result.records.empty() ? 0.0 : result.records.back().loss) << std::endl;
}

AblationReport run_decoder_ablation(const AblationBudget& budget, const std::filesystem::path& workdir,
                                    std::ostream* progress) {
    std::filesystem::create_directories(workdir);
    auto train = make_clips(budget.train_clips, budget.frames, budget.height, budget.width, RenderStyle::Toon,
                            derive_seed(budget.seed, 0, 101));
    auto eval = make_clips(budget.eval_clips, budget.frames, budget.height, budget.width, RenderStyle::Toon,
                           derive_seed(budget.seed, 0, 202));

    const auto pretrained = workdir / "autoencoder.ckpt";
    pretrain_autoencoder(budget, pretrained, progress);

    std::map<std::string, std::filesystem::path> checkpoints;
    for (const auto& v : {DecoderVariant::full(), DecoderVariant::without_p3d(), DecoderVariant::vanilla()}) {
        torch::manual_seed(budget.seed);
        Autoencoder ae(budget.autoencoder, v);
        ae->load_from(TensorArchive::load(pretrained));
        PatchDiscriminator disc;
        auto cfg = StageConfig::defaults(Stage::Decoder);
        cfg.steps = budget.decoder_steps;
        cfg.learning_rate = budget.decoder_lr;
        cfg.batch_size = budget.batch_size;
        cfg.frames = budget.frames;
        cfg.fps_set = {};
        cfg.seed = budget.seed;
        cfg.audit_every = 100;
        auto result = train_decoder(ae, disc, train, cfg);
        const auto path = workdir / ("decoder_" + v.label() + ".ckpt");
        result.checkpoint.save(path);
        checkpoints[v.label()] = path;
        if (progress)
            *progress << "trained decoder " << v.label() << ": " << budget.decoder_steps << " steps, final loss "
                      << (result.records.empty() ? 0.0 : result.records.back().loss) << std::endl;
    }

    auto report = evaluate_decoder_checkpoints(checkpoints, budget.autoencoder, eval);
    std::ofstream(workdir / "decoder_report.json") << report.to_json() << "\n";
    std::ofstream(workdir / "decoder_report.txt") << report.table();
    return report;
}

AblationReport run_rectify_ablation(const AblationBudget& budget, const std::filesystem::path& autoencoder_ckpt,
                                    const std::filesystem::path& workdir, std::ostream* progress) {
    if (!std::filesystem::exists(autoencoder_ckpt)) throw IoError("missing autoencoder checkpoint " + autoencoder_ckpt.string());
    std::filesystem::create_directories(workdir);
    Autoencoder ae(budget.autoencoder, DecoderVariant::vanilla());
    ae->load_from(TensorArchive::load(autoencoder_ckpt));

    auto live = make_clips(budget.train_clips, budget.frames, budget.height, budget.width, RenderStyle::Live,
                           derive_seed(budget.seed, 0, 303));
    auto toon_train = make_clips(budget.train_clips, budget.frames, budget.height, budget.width, RenderStyle::Toon,
                                 derive_seed(budget.seed, 0, 404));
    auto toon_eval = make_clips(budget.eval_clips, budget.frames, budget.height, budget.width, RenderStyle::Toon,
                                derive_seed(budget.seed, 0, 505));

    const auto base_path = workdir / "base.ckpt";
    {
        torch::manual_seed(budget.seed);
        InterpDenoiser model(budget.denoiser);
        auto cfg = StageConfig::defaults(Stage::Base);
        cfg.steps = budget.base_steps;
        cfg.learning_rate = budget.base_lr;
        cfg.batch_size = budget.batch_size;
        cfg.frames = budget.frames;
        cfg.fps_set = {};
        cfg.seed = budget.seed;
        auto result = train_denoiser(model, ae, live, cfg);
        result.checkpoint.save(base_path);
        if (progress) *progress << "base stage: " << budget.base_steps << " steps" << std::endl;
    }

    AblationReport report;
    report.suite = "rectify";
    std::map<std::string, double> by_variant;
    for (auto v : {FreezeVariant::I, FreezeVariant::II, FreezeVariant::III, FreezeVariant::IV, FreezeVariant::V}) {
        const auto policy = FreezePolicy::make(v);
        InterpDenoiser model(budget.denoiser);
        import_module(*model, "denoiser/", TensorArchive::load(base_path));
        if (v != FreezeVariant::I) {
            auto cfg = StageConfig::defaults(Stage::Rectify);
            cfg.steps = budget.rectify_steps;
            cfg.learning_rate = budget.rectify_lr;
            cfg.batch_size = budget.batch_size;
            cfg.frames = budget.frames;
            cfg.fps_set = {};
            cfg.seed = budget.seed;
            cfg.freeze = v;
            auto result = train_rectify(model, ae, toon_train, cfg);
            result.checkpoint.save(workdir / ("rectify_" + policy.name() + ".ckpt"));
        }
        const double loss = eval_diffusion_loss(model, ae, toon_eval, budget.frames, derive_seed(budget.seed, 0, 606), 4, policy);
        by_variant[policy.name()] = loss;
        report.losses.emplace_back(policy.name(), loss);
        if (progress) *progress << "variant " << policy.name() << ": eval loss " << loss << std::endl;
    }
    std::sort(report.losses.begin(), report.losses.end(), [](const auto& a, const auto& b) { return a.second < b.second; });

    OrderingCheck c;
    c.description = "eval loss(IV) <= eval loss(II)";
    c.lhs = by_variant.at("IV");
    c.rhs = by_variant.at("II");
    c.passed = c.lhs <= c.rhs;
    c.advisory = true;
    report.checks.push_back(c);

    std::ofstream(workdir / "rectify_report.json") << report.to_json() << "\n";
    std::ofstream(workdir / "rectify_report.txt") << report.table();
    return report;
}

}  // namespace toon
