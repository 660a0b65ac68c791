#include "toon/toon_data.hpp"

#include "toon/errors.hpp"
#include "toon/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace toon {

using json = nlohmann::json;

namespace {

struct Rgb {
    double r, g, b;
};

struct NamedColor {
    const char* name;
    Rgb rgb;
};

constexpr std::array<NamedColor, 9> kObjectColors{{{"red", {0.90, 0.15, 0.15}},
                                                   {"green", {0.20, 0.70, 0.25}},
                                                   {"blue", {0.20, 0.35, 0.90}},
                                                   {"yellow", {0.95, 0.85, 0.20}},
                                                   {"orange", {0.95, 0.55, 0.10}},
                                                   {"purple", {0.60, 0.25, 0.75}},
                                                   {"pink", {0.95, 0.50, 0.70}},
                                                   {"brown", {0.55, 0.35, 0.20}},
                                                   {"cyan", {0.15, 0.75, 0.80}}}};

constexpr std::array<NamedColor, 4> kBackgrounds{{{"sky", {0.65, 0.82, 0.96}},
                                                  {"white", {0.96, 0.96, 0.94}},
                                                  {"gray", {0.78, 0.78, 0.80}},
                                                  {"sand", {0.93, 0.86, 0.68}}}};

constexpr Rgb kOutline{0.08, 0.08, 0.10};
constexpr Rgb kGround{0.45, 0.70, 0.35};

enum class Shape { Circle, Square, Triangle };
const char* shape_name(Shape s) {
    switch (s) {
        case Shape::Circle: return "circle";
        case Shape::Square: return "square";
        case Shape::Triangle: return "triangle";
    }
    return "?";
}

// Signed distance (negative inside) of a shape with "radius" r centred at (cx, cy).
double shape_sdf(Shape s, double r, double cx, double cy, double x, double y) {
    const double dx = x - cx, dy = y - cy;
    switch (s) {
        case Shape::Circle: return std::hypot(dx, dy) - r;
        case Shape::Square: return std::max(std::abs(dx), std::abs(dy)) - r;
        case Shape::Triangle: {
            // Upward isosceles triangle as the max of three half-planes.
            const double k = std::sqrt(3.0);
            double d1 = dy - r * 0.6;                                  // bottom edge
            double d2 = (k * dx - dy) / 2.0 - r * 0.6;                 // right edge
            double d3 = (-k * dx - dy) / 2.0 - r * 0.6;                // left edge
            return std::max({d1, d2, d3});
        }
    }
    return 1e9;
}

struct Sprite {
    Shape shape;
    Shape morph_to;
    Rgb color;
    std::string color_name;
    double radius0, radius1;
    std::function<std::pair<double, double>(double)> path;  // u in [0,1] -> (x, y)
};

struct Decoration {
    double x, y, r;
    Rgb color;
};

Rgb mix(const Rgb& a, const Rgb& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

}  // namespace

std::string motion_name(MotionKind k) {
    switch (k) {
        case MotionKind::Linear: return "linear";
        case MotionKind::Arc: return "arc";
        case MotionKind::Occlusion: return "occlusion";
        case MotionKind::Morph: return "morph";
    }
    return "?";
}

MotionKind parse_motion(const std::string& name) {
    for (auto k : {MotionKind::Linear, MotionKind::Arc, MotionKind::Occlusion, MotionKind::Morph})
        if (motion_name(k) == name) return k;
    throw ConfigError("unknown motion kind '" + name + "'");
}

std::string style_name(RenderStyle s) { return s == RenderStyle::Toon ? "toon" : "live"; }

RenderStyle parse_style(const std::string& name) {
    if (name == "toon") return RenderStyle::Toon;
    if (name == "live") return RenderStyle::Live;
    throw ConfigError("unknown render style '" + name + "'");
}

const std::vector<std::string>& Vocabulary::words() {
    static const std::vector<std::string> kWords{
        "<pad>", "a",       "the",     "red",      "green",  "blue",    "yellow", "orange", "purple",
        "pink",  "brown",   "cyan",    "circle",   "square", "triangle", "moves", "left",   "right",
        "up",    "down",    "arcs",    "around",   "passes", "over",    "morphs", "into",   "grows",
        "shrinks", "on",    "sky",     "white",    "gray",   "sand",    "background", "with", "stars",
        "ground", "cartoon", "live",   "scene",    "and",    "small",   "big",    "slowly", "quickly",
        "behind", "across", "toward", "away",      "from",   "camera",  "bright", "dark",   "flat",
        "shaded", "shape",  "object",  "frame",    "motion", "still",   "fast",   "then",   "turns",
        "<unk>"};
    return kWords;
}

std::int64_t Vocabulary::id(const std::string& word) {
    const auto& w = words();
    auto it = std::find(w.begin(), w.end(), word);
    if (it == w.end()) throw ParameterError("word '" + word + "' is not in the caption vocabulary");
    return it - w.begin();
}

std::vector<std::int64_t> Vocabulary::tokenize(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::int64_t> ids;
    std::string word;
    while (in >> word) ids.push_back(id(word));
    return ids;
}

std::string Vocabulary::detokenize(const std::vector<std::int64_t>& ids) {
    std::string out;
    for (auto i : ids) {
        if (i == 0) continue;
        if (!out.empty()) out += ' ';
        out += words().at(static_cast<std::size_t>(i));
    }
    return out;
}

std::vector<std::int64_t> pad_caption(std::vector<std::int64_t> ids) {
    ids.resize(static_cast<std::size_t>(kCaptionLength), 0);
    return ids;
}

ToonClip generate_clip(const ClipSpec& spec, std::uint64_t seed) {
    if (spec.frames < 1 || spec.height < 8 || spec.width < 8) throw ParameterError("generate_clip: invalid clip size");
    std::mt19937_64 rng(seed);
    auto uniform = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

    const double H = static_cast<double>(spec.height), W = static_cast<double>(spec.width);
    const double S = std::min(H, W);
    const auto L = spec.frames;
    const bool toon = spec.style == RenderStyle::Toon;

    const auto& bg = kBackgrounds[pick(kBackgrounds.size())];
    const double horizon = H * uniform(0.65, 0.8);

    std::vector<Decoration> decorations;
    const int n_decor = 3 + static_cast<int>(pick(3));
    for (int i = 0; i < n_decor; ++i)
        decorations.push_back({uniform(2.0, W - 2.0), uniform(2.0, horizon - 2.0), uniform(1.0, 2.0),
                               kObjectColors[pick(kObjectColors.size())].rgb});

    // Distinct colours for up to two sprites.
    std::vector<std::size_t> color_idx(kObjectColors.size());
    std::iota(color_idx.begin(), color_idx.end(), 0);
    std::shuffle(color_idx.begin(), color_idx.end(), rng);

    std::vector<Sprite> sprites;
    std::vector<std::string> caption;
    const Shape shapes[] = {Shape::Circle, Shape::Square, Shape::Triangle};

    auto make_sprite = [&](std::size_t color_slot, Shape shape, double radius) {
        const auto& c = kObjectColors[color_idx[color_slot]];
        return Sprite{shape, shape, c.rgb, c.name, radius, radius, {}};
    };

    switch (spec.motion) {
        case MotionKind::Linear: {
            auto s = make_sprite(0, shapes[pick(3)], S * uniform(0.14, 0.2));
            const double ang = uniform(0.0, 2.0 * std::numbers::pi);
            const double dist = S * uniform(0.3, 0.45);
            const double cx = W / 2 - std::cos(ang) * dist / 2, cy = H / 2 - std::sin(ang) * dist / 2;
            const double dx = std::cos(ang) * dist, dy = std::sin(ang) * dist;
            s.path = [=](double u) { return std::pair{cx + u * dx, cy + u * dy}; };
            const char* dir = std::abs(dx) >= std::abs(dy) ? (dx > 0 ? "right" : "left") : (dy > 0 ? "down" : "up");
            caption = {"a", s.color_name, shape_name(s.shape), "moves", dir, "on", bg.name, "background"};
            sprites.push_back(std::move(s));
            break;
        }
        case MotionKind::Arc: {
            auto s = make_sprite(0, shapes[pick(3)], S * uniform(0.12, 0.18));
            const double cx = W / 2, cy = H / 2, R = S * uniform(0.2, 0.28);
            const double a0 = uniform(0.0, 2.0 * std::numbers::pi);
            const double sweep = (pick(2) ? 1.0 : -1.0) * uniform(std::numbers::pi / 2, std::numbers::pi);
            s.path = [=](double u) {
                return std::pair{cx + R * std::cos(a0 + u * sweep), cy + R * std::sin(a0 + u * sweep)};
            };
            caption = {"a", s.color_name, shape_name(s.shape), "arcs", "around", "on", bg.name, "background"};
            sprites.push_back(std::move(s));
            break;
        }
        case MotionKind::Occlusion: {
            // B: static square; A: circle large enough to cover B, centred on B at the middle frame.
            const double hb = S * uniform(0.08, 0.11);
            auto b = make_sprite(1, Shape::Square, hb);
            const double qx = W * uniform(0.4, 0.6), qy = H * uniform(0.4, 0.6);
            b.path = [=](double) { return std::pair{qx, qy}; };
            auto a = make_sprite(0, Shape::Circle, hb * std::sqrt(2.0) + 1.5);
            const double kc = static_cast<double>((L - 1) / 2);
            const double uc = L > 1 ? kc / static_cast<double>(L - 1) : 0.0;
            const double ang = uniform(0.0, 2.0 * std::numbers::pi);
            const double span = S * uniform(0.45, 0.6);
            const double vx = std::cos(ang) * span, vy = std::sin(ang) * span;
            a.path = [=](double u) { return std::pair{qx + (u - uc) * vx, qy + (u - uc) * vy}; };
            caption = {"a", a.color_name, "circle", "passes", "over", "a", b.color_name, "square"};
            sprites.push_back(std::move(b));
            sprites.push_back(std::move(a));
            break;
        }
        case MotionKind::Morph: {
            auto s = make_sprite(0, pick(2) ? Shape::Circle : Shape::Triangle, S * uniform(0.12, 0.16));
            s.morph_to = Shape::Square;
            s.radius1 = s.radius0 * uniform(1.3, 1.6);
            const double cx = W * uniform(0.4, 0.6), cy = H * uniform(0.4, 0.6);
            s.path = [=](double) { return std::pair{cx, cy}; };
            caption = {"a", s.color_name, shape_name(s.shape), "morphs", "into", "square", "and", "grows"};
            sprites.push_back(std::move(s));
            break;
        }
    }

    // Static per-clip texture for the live-action style.
    std::vector<double> texture;
    if (!toon) {
        std::normal_distribution<double> noise(0.0, 0.03);
        texture.resize(static_cast<std::size_t>(spec.height * spec.width));
        for (auto& v : texture) v = noise(rng);
    }

    ToonClip clip;
    clip.fps = spec.fps;
    clip.motion = spec.motion;
    clip.style = spec.style;
    std::vector<std::int64_t> ids;
    for (const auto& w : caption) ids.push_back(Vocabulary::id(w));
    clip.caption = pad_caption(ids);

    clip.frames = torch::empty({L, 3, spec.height, spec.width});
    for (std::size_t i = 0; i < sprites.size(); ++i)
        clip.object_masks.push_back(torch::zeros({L, spec.height, spec.width}, torch::kBool));
    auto fa = clip.frames.accessor<float, 4>();
    std::vector<decltype(clip.object_masks[0].accessor<bool, 3>())> ma;
    for (auto& m : clip.object_masks) ma.push_back(m.accessor<bool, 3>());

    const double outline_w = 1.0;
    for (std::int64_t k = 0; k < L; ++k) {
        const double u = L > 1 ? static_cast<double>(k) / static_cast<double>(L - 1) : 0.0;
        std::vector<std::pair<double, double>> centers;
        for (const auto& s : sprites) centers.push_back(s.path(u));
        for (std::int64_t y = 0; y < spec.height; ++y) {
            for (std::int64_t x = 0; x < spec.width; ++x) {
                const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
                Rgb c = py < horizon ? bg.rgb : kGround;
                if (toon && std::abs(py - horizon) < 0.5) c = kOutline;
                if (!toon) c = mix(c, {0.0, 0.0, 0.0}, 0.25 * py / H);
                for (const auto& d : decorations) {
                    const double sd = std::max(std::abs(px - d.x), std::abs(py - d.y)) - d.r;
                    if (sd <= 0) c = (toon && sd > -0.75) ? kOutline : d.color;
                }
                for (std::size_t i = 0; i < sprites.size(); ++i) {
                    const auto& s = sprites[i];
                    const auto [cx, cy] = centers[i];
                    const double r = s.radius0 + (s.radius1 - s.radius0) * u;
                    double sd = shape_sdf(s.shape, r, cx, cy, px, py);
                    if (s.morph_to != s.shape) sd = (1.0 - u) * sd + u * shape_sdf(s.morph_to, r, cx, cy, px, py);
                    if (sd > 0) continue;
                    ma[i][k][y][x] = true;
                    if (toon) {
                        c = sd > -outline_w ? kOutline : s.color;
                    } else {
                        const double shade = 0.7 + 0.3 * std::clamp(-sd / r, 0.0, 1.0);
                        c = mix({0, 0, 0}, s.color, shade);
                    }
                }
                double tex = toon ? 0.0 : texture[static_cast<std::size_t>(y * spec.width + x)];
                fa[k][0][y][x] = static_cast<float>(std::clamp(c.r + tex, 0.0, 1.0) * 2.0 - 1.0);
                fa[k][1][y][x] = static_cast<float>(std::clamp(c.g + tex, 0.0, 1.0) * 2.0 - 1.0);
                fa[k][2][y][x] = static_cast<float>(std::clamp(c.b + tex, 0.0, 1.0) * 2.0 - 1.0);
            }
        }
    }
    return clip;
}

torch::Tensor block_matching_flow(const torch::Tensor& a, const torch::Tensor& b, std::int64_t block,
                                  std::int64_t radius) {
    auto luma = [](const torch::Tensor& f) {
        return (0.299 * f[0] + 0.587 * f[1] + 0.114 * f[2]).to(torch::kFloat64).contiguous();
    };
    auto la = luma(a), lb = luma(b);
    const auto H = la.size(0), W = la.size(1);
    const auto by = H / block, bx = W / block;
    auto flow = torch::zeros({by, bx, 2}, torch::kFloat64);
    auto pa = la.accessor<double, 2>(), pb = lb.accessor<double, 2>();
    auto fl = flow.accessor<double, 3>();
    for (std::int64_t i = 0; i < by; ++i) {
        for (std::int64_t j = 0; j < bx; ++j) {
            const auto y0 = i * block, x0 = j * block;
            double best = std::numeric_limits<double>::infinity();
            std::int64_t best_r2 = 0, best_dy = 0, best_dx = 0;
            for (std::int64_t dy = -radius; dy <= radius; ++dy) {
                for (std::int64_t dx = -radius; dx <= radius; ++dx) {
                    if (y0 + dy < 0 || x0 + dx < 0 || y0 + dy + block > H || x0 + dx + block > W) continue;
                    double sad = 0.0;
                    for (std::int64_t y = 0; y < block; ++y)
                        for (std::int64_t x = 0; x < block; ++x)
                            sad += std::abs(pa[y0 + y][x0 + x] - pb[y0 + dy + y][x0 + dx + x]);
                    const auto r2 = dy * dy + dx * dx;
                    // Ties go to the smaller displacement so flat regions read as static.
                    if (sad < best - 1e-12 || (std::abs(sad - best) <= 1e-12 && r2 < best_r2)) {
                        best = sad;
                        best_r2 = r2;
                        best_dy = dy;
                        best_dx = dx;
                    }
                }
            }
            fl[i][j][0] = static_cast<double>(best_dy);
            fl[i][j][1] = static_cast<double>(best_dx);
        }
    }
    return flow;
}

double mean_flow_magnitude(const ToonClip& clip, std::int64_t block, std::int64_t radius) {
    const auto L = clip.length();
    if (L < 2) throw ParameterError("flow magnitude needs at least two frames");
    double total = 0.0;
    for (std::int64_t k = 0; k + 1 < L; ++k) {
        auto flow = block_matching_flow(clip.frames[k], clip.frames[k + 1], block, radius);
        total += flow.pow(2).sum(-1).sqrt().mean().item<double>();
    }
    return total / static_cast<double>(L - 1);
}

FilterReport flow_magnitude_filter(const std::string& clip_id, const ToonClip& clip, double threshold) {
    FilterReport r;
    r.clip_id = clip_id;
    const double score = mean_flow_magnitude(clip);
    r.scores["flow"] = score;
    r.kept = score >= threshold;
    if (!r.kept) r.reasons.push_back("flow below threshold");
    return r;
}

PipelineResult run_pipeline(const std::vector<NamedClip>& clips,
                            const std::vector<std::shared_ptr<ClipScorer>>& scorers,
                            const std::map<std::string, Threshold>& thresholds, std::int64_t eval_count,
                            std::uint64_t seed) {
    if (scorers.empty()) throw ConfigError("run_pipeline: at least one scorer is required");
    std::set<std::string> names;
    for (const auto& s : scorers) names.insert(s->name());
    for (const auto& [name, _] : thresholds)
        if (!names.count(name)) throw ConfigError("run_pipeline: threshold for missing scorer '" + name + "'");

    PipelineResult result;
    std::vector<std::string> kept;
    for (const auto& nc : clips) {
        FilterReport r;
        r.clip_id = nc.id;
        for (const auto& s : scorers) r.scores[s->name()] = s->score(nc.clip);
        r.kept = true;
        for (const auto& [name, th] : thresholds) {
            if (!th.accepts(r.scores.at(name))) {
                r.kept = false;
                r.reasons.push_back(name + " outside threshold");
            }
        }
        if (r.kept) kept.push_back(nc.id);
        result.reports.push_back(std::move(r));
    }

    std::sort(kept.begin(), kept.end());
    std::mt19937_64 rng(seed);
    std::shuffle(kept.begin(), kept.end(), rng);
    const auto n_eval = std::min<std::size_t>(static_cast<std::size_t>(std::max<std::int64_t>(eval_count, 0)), kept.size());
    result.eval_ids.assign(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(n_eval));
    result.train_ids.assign(kept.begin() + static_cast<std::ptrdiff_t>(n_eval), kept.end());
    std::sort(result.eval_ids.begin(), result.eval_ids.end());
    std::sort(result.train_ids.begin(), result.train_ids.end());
    return result;
}

namespace {

std::string frame_name(std::int64_t k) {
    std::ostringstream os;
    os << "frame_" << std::setw(3) << std::setfill('0') << k << ".ppm";
    return os.str();
}

}  // namespace

void save_clip(const std::filesystem::path& dir, const ToonClip& clip) {
    std::filesystem::create_directories(dir);
    for (std::int64_t k = 0; k < clip.length(); ++k) write_ppm(dir / frame_name(k), clip.frames[k]);
    json meta{{"frames", clip.length()},
              {"height", clip.frames.size(2)},
              {"width", clip.frames.size(3)},
              {"fps", clip.fps},
              {"motion_kind", motion_name(clip.motion)},
              {"style", style_name(clip.style)},
              {"caption_tokens", clip.caption},
              {"caption", Vocabulary::detokenize(clip.caption)}};
    std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
}

ToonClip load_clip(const std::filesystem::path& dir) {
    std::ifstream f(dir / "meta.json");
    if (!f) throw IoError("missing meta.json in " + dir.string());
    json meta;
    try {
        meta = json::parse(f);
    } catch (const json::exception& e) {
        throw IoError("bad meta.json in " + dir.string() + ": " + e.what());
    }
    ToonClip clip;
    const auto L = meta.at("frames").get<std::int64_t>();
    std::vector<torch::Tensor> frames;
    for (std::int64_t k = 0; k < L; ++k) frames.push_back(read_netpbm(dir / frame_name(k)));
    clip.frames = torch::stack(frames, 0);
    clip.fps = meta.at("fps").get<std::int64_t>();
    clip.motion = parse_motion(meta.at("motion_kind").get<std::string>());
    clip.style = parse_style(meta.at("style").get<std::string>());
    clip.caption = meta.at("caption_tokens").get<std::vector<std::int64_t>>();
    return clip;
}

void write_dataset(const std::filesystem::path& root, const std::vector<NamedClip>& clips,
                   const PipelineResult& result) {
    std::filesystem::create_directories(root / "clips");
    std::map<std::string, std::string> split;
    for (const auto& id : result.train_ids) split[id] = "train";
    for (const auto& id : result.eval_ids) split[id] = "eval";

    std::ofstream manifest(root / "manifest.jsonl"), reports(root / "reports.jsonl");
    for (std::size_t i = 0; i < clips.size(); ++i) {
        const auto& nc = clips[i];
        const auto& r = result.reports.at(i);
        json rep{{"id", r.clip_id}, {"scores", r.scores}, {"kept", r.kept}, {"reasons", r.reasons}};
        reports << rep.dump() << "\n";
        if (!r.kept) continue;
        save_clip(root / "clips" / nc.id, nc.clip);
        json entry{{"id", nc.id},
                   {"path", "clips/" + nc.id},
                   {"split", split.at(nc.id)},
                   {"scores", r.scores},
                   {"motion_kind", motion_name(nc.clip.motion)}};
        manifest << entry.dump() << "\n";
    }
}

std::vector<ToonClip> load_split(const std::filesystem::path& root, const std::string& split) {
    std::ifstream manifest(root / "manifest.jsonl");
    if (!manifest) throw IoError("missing manifest.jsonl in " + root.string());
    std::vector<ToonClip> out;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        auto entry = json::parse(line);
        if (entry.at("split").get<std::string>() == split)
            out.push_back(load_clip(root / entry.at("path").get<std::string>()));
    }
    return out;
}

}  // namespace toon
