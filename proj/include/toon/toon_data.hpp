#pragma once

// Procedural cartoon clips (flat colours, dark outlines, simple motions) and a
// dataset-construction pipeline with pluggable clip scorers.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace toon {

enum class MotionKind { Linear, Arc, Occlusion, Morph };
enum class RenderStyle { Toon, Live };

std::string motion_name(MotionKind k);
MotionKind parse_motion(const std::string& name);
std::string style_name(RenderStyle s);
RenderStyle parse_style(const std::string& name);

/// Fixed caption vocabulary; id 0 is padding.
class Vocabulary {
public:
    static const std::vector<std::string>& words();
    static std::int64_t size() { return static_cast<std::int64_t>(words().size()); }
    static std::int64_t id(const std::string& word);  // throws ParameterError for unknown words
    static std::vector<std::int64_t> tokenize(const std::string& text);
    static std::string detokenize(const std::vector<std::int64_t>& ids);
};

inline constexpr std::int64_t kCaptionLength = 12;

/// Pads / truncates token ids to kCaptionLength.
std::vector<std::int64_t> pad_caption(std::vector<std::int64_t> ids);

struct ClipSpec {
    std::int64_t frames = 16;
    std::int64_t height = 32;
    std::int64_t width = 32;
    MotionKind motion = MotionKind::Linear;
    RenderStyle style = RenderStyle::Toon;
    std::int64_t fps = 8;
};

struct ToonClip {
    torch::Tensor frames;  // [L, 3, H, W] in [-1, 1]
    std::vector<std::int64_t> caption;
    std::int64_t fps = 8;
    MotionKind motion = MotionKind::Linear;
    RenderStyle style = RenderStyle::Toon;
    /// Per-object coverage masks [L, H, W] (bool), in draw order (later objects on top).
    std::vector<torch::Tensor> object_masks;

    std::int64_t length() const { return frames.size(0); }
};

ToonClip generate_clip(const ClipSpec& spec, std::uint64_t seed);

/// Dense block-matching displacement between two frames: [blocks_y, blocks_x, 2] (dy, dx).
torch::Tensor block_matching_flow(const torch::Tensor& a, const torch::Tensor& b, std::int64_t block = 8,
                                  std::int64_t radius = 4);

/// Mean block displacement magnitude over all consecutive frame pairs.
double mean_flow_magnitude(const ToonClip& clip, std::int64_t block = 8, std::int64_t radius = 4);

struct Threshold {
    double min = -std::numeric_limits<double>::infinity();
    double max = std::numeric_limits<double>::infinity();
    bool accepts(double v) const { return v >= min && v <= max; }
};

struct FilterReport {
    std::string clip_id;
    std::map<std::string, double> scores;
    bool kept = false;
    std::vector<std::string> reasons;
};

FilterReport flow_magnitude_filter(const std::string& clip_id, const ToonClip& clip, double threshold);

class ClipScorer {
public:
    virtual ~ClipScorer() = default;
    virtual std::string name() const = 0;
    virtual double score(const ToonClip& clip) const = 0;
};

/// Mean optical-flow magnitude via block matching (8x8 blocks, +-4 search).
class FlowScorer final : public ClipScorer {
public:
    std::string name() const override { return "flow"; }
    double score(const ToonClip& clip) const override { return mean_flow_magnitude(clip); }
};

/// Stand-in for an external model (OCR text area, aesthetic, caption alignment):
/// returns whatever the supplied function computes.
class ExternalScorer final : public ClipScorer {
public:
    ExternalScorer(std::string name, std::function<double(const ToonClip&)> fn)
        : name_(std::move(name)), fn_(std::move(fn)) {}
    std::string name() const override { return name_; }
    double score(const ToonClip& clip) const override { return fn_(clip); }

private:
    std::string name_;
    std::function<double(const ToonClip&)> fn_;
};

/// Shot boundary detection interface for real footage; synthetic clips are single shots.
class SceneSplitter {
public:
    virtual ~SceneSplitter() = default;
    /// Half-open frame ranges of the detected shots.
    virtual std::vector<std::pair<std::int64_t, std::int64_t>> split(const torch::Tensor& frames) const = 0;
};

class SingleShotSplitter final : public SceneSplitter {
public:
    std::vector<std::pair<std::int64_t, std::int64_t>> split(const torch::Tensor& frames) const override {
        return {{0, frames.size(0)}};
    }
};

struct NamedClip {
    std::string id;
    ToonClip clip;
};

struct PipelineResult {
    std::vector<FilterReport> reports;  // one per input clip, input order
    std::vector<std::string> train_ids;
    std::vector<std::string> eval_ids;
};

/// Scores every clip with every scorer, keeps clips meeting all thresholds and
/// splits the kept set by a seeded shuffle. Thresholds must name existing scorers.
PipelineResult run_pipeline(const std::vector<NamedClip>& clips,
                            const std::vector<std::shared_ptr<ClipScorer>>& scorers,
                            const std::map<std::string, Threshold>& thresholds, std::int64_t eval_count,
                            std::uint64_t seed);

// ---- storage -------------------------------------------------------------------

/// Writes frame_XXX.ppm files plus meta.json into `dir`.
void save_clip(const std::filesystem::path& dir, const ToonClip& clip);
ToonClip load_clip(const std::filesystem::path& dir);

/// Writes clips/<id>/, manifest.jsonl (kept clips) and reports.jsonl (all clips).
void write_dataset(const std::filesystem::path& root, const std::vector<NamedClip>& clips,
                   const PipelineResult& result);

/// Loads the clips of one split ("train" or "eval") listed in manifest.jsonl.
std::vector<ToonClip> load_split(const std::filesystem::path& root, const std::string& split);

}  // namespace toon
