#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "streetgaze/attention_heatmap.hpp"
#include "streetgaze/gaze_ingest.hpp"
#include "streetgaze/segmentation_metrics.hpp"
#include "streetgaze/similarity.hpp"

namespace streetgaze {

struct PipelineParams {
    std::optional<double> sigma_px;  // default: half a degree on the configured screen
    std::vector<double> thresholds = {15.0, 30.0};
    std::size_t group_threshold = 3;
    std::uint64_t seed = 0;
    double source_hz = 120.0;
    double target_hz = 60.0;
    IvtParams ivt;
    std::size_t top_k = 10;
};

struct PipelineManifest {
    std::filesystem::path image_dir;
    std::filesystem::path segmentation_dir;
    std::vector<std::filesystem::path> gaze_logs;
    std::filesystem::path comparison_log;
    std::map<XaiMethod, std::filesystem::path> xai_dirs;
    std::optional<std::filesystem::path> lpips_scores;
    std::filesystem::path output_dir;
    ScreenGeometry screen;
    PipelineParams params;

    /// Throws Validation naming the offending field.
    void validate() const;
    double sigma() const;
};

/// JSON with comments. Relative paths resolve against base_dir.
PipelineManifest parse_pipeline_manifest(std::string_view text, const std::filesystem::path& base_dir);
PipelineManifest load_pipeline_manifest(const std::filesystem::path& path);
/// Paths are written relative to base_dir when they live under it.
std::string serialize_pipeline_manifest(const PipelineManifest& m, const std::filesystem::path& base_dir);

// Stage building blocks, shared by `run` and the single-stage commands.

struct IngestResult {
    std::vector<FixationEvent> fixations;
    std::vector<ParseDiagnostic> diagnostics;  // line numbers are per input file
    std::size_t samples = 0;
    std::size_t streams = 0;
};

/// parse (lenient) -> downsample -> filter_invalid -> I-VT, per (session, image) stream.
IngestResult ingest_gaze_logs(std::span<const std::filesystem::path> logs, const ScreenGeometry& screen,
                              const PipelineParams& params);
std::vector<FixationEvent> fixations_from_samples(const std::vector<RawGazeSample>& samples,
                                                  const ScreenGeometry& screen, const PipelineParams& params);

struct HumanHeatmap {
    AttentionHeatmap heatmap;
    std::size_t participants = 0;
};

/// One rank-normalized map per session, then aggregated. Empty when nobody fixated the image.
std::optional<HumanHeatmap> human_heatmap(std::span<const FixationEvent> fixations, std::size_t width,
                                          std::size_t height, double sigma);

/// Segmentation maps found as <image_id>.png in dir, sorted by id.
std::vector<std::pair<std::string, std::filesystem::path>> list_pngs(const std::filesystem::path& dir);

/// Grid of hue from a heatmap exchange PNG.
HueMap load_hue(const std::filesystem::path& heatmap_png);

struct MethodInputs {
    XaiMethod method;
    std::filesystem::path dir;
};

/// Per-image similarity scores between human and XAI heatmaps for every
/// method whose <dir>/<image_id>.png exists.
std::vector<ImageScores> score_methods(const std::vector<std::string>& image_ids,
                                       const std::filesystem::path& human_dir,
                                       const std::filesystem::path& segmentation_dir,
                                       std::span<const MethodInputs> methods, const LpipsTable* lpips);

// Whole pipeline.

struct StageStatus {
    std::string name;
    std::string status;  // ok, failed, skipped, not-run
    std::string message;
    std::vector<std::string> outputs;  // relative to the output directory
};

struct RunResult {
    std::vector<StageStatus> stages;
    bool ok = true;
    std::optional<ErrorKind> failure;
};

RunResult cmd_run(const PipelineManifest& manifest);

/// Re-renders report.md and report.html from the files a run left in output_dir.
void cmd_report(const std::filesystem::path& output_dir);

/// File-name label for a hue threshold, e.g. 15 -> "15", 22.5 -> "22.5".
std::string threshold_label(double t);

}  // namespace streetgaze
