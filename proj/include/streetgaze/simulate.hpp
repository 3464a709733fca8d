#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "streetgaze/gaze_ingest.hpp"
#include "streetgaze/survey_service.hpp"

namespace streetgaze {

struct SimulationConfig {
    std::size_t images = 8;
    std::size_t participants = 5;
    std::size_t pairs_per_session = 10;
    std::uint64_t seed = 1;
    std::size_t width = 160;
    std::size_t height = 120;
    /// class index -> share of fixations aimed at that class; the rest land anywhere.
    std::map<std::size_t, double> saliency_bias = {{20, 1.0}};
    ScreenGeometry screen{160.0, 120.0, 240.0, 700.0};
    std::size_t fixations_per_view = 5;
    double blink_rate = 0.02;
    bool record_gaze = true;
    bool xai = true;
    SchedulerPolicy policy = SchedulerPolicy::Balanced;

    /// Throws Validation for infeasible settings, e.g. zero images.
    void validate() const;
};

/// JSON with comments; unknown fields are rejected.
SimulationConfig parse_simulation_config(std::string_view text);
SimulationConfig load_simulation_config(const std::filesystem::path& path);

struct SimulationSummary {
    std::size_t images = 0;
    std::size_t sessions = 0;
    std::size_t comparisons = 0;
    std::size_t gaze_samples = 0;
    std::vector<std::string> files;  // relative to the output directory, sorted
};

/// Writes a complete synthetic study into out_dir: images/, segmentation/,
/// comparisons.jsonl, gaze.jsonl, sessions.jsonl, xai/<method>/, lpips.jsonl,
/// scores.csv, study.csv, exposure.csv, exposure_summary.json and a pipeline
/// manifest.json whose output_dir is out_dir/out.
SimulationSummary cmd_simulate(const SimulationConfig& config, const std::filesystem::path& out_dir);

}  // namespace streetgaze
