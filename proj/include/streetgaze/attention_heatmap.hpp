#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "streetgaze/gaze_ingest.hpp"
#include "streetgaze/grid.hpp"
#include "streetgaze/png_io.hpp"

namespace streetgaze {

/// Raw fixation-millisecond mass per pixel.
struct AttentionAccumulator {
    Grid<double> cells;
};

/// Rank-normalized attention in (0, 1]; 1 marks the most attended cells.
struct AttentionHeatmap {
    Grid<double> cells;
};

/// Hue in [0, 150]; 0 is maximal attention.
struct HueMap {
    Grid<double> cells;
};

inline constexpr double kMaxHue = 150.0;

/// Gaussian width matching 0.5 degrees of visual angle for the given screen.
double default_sigma_px(const ScreenGeometry& geom);

/// Deposits one duration-weighted isotropic Gaussian per fixation, truncated
/// to a square window of +/-3 sigma around the centroid. Pixel (x, y) is
/// sampled at its centre (x + 0.5, y + 0.5).
AttentionAccumulator accumulate(std::span<const FixationEvent> fixations, std::size_t width,
                                std::size_t height, double sigma);

/// a(i,j) = #{cells <= raw(i,j)} / #cells.
AttentionHeatmap cdf_normalize(const AttentionAccumulator& acc);

/// Hue = 150 * (1 - a).
HueMap hue_encode(const AttentionHeatmap& heatmap);

/// Cellwise mean of per-participant maps, rank-normalized again.
AttentionHeatmap aggregate_participants(std::span<const AttentionHeatmap> heatmaps);

struct HeatmapMetadata {
    std::string image_id;
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t participants = 0;
    double sigma_px = 0.0;
};

/// 16-bit single-channel PNG with round(a * 65535), plus <path>.json metadata.
void write_heatmap_png(const std::filesystem::path& png_path, const AttentionHeatmap& heatmap,
                       const HeatmapMetadata& meta);
AttentionHeatmap read_heatmap_png(const std::filesystem::path& png_path);
HeatmapMetadata read_heatmap_metadata(const std::filesystem::path& png_path);
std::filesystem::path metadata_path_for(const std::filesystem::path& png_path);

/// Full-saturation, full-value HSV colour for a hue on the 0..150 scale,
/// spread over the red (0) .. blue (240 degrees) arc.
png::Rgb hue_to_rgb(double hue);
void write_hue_visualization(const std::filesystem::path& png_path, const HueMap& hue);

}  // namespace streetgaze
