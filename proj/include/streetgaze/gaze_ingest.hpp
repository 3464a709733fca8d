#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <string>
#include <vector>

namespace streetgaze {

enum class Validity : std::uint8_t { Valid, Invalid };

struct RawGazeSample {
    std::string session_id;
    std::string image_id;
    std::int64_t t_ms = 0;  // since session start
    double x = 0.0;         // screen pixels
    double y = 0.0;
    Validity validity = Validity::Valid;

    friend bool operator==(const RawGazeSample&, const RawGazeSample&) = default;
};

struct FixationEvent {
    std::string session_id;
    std::string image_id;
    double cx = 0.0;
    double cy = 0.0;
    std::int64_t start_ms = 0;
    std::int64_t duration_ms = 0;

    friend bool operator==(const FixationEvent&, const FixationEvent&) = default;
};

struct ScreenGeometry {
    double width_px = 0.0;
    double height_px = 0.0;
    double physical_width_mm = 0.0;
    double viewing_distance_mm = 700.0;

    /// Throws InvalidArgument unless every field is strictly positive.
    void validate() const;
    double pixel_pitch_mm() const { return physical_width_mm / width_px; }
    /// Pixel displacement -> visual angle in degrees (small-angle approximation).
    double pixels_to_degrees(double pixels) const;
    double degrees_to_pixels(double degrees) const;
};

struct ParseDiagnostic {
    std::size_t line = 0;  // 1-based
    std::string message;
};

struct GazeParseResult {
    std::vector<RawGazeSample> samples;
    std::vector<ParseDiagnostic> diagnostics;
};

struct ParseOptions {
    bool strict = false;
};

/// Reads the line-delimited gaze exchange format. Lenient mode drops bad lines
/// and reports them; strict mode throws a Parse error naming up to ten of them.
/// Timestamps regressing by at most 1 ms inside one (session, image) stream are
/// clamped forward; larger regressions are treated as malformed lines.
GazeParseResult parse_gaze_log(std::istream& in, ParseOptions options = {});
GazeParseResult parse_gaze_log_file(const std::filesystem::path& path, ParseOptions options = {});

std::string serialize_gaze_sample(const RawGazeSample& sample);
std::string serialize_gaze_log(const std::vector<RawGazeSample>& samples);

/// Keeps the first valid sample of each 1/target_hz window, with windows
/// anchored at t = 0 and kept separately per (session, image) stream.
std::vector<RawGazeSample> downsample(const std::vector<RawGazeSample>& samples, double source_hz,
                                      double target_hz);

std::vector<RawGazeSample> filter_invalid(const std::vector<RawGazeSample>& samples);

struct IvtParams {
    double velocity_threshold_deg_s = 30.0;
    std::int64_t min_duration_ms = 60;
};

/// Velocity-threshold fixation identification over a single valid, time-sorted
/// (session, image) stream. Runs of samples joined by sub-threshold angular
/// velocity become one fixation spanning first..last member timestamp; the
/// centroid is the unweighted member mean clamped to the screen.
std::vector<FixationEvent> classify_fixations_ivt(const std::vector<RawGazeSample>& samples,
                                                  const ScreenGeometry& geom,
                                                  IvtParams params = {});

struct StreamKey {
    std::string session_id;
    std::string image_id;
    friend auto operator<=>(const StreamKey&, const StreamKey&) = default;
};

/// Splits a mixed log into per-(session, image) streams, preserving order.
std::vector<std::pair<StreamKey, std::vector<RawGazeSample>>> split_streams(
    const std::vector<RawGazeSample>& samples);

std::string serialize_fixations(const std::vector<FixationEvent>& fixations);
std::vector<FixationEvent> parse_fixations(std::istream& in);
std::vector<FixationEvent> parse_fixations_file(const std::filesystem::path& path);

}  // namespace streetgaze
