#include "streetgaze/gaze_ingest.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "streetgaze/error.hpp"
#include "streetgaze/text_io.hpp"

namespace streetgaze {
namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::string_view kGazeSchema = "gaze_log";
constexpr std::string_view kFixationSchema = "fixations";
constexpr std::size_t kMaxReportedLines = 10;

const nlohmann::json& require(const nlohmann::json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end()) throw std::runtime_error(fmt::format("missing field '{}'", key));
    return *it;
}

std::string require_string(const nlohmann::json& obj, const char* key) {
    const auto& v = require(obj, key);
    if (!v.is_string()) throw std::runtime_error(fmt::format("field '{}' must be a string", key));
    return v.get<std::string>();
}

std::int64_t require_integer(const nlohmann::json& obj, const char* key) {
    const auto& v = require(obj, key);
    if (!v.is_number_integer()) {
        throw std::runtime_error(fmt::format("field '{}' must be an integer", key));
    }
    return v.get<std::int64_t>();
}

double coordinate(const nlohmann::json& obj, const char* key, bool valid) {
    const auto& v = require(obj, key);
    if (v.is_null() && !valid) return std::numeric_limits<double>::quiet_NaN();
    if (!v.is_number()) throw std::runtime_error(fmt::format("field '{}' must be a number", key));
    const double d = v.get<double>();
    if (valid && !std::isfinite(d)) {
        throw std::runtime_error(fmt::format("field '{}' must be finite on a valid sample", key));
    }
    return d;
}

RawGazeSample parse_sample(const nlohmann::json& obj) {
    if (!obj.is_object()) throw std::runtime_error("record is not an object");
    RawGazeSample s;
    s.session_id = require_string(obj, "session_id");
    s.image_id = require_string(obj, "image_id");
    s.t_ms = require_integer(obj, "t_ms");
    if (s.t_ms < 0) throw std::runtime_error("t_ms must be non-negative");
    const auto& valid = require(obj, "valid");
    if (!valid.is_boolean()) throw std::runtime_error("field 'valid' must be a boolean");
    s.validity = valid.get<bool>() ? Validity::Valid : Validity::Invalid;
    const bool is_valid = s.validity == Validity::Valid;
    s.x = coordinate(obj, "x_px", is_valid);
    s.y = coordinate(obj, "y_px", is_valid);
    return s;
}

bool usable(const RawGazeSample& s) {
    return s.validity == Validity::Valid && std::isfinite(s.x) && std::isfinite(s.y);
}

}  // namespace

void ScreenGeometry::validate() const {
    if (!(width_px > 0.0 && height_px > 0.0 && physical_width_mm > 0.0 &&
          viewing_distance_mm > 0.0)) {
        fail(ErrorKind::InvalidArgument, "screen geometry fields must all be strictly positive");
    }
}

double ScreenGeometry::pixels_to_degrees(double pixels) const {
    return pixels * pixel_pitch_mm() / viewing_distance_mm * 180.0 / std::numbers::pi;
}

double ScreenGeometry::degrees_to_pixels(double degrees) const {
    return degrees * std::numbers::pi / 180.0 * viewing_distance_mm / pixel_pitch_mm();
}

GazeParseResult parse_gaze_log(std::istream& in, ParseOptions options) {
    GazeParseResult result;
    std::map<StreamKey, std::int64_t> last_t;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto body = text_io::trim(line);
        if (body.empty()) continue;
        if (line_no == 1 && text_io::is_schema_header(body, kGazeSchema)) continue;
        try {
            auto obj = nlohmann::json::parse(body);
            auto sample = parse_sample(obj);
            StreamKey key{sample.session_id, sample.image_id};
            auto [it, inserted] = last_t.try_emplace(key, sample.t_ms);
            if (!inserted) {
                if (sample.t_ms < it->second) {
                    const auto regression = it->second - sample.t_ms;
                    if (regression > 1) {
                        throw std::runtime_error(
                            fmt::format("timestamp regresses by {} ms within stream", regression));
                    }
                    sample.t_ms = it->second;
                }
                it->second = sample.t_ms;
            }
            result.samples.push_back(std::move(sample));
        } catch (const std::exception& e) {
            result.diagnostics.push_back({line_no, e.what()});
        }
    }
    if (in.bad()) fail(ErrorKind::Io, "gaze log stream is unreadable");
    if (options.strict && !result.diagnostics.empty()) {
        std::string msg = fmt::format("{} malformed gaze record(s):", result.diagnostics.size());
        for (std::size_t i = 0; i < std::min(kMaxReportedLines, result.diagnostics.size()); ++i) {
            msg += fmt::format("\n  line {}: {}", result.diagnostics[i].line,
                               result.diagnostics[i].message);
        }
        fail(ErrorKind::Parse, msg);
    }
    return result;
}

GazeParseResult parse_gaze_log_file(const std::filesystem::path& path, ParseOptions options) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open gaze log " + path.string());
    return parse_gaze_log(in, options);
}

std::string serialize_gaze_sample(const RawGazeSample& s) {
    ordered_json j;
    j["session_id"] = s.session_id;
    j["image_id"] = s.image_id;
    j["t_ms"] = s.t_ms;
    j["x_px"] = s.x;  // non-finite values dump as null
    j["y_px"] = s.y;
    j["valid"] = s.validity == Validity::Valid;
    return j.dump();
}

std::string serialize_gaze_log(const std::vector<RawGazeSample>& samples) {
    std::string out = text_io::schema_header(kGazeSchema);
    out += '\n';
    for (const auto& s : samples) {
        out += serialize_gaze_sample(s);
        out += '\n';
    }
    return out;
}

std::vector<RawGazeSample> downsample(const std::vector<RawGazeSample>& samples, double source_hz,
                                      double target_hz) {
    if (!(target_hz > 0.0) || !(source_hz > 0.0)) {
        fail(ErrorKind::InvalidArgument, "sample rates must be positive");
    }
    if (source_hz < target_hz) {
        fail(ErrorKind::InvalidArgument,
             fmt::format("cannot upsample from {} Hz to {} Hz", source_hz, target_hz));
    }
    if (source_hz == target_hz) return samples;

    std::map<StreamKey, std::int64_t> last_bucket;
    std::vector<RawGazeSample> out;
    for (const auto& s : samples) {
        if (!usable(s)) continue;
        const auto bucket =
            static_cast<std::int64_t>(std::floor(static_cast<double>(s.t_ms) * target_hz / 1000.0));
        auto [it, inserted] = last_bucket.try_emplace(StreamKey{s.session_id, s.image_id}, bucket);
        if (!inserted) {
            if (it->second == bucket) continue;
            it->second = bucket;
        }
        out.push_back(s);
    }
    return out;
}

std::vector<RawGazeSample> filter_invalid(const std::vector<RawGazeSample>& samples) {
    std::vector<RawGazeSample> out;
    out.reserve(samples.size());
    std::copy_if(samples.begin(), samples.end(), std::back_inserter(out), usable);
    return out;
}

std::vector<FixationEvent> classify_fixations_ivt(const std::vector<RawGazeSample>& samples,
                                                  const ScreenGeometry& geom, IvtParams params) {
    geom.validate();
    if (!(params.velocity_threshold_deg_s > 0.0)) {
        fail(ErrorKind::InvalidArgument, "velocity threshold must be positive");
    }
    std::vector<FixationEvent> out;
    if (samples.size() < 2) return out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        if (!usable(s)) fail(ErrorKind::InvalidArgument, "I-VT input contains invalid samples");
        if (s.session_id != samples[0].session_id || s.image_id != samples[0].image_id) {
            fail(ErrorKind::InvalidArgument, "I-VT input must be a single (session, image) stream");
        }
        if (i > 0 && s.t_ms < samples[i - 1].t_ms) {
            fail(ErrorKind::InvalidArgument, "I-VT input must be time-sorted");
        }
    }

    auto below_threshold = [&](const RawGazeSample& a, const RawGazeSample& b) {
        const double dist = std::hypot(b.x - a.x, b.y - a.y);
        const auto dt = b.t_ms - a.t_ms;
        if (dt == 0) return dist == 0.0;
        const double velocity = geom.pixels_to_degrees(dist) / (static_cast<double>(dt) / 1000.0);
        return velocity < params.velocity_threshold_deg_s;
    };

    auto emit = [&](std::size_t first, std::size_t last) {
        const auto duration = samples[last].t_ms - samples[first].t_ms;
        if (duration <= 0 || duration < params.min_duration_ms) return;
        double sx = 0.0;
        double sy = 0.0;
        for (std::size_t k = first; k <= last; ++k) {
            sx += samples[k].x;
            sy += samples[k].y;
        }
        const auto n = static_cast<double>(last - first + 1);
        out.push_back(FixationEvent{samples[first].session_id, samples[first].image_id,
                                    std::clamp(sx / n, 0.0, geom.width_px),
                                    std::clamp(sy / n, 0.0, geom.height_px), samples[first].t_ms,
                                    duration});
    };

    std::size_t run_start = 0;
    for (std::size_t i = 1; i < samples.size(); ++i) {
        if (!below_threshold(samples[i - 1], samples[i])) {
            emit(run_start, i - 1);
            run_start = i;
        }
    }
    emit(run_start, samples.size() - 1);
    return out;
}

std::vector<std::pair<StreamKey, std::vector<RawGazeSample>>> split_streams(
    const std::vector<RawGazeSample>& samples) {
    std::vector<std::pair<StreamKey, std::vector<RawGazeSample>>> streams;
    std::map<StreamKey, std::size_t> index;
    for (const auto& s : samples) {
        StreamKey key{s.session_id, s.image_id};
        auto [it, inserted] = index.try_emplace(key, streams.size());
        if (inserted) streams.emplace_back(std::move(key), std::vector<RawGazeSample>{});
        streams[it->second].second.push_back(s);
    }
    return streams;
}

std::string serialize_fixations(const std::vector<FixationEvent>& fixations) {
    std::string out = text_io::schema_header(kFixationSchema);
    out += '\n';
    for (const auto& f : fixations) {
        ordered_json j;
        j["session_id"] = f.session_id;
        j["image_id"] = f.image_id;
        j["cx_px"] = f.cx;
        j["cy_px"] = f.cy;
        j["start_ms"] = f.start_ms;
        j["duration_ms"] = f.duration_ms;
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<FixationEvent> parse_fixations(std::istream& in) {
    std::vector<FixationEvent> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto body = text_io::trim(line);
        if (body.empty()) continue;
        if (line_no == 1 && text_io::is_schema_header(body, kFixationSchema)) continue;
        try {
            const auto obj = nlohmann::json::parse(body);
            FixationEvent f;
            f.session_id = require_string(obj, "session_id");
            f.image_id = require_string(obj, "image_id");
            f.cx = coordinate(obj, "cx_px", true);
            f.cy = coordinate(obj, "cy_px", true);
            f.start_ms = require_integer(obj, "start_ms");
            f.duration_ms = require_integer(obj, "duration_ms");
            if (f.duration_ms <= 0) throw std::runtime_error("duration_ms must be positive");
            out.push_back(std::move(f));
        } catch (const std::exception& e) {
            fail(ErrorKind::Parse, fmt::format("fixation log line {}: {}", line_no, e.what()));
        }
    }
    if (in.bad()) fail(ErrorKind::Io, "fixation stream is unreadable");
    return out;
}

std::vector<FixationEvent> parse_fixations_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open fixation log " + path.string());
    return parse_fixations(in);
}

}  // namespace streetgaze
