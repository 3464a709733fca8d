#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "streetgaze/gaze_ingest.hpp"
#include "streetgaze/segmentation_metrics.hpp"

namespace streetgaze {

enum class SessionState { Active, Complete, Abandoned };
std::string_view to_string(SessionState state);

enum class SchedulerPolicy { Balanced, Uniform };
std::string_view to_string(SchedulerPolicy policy);
SchedulerPolicy scheduler_policy_from_string(std::string_view text);

/// Accepted age bands; anything else is a validation error.
inline constexpr std::array<std::string_view, 7> kAgeBands = {
    "18-24", "25-34", "35-44", "45-54", "55-64", "65+", "undisclosed"};

struct Demographics {
    std::string age_band;
    std::optional<std::string> gender;

    friend bool operator==(const Demographics&, const Demographics&) = default;
};

/// Parses a JSON object with exactly age_band and optionally gender.
/// Unknown keys are rejected so nothing identifying can be stored.
Demographics parse_demographics(std::string_view json_text);
void validate_demographics(const Demographics& d);

struct StudyImage {
    std::string image_id;
    std::string stratum;
    std::string file;  // relative to the image directory

    friend bool operator==(const StudyImage&, const StudyImage&) = default;
};

/// CSV with header image_id,stratum,file.
std::vector<StudyImage> parse_study_manifest(std::string_view text);
std::vector<StudyImage> read_study_manifest(const std::filesystem::path& path);
std::string serialize_study_manifest(std::span<const StudyImage> images);

/// Milliseconds since the Unix epoch.
using ClockFn = std::function<std::int64_t()>;
std::int64_t system_clock_ms();

struct StudyConfig {
    std::vector<StudyImage> images;
    std::size_t pairs_per_session = 10;
    std::optional<double> exposure_target;  // informational, reported next to the achieved mean
    std::uint64_t seed = 0;
    SchedulerPolicy policy = SchedulerPolicy::Balanced;
    std::size_t max_gaze_batch = 10000;
    std::int64_t session_ttl_ms = 30 * 60 * 1000;
    std::int64_t gaze_grace_ms = 5 * 60 * 1000;

    // Persistence. An empty data_dir keeps everything in memory.
    std::filesystem::path data_dir;
    std::size_t snapshot_every = 500;  // events between snapshots; 0 disables
    bool fsync = true;

    void validate() const;
};

struct PairAssignment {
    std::string pair_id;
    std::string session_id;
    std::string left_image;
    std::string right_image;
    std::int64_t served_at = 0;
    std::size_t index = 0;  // 1-based position within the session
    std::optional<Side> answer;
    std::int64_t answered_at = 0;

    friend bool operator==(const PairAssignment&, const PairAssignment&) = default;
};

struct Session {
    std::string session_id;
    Demographics demographics;
    std::int64_t created_at = 0;
    std::int64_t last_activity = 0;
    std::int64_t closed_at = 0;  // completion or abandonment time
    SessionState state = SessionState::Active;
    std::vector<PairAssignment> pairs;

    std::size_t pairs_served() const { return pairs.size(); }
    std::size_t pairs_answered() const;

    friend bool operator==(const Session&, const Session&) = default;
};

struct ExposureRow {
    std::string image_id;
    std::string stratum;
    std::size_t exposure = 0;
};

struct ExportOptions {
    bool include_abandoned = false;
};

struct ExportBundle {
    std::string comparisons;  // comparison_log format
    std::string gaze;         // gaze_log format
    std::string sessions;     // session manifest
};

inline constexpr std::string_view kComparisonsFile = "comparisons.jsonl";
inline constexpr std::string_view kGazeFile = "gaze.jsonl";
inline constexpr std::string_view kSessionsFile = "sessions.jsonl";

/// Thread-safe study backend. Every state change is appended to the event
/// log (and flushed) before the call returns.
class SurveyService {
public:
    /// Called after a durable append and before the state change is applied.
    /// Tests throw from it to simulate a crash between append and acknowledgement.
    using AppendHook = std::function<void(std::string_view event)>;

    explicit SurveyService(StudyConfig config, ClockFn clock = system_clock_ms);
    ~SurveyService();
    SurveyService(const SurveyService&) = delete;
    SurveyService& operator=(const SurveyService&) = delete;

    const StudyConfig& config() const { return config_; }
    void set_append_hook(AppendHook hook);

    Session create_session(const Demographics& demographics);
    PairAssignment next_pair(const std::string& session_id);
    ComparisonRecord record_choice(const std::string& session_id, const std::string& pair_id,
                                   Side chosen);
    std::size_t record_gaze_batch(const std::string& session_id, const std::string& image_id,
                                  std::vector<RawGazeSample> samples);

    /// Marks sessions idle longer than the TTL as abandoned. Returns how many changed.
    std::size_t sweep_abandoned();

    Session session(const std::string& session_id) const;
    std::vector<Session> sessions() const;
    std::vector<ExposureRow> exposure() const;
    std::vector<RawGazeSample> gaze_samples() const;
    const StudyImage* find_image(const std::string& image_id) const;

    ExportBundle export_bundle(ExportOptions options = {}) const;
    /// Writes comparisons.jsonl, gaze.jsonl and sessions.jsonl atomically into dir.
    void export_logs(const std::filesystem::path& dir, ExportOptions options = {}) const;

    /// Writes a snapshot now (no-op without a data directory).
    void snapshot();

private:
    struct State;
    class Log;

    void replay();
    void replay_file(Log& log, std::uintmax_t offset, bool gaze);
    void commit_locked(const std::string& line, bool gaze);
    void apply_event(const std::string& line, bool gaze);
    void write_snapshot_locked();
    Session& find_session_locked(const std::string& session_id);
    bool expire_if_idle_locked(Session& s, std::int64_t now);
    std::pair<std::size_t, std::size_t> schedule_locked(const Session& s) const;

    StudyConfig config_;
    ClockFn clock_;
    AppendHook hook_;
    mutable std::mutex mutex_;
    std::unique_ptr<State> state_;
    std::unique_ptr<Log> events_;
    std::unique_ptr<Log> gaze_log_;
    std::size_t events_since_snapshot_ = 0;
};

/// CSV with header image_id,stratum,exposure.
std::string exposure_csv(std::span<const ExposureRow> rows);
/// min, max, mean and spread of the exposure counts, plus the configured target if any.
std::string exposure_summary_json(std::span<const ExposureRow> rows, std::optional<double> target);

}  // namespace streetgaze
