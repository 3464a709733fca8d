#include "streetgaze/survey_service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <fmt/format.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <set>

#include "json.hpp"
#include "streetgaze/error.hpp"
#include "streetgaze/rng.hpp"
#include "streetgaze/text_io.hpp"

namespace streetgaze {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr std::string_view kEventsSchema = "survey_events";
constexpr std::string_view kGazeBatchSchema = "survey_gaze";
constexpr std::string_view kSnapshotSchema = "survey_snapshot";
constexpr std::string_view kSessionsSchema = "sessions";
constexpr std::size_t kMaxGenderLength = 32;

std::optional<Side> side_or_null(const json& j) {
    if (j.is_null()) return std::nullopt;
    return side_from_string(j.get<std::string>());
}

ordered_json session_to_json(const Session& s) {
    ordered_json j;
    j["session_id"] = s.session_id;
    j["age_band"] = s.demographics.age_band;
    j["gender"] = s.demographics.gender ? ordered_json(*s.demographics.gender) : ordered_json();
    j["created_at"] = s.created_at;
    j["last_activity"] = s.last_activity;
    j["closed_at"] = s.closed_at;
    j["state"] = std::string(to_string(s.state));
    j["pairs"] = ordered_json::array();
    for (const auto& p : s.pairs) {
        ordered_json pj;
        pj["pair_id"] = p.pair_id;
        pj["left"] = p.left_image;
        pj["right"] = p.right_image;
        pj["served_at"] = p.served_at;
        pj["answer"] = p.answer ? ordered_json(std::string(to_string(*p.answer))) : ordered_json();
        pj["answered_at"] = p.answered_at;
        j["pairs"].push_back(pj);
    }
    return j;
}

SessionState session_state_from_string(std::string_view text) {
    if (text == "active") return SessionState::Active;
    if (text == "complete") return SessionState::Complete;
    if (text == "abandoned") return SessionState::Abandoned;
    fail(ErrorKind::Parse, fmt::format("unknown session state '{}'", text));
}

Session session_from_json(const json& j) {
    Session s;
    s.session_id = j.at("session_id").get<std::string>();
    s.demographics.age_band = j.at("age_band").get<std::string>();
    if (!j.at("gender").is_null()) s.demographics.gender = j.at("gender").get<std::string>();
    s.created_at = j.at("created_at").get<std::int64_t>();
    s.last_activity = j.at("last_activity").get<std::int64_t>();
    s.closed_at = j.at("closed_at").get<std::int64_t>();
    s.state = session_state_from_string(j.at("state").get<std::string>());
    for (const auto& pj : j.at("pairs")) {
        PairAssignment p;
        p.pair_id = pj.at("pair_id").get<std::string>();
        p.session_id = s.session_id;
        p.left_image = pj.at("left").get<std::string>();
        p.right_image = pj.at("right").get<std::string>();
        p.served_at = pj.at("served_at").get<std::int64_t>();
        p.index = s.pairs.size() + 1;
        p.answer = side_or_null(pj.at("answer"));
        p.answered_at = pj.at("answered_at").get<std::int64_t>();
        s.pairs.push_back(std::move(p));
    }
    return s;
}

bool printable(std::string_view text) {
    return std::all_of(text.begin(), text.end(), [](char c) {
        return static_cast<unsigned char>(c) >= 0x20 && c != 0x7f;
    });
}

}  // namespace

std::string_view to_string(SessionState state) {
    switch (state) {
        case SessionState::Active: return "active";
        case SessionState::Complete: return "complete";
        case SessionState::Abandoned: return "abandoned";
    }
    return "?";
}

std::string_view to_string(SchedulerPolicy policy) {
    return policy == SchedulerPolicy::Balanced ? "balanced" : "uniform";
}

SchedulerPolicy scheduler_policy_from_string(std::string_view text) {
    if (text == "balanced") return SchedulerPolicy::Balanced;
    if (text == "uniform") return SchedulerPolicy::Uniform;
    fail(ErrorKind::Validation, fmt::format("unknown scheduler policy '{}'", text));
}

void validate_demographics(const Demographics& d) {
    if (std::find(kAgeBands.begin(), kAgeBands.end(), d.age_band) == kAgeBands.end()) {
        fail(ErrorKind::Validation, fmt::format("age_band '{}' is not one of {}", d.age_band,
                                                fmt::join(kAgeBands, ", ")));
    }
    if (d.gender) {
        if (d.gender->empty() || d.gender->size() > kMaxGenderLength || !printable(*d.gender)) {
            fail(ErrorKind::Validation,
                 fmt::format("gender must be 1-{} printable characters", kMaxGenderLength));
        }
    }
}

Demographics parse_demographics(std::string_view json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const std::exception& e) {
        fail(ErrorKind::Parse, std::string("demographics are not valid JSON: ") + e.what());
    }
    if (!j.is_object()) fail(ErrorKind::Validation, "demographics must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key != "age_band" && key != "gender") {
            fail(ErrorKind::Validation, fmt::format("field '{}' is not accepted", key));
        }
    }
    Demographics d;
    if (!j.contains("age_band") || !j["age_band"].is_string()) {
        fail(ErrorKind::Validation, "age_band is required and must be a string");
    }
    d.age_band = j["age_band"].get<std::string>();
    if (j.contains("gender") && !j["gender"].is_null()) {
        if (!j["gender"].is_string()) fail(ErrorKind::Validation, "gender must be a string");
        d.gender = j["gender"].get<std::string>();
    }
    validate_demographics(d);
    return d;
}

std::vector<StudyImage> parse_study_manifest(std::string_view text) {
    std::vector<StudyImage> out;
    std::set<std::string> seen;
    const auto lines = text_io::split(text, '\n');
    bool header = false;
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
        const auto body = text_io::trim(lines[ln]);
        if (body.empty()) continue;
        if (!header) {
            if (body != "image_id,stratum,file") {
                fail(ErrorKind::Parse, "study manifest must start with image_id,stratum,file");
            }
            header = true;
            continue;
        }
        const auto fields = text_io::split(body, ',');
        if (fields.size() != 3) {
            fail(ErrorKind::Parse, fmt::format("study manifest line {}: expected 3 fields", ln + 1));
        }
        StudyImage img{std::string(text_io::trim(fields[0])), std::string(text_io::trim(fields[1])),
                       std::string(text_io::trim(fields[2]))};
        if (img.image_id.empty() || img.file.empty()) {
            fail(ErrorKind::Validation,
                 fmt::format("study manifest line {}: image_id and file are required", ln + 1));
        }
        if (!seen.insert(img.image_id).second) {
            fail(ErrorKind::Validation,
                 fmt::format("study manifest line {}: duplicate image '{}'", ln + 1, img.image_id));
        }
        out.push_back(std::move(img));
    }
    if (!header) fail(ErrorKind::Parse, "study manifest is empty");
    return out;
}

std::vector<StudyImage> read_study_manifest(const std::filesystem::path& path) {
    return parse_study_manifest(text_io::read_file(path));
}

std::string serialize_study_manifest(std::span<const StudyImage> images) {
    std::string out = "image_id,stratum,file\n";
    for (const auto& img : images) {
        for (const auto* field : {&img.image_id, &img.stratum, &img.file}) {
            if (field->find_first_of(",\n") != std::string::npos) {
                fail(ErrorKind::Validation, "study manifest fields cannot contain commas or newlines");
            }
        }
        out += fmt::format("{},{},{}\n", img.image_id, img.stratum, img.file);
    }
    return out;
}

std::int64_t system_clock_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

void StudyConfig::validate() const {
    if (images.size() < 2) fail(ErrorKind::Validation, "study manifest needs at least two images");
    std::set<std::string> ids;
    for (const auto& img : images) {
        if (img.image_id.empty()) fail(ErrorKind::Validation, "study manifest has an empty image_id");
        if (!ids.insert(img.image_id).second) {
            fail(ErrorKind::Validation, "duplicate image in study manifest: " + img.image_id);
        }
    }
    const std::size_t n = images.size();
    if (pairs_per_session < 1) fail(ErrorKind::Validation, "pairs_per_session must be at least 1");
    if (pairs_per_session > n * (n - 1) / 2) {
        fail(ErrorKind::Validation,
             fmt::format("pairs_per_session {} exceeds the {} distinct pairs of {} images",
                         pairs_per_session, n * (n - 1) / 2, n));
    }
    if (max_gaze_batch < 1) fail(ErrorKind::Validation, "max_gaze_batch must be at least 1");
    if (session_ttl_ms <= 0) fail(ErrorKind::Validation, "session_ttl must be positive");
    if (gaze_grace_ms < 0) fail(ErrorKind::Validation, "gaze_grace must not be negative");
    if (exposure_target && !(*exposure_target >= 0.0)) {
        fail(ErrorKind::Validation, "exposure_target must be non-negative");
    }
}

std::size_t Session::pairs_answered() const {
    return static_cast<std::size_t>(
        std::count_if(pairs.begin(), pairs.end(), [](const auto& p) { return p.answer.has_value(); }));
}

// ---------------------------------------------------------------------------

class SurveyService::Log {
public:
    Log(std::filesystem::path path, bool sync) : path_(std::move(path)), sync_(sync) {
        fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
        if (fd_ < 0) fail(ErrorKind::Io, fmt::format("cannot open {}: {}", path_.string(), std::strerror(errno)));
        size_ = std::filesystem::file_size(path_);
    }
    ~Log() {
        if (fd_ >= 0) ::close(fd_);
    }
    Log(const Log&) = delete;
    Log& operator=(const Log&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::uintmax_t size() const { return size_; }

    void append(std::string_view line) {
        std::string buf(line);
        buf += '\n';
        std::size_t done = 0;
        while (done < buf.size()) {
            const auto n = ::write(fd_, buf.data() + done, buf.size() - done);
            if (n < 0) {
                if (errno == EINTR) continue;
                const std::string why = std::strerror(errno);
                truncate(size_);
                fail(ErrorKind::Io, fmt::format("append to {} failed: {}", path_.string(), why));
            }
            done += static_cast<std::size_t>(n);
        }
        if (sync_ && ::fdatasync(fd_) != 0) {
            fail(ErrorKind::Io, fmt::format("fdatasync {} failed: {}", path_.string(), std::strerror(errno)));
        }
        size_ += buf.size();
    }

    void truncate(std::uintmax_t size) {
        if (::ftruncate(fd_, static_cast<off_t>(size)) != 0) {
            fail(ErrorKind::Io, fmt::format("cannot truncate {}: {}", path_.string(), std::strerror(errno)));
        }
        size_ = size;
    }

private:
    std::filesystem::path path_;
    bool sync_;
    int fd_ = -1;
    std::uintmax_t size_ = 0;
};

struct SurveyService::State {
    std::vector<Session> sessions;
    std::map<std::string, std::size_t> session_index;
    std::map<std::string, std::size_t> image_index;
    std::vector<std::size_t> exposure;
    std::uint64_t decisions = 0;
    std::vector<RawGazeSample> gaze;

    explicit State(const std::vector<StudyImage>& images) : exposure(images.size(), 0) {
        for (std::size_t i = 0; i < images.size(); ++i) image_index[images[i].image_id] = i;
    }

    std::size_t image(const std::string& id) const {
        auto it = image_index.find(id);
        if (it == image_index.end()) fail(ErrorKind::NotFound, "unknown image " + id);
        return it->second;
    }

    Session& session(const std::string& id) {
        auto it = session_index.find(id);
        if (it == session_index.end()) fail(ErrorKind::NotFound, "unknown session " + id);
        return sessions[it->second];
    }

    void add_session(Session s) {
        if (session_index.contains(s.session_id)) {
            fail(ErrorKind::Conflict, "duplicate session " + s.session_id);
        }
        for (const auto& p : s.pairs) add_exposure(p);
        session_index[s.session_id] = sessions.size();
        sessions.push_back(std::move(s));
    }

    void add_exposure(const PairAssignment& p) {
        ++exposure[image(p.left_image)];
        ++exposure[image(p.right_image)];
        ++decisions;
    }
};

SurveyService::SurveyService(StudyConfig config, ClockFn clock)
    : config_(std::move(config)), clock_(std::move(clock)) {
    config_.validate();
    if (!clock_) clock_ = system_clock_ms;
    state_ = std::make_unique<State>(config_.images);
    if (!config_.data_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(config_.data_dir, ec);
        if (ec) fail(ErrorKind::Io, "cannot create " + config_.data_dir.string() + ": " + ec.message());
        events_ = std::make_unique<Log>(config_.data_dir / "events.jsonl", config_.fsync);
        gaze_log_ = std::make_unique<Log>(config_.data_dir / "gaze_batches.jsonl", config_.fsync);
        replay();
    }
}

SurveyService::~SurveyService() = default;

void SurveyService::set_append_hook(AppendHook hook) {
    std::lock_guard lock(mutex_);
    hook_ = std::move(hook);
}

void SurveyService::replay() {
    std::uintmax_t events_offset = 0;
    const auto snap_path = config_.data_dir / "snapshot.json";
    if (std::filesystem::exists(snap_path)) {
        // A snapshot that cannot be trusted is ignored; the full log is authoritative.
        try {
            const auto j = json::parse(text_io::read_file(snap_path));
            if (j.at("schema").get<std::string>() != kSnapshotSchema) throw std::runtime_error("schema");
            const auto offset = j.at("events_offset").get<std::uintmax_t>();
            if (offset > events_->size()) throw std::runtime_error("offset beyond log");
            auto fresh = std::make_unique<State>(config_.images);
            for (const auto& sj : j.at("sessions")) fresh->add_session(session_from_json(sj));
            state_ = std::move(fresh);
            events_offset = offset;
        } catch (const std::exception&) {
            state_ = std::make_unique<State>(config_.images);
            events_offset = 0;
        }
    }
    replay_file(*events_, events_offset, false);
    replay_file(*gaze_log_, 0, true);
}

void SurveyService::replay_file(Log& log, std::uintmax_t offset, bool gaze) {
    const auto schema = gaze ? kGazeBatchSchema : kEventsSchema;
    if (log.size() == 0) {
        log.append(text_io::schema_header(schema));
        return;
    }
    const auto text = text_io::read_file(log.path());
    std::size_t pos = static_cast<std::size_t>(offset);
    std::size_t line_no = 0;
    while (pos < text.size()) {
        const auto nl = text.find('\n', pos);
        if (nl == std::string::npos) {
            // Torn final record from an interrupted append: it was never acknowledged.
            log.truncate(pos);
            break;
        }
        ++line_no;
        const std::string line = text.substr(pos, nl - pos);
        if (pos == 0) {
            if (!text_io::is_schema_header(line, schema)) {
                fail(ErrorKind::Parse, fmt::format("{} does not start with a {} header",
                                                   log.path().string(), schema));
            }
        } else if (!text_io::trim(line).empty()) {
            try {
                apply_event(line, gaze);
            } catch (const std::exception& e) {
                fail(ErrorKind::Parse, fmt::format("{} record {} (byte {}): {}", log.path().string(),
                                                   line_no, pos, e.what()));
            }
        }
        pos = nl + 1;
    }
    if (log.size() == 0) log.append(text_io::schema_header(schema));
}

void SurveyService::apply_event(const std::string& line, bool gaze) {
    auto& st = *state_;
    const auto j = json::parse(line);
    if (gaze) {
        auto& s = st.session(j.at("session_id").get<std::string>());
        const auto image = j.at("image_id").get<std::string>();
        for (const auto& a : j.at("samples")) {
            RawGazeSample g;
            g.session_id = s.session_id;
            g.image_id = image;
            g.t_ms = a.at(0).get<std::int64_t>();
            g.x = a.at(1).is_null() ? std::nan("") : a.at(1).get<double>();
            g.y = a.at(2).is_null() ? std::nan("") : a.at(2).get<double>();
            g.validity = a.at(3).get<bool>() ? Validity::Valid : Validity::Invalid;
            st.gaze.push_back(std::move(g));
        }
        s.last_activity = std::max(s.last_activity, j.at("t_ms").get<std::int64_t>());
        return;
    }
    const auto ev = j.at("ev").get<std::string>();
    const auto t = j.at("t_ms").get<std::int64_t>();
    if (ev == "session") {
        Session s;
        s.session_id = j.at("session_id").get<std::string>();
        s.demographics.age_band = j.at("age_band").get<std::string>();
        if (j.contains("gender")) s.demographics.gender = j.at("gender").get<std::string>();
        s.created_at = t;
        s.last_activity = t;
        st.add_session(std::move(s));
    } else if (ev == "pair") {
        auto& s = st.session(j.at("session_id").get<std::string>());
        PairAssignment p;
        p.pair_id = j.at("pair_id").get<std::string>();
        p.session_id = s.session_id;
        p.left_image = j.at("left").get<std::string>();
        p.right_image = j.at("right").get<std::string>();
        p.served_at = t;
        p.index = s.pairs.size() + 1;
        st.add_exposure(p);
        s.pairs.push_back(std::move(p));
        s.last_activity = t;
    } else if (ev == "choice") {
        auto& s = st.session(j.at("session_id").get<std::string>());
        const auto pair_id = j.at("pair_id").get<std::string>();
        auto it = std::find_if(s.pairs.begin(), s.pairs.end(),
                               [&](const auto& p) { return p.pair_id == pair_id; });
        if (it == s.pairs.end()) fail(ErrorKind::NotFound, "unknown pair " + pair_id);
        it->answer = side_from_string(j.at("chosen").get<std::string>());
        it->answered_at = t;
        s.last_activity = t;
        if (s.pairs_answered() == config_.pairs_per_session) {
            s.state = SessionState::Complete;
            s.closed_at = t;
        }
    } else if (ev == "abandon") {
        auto& s = st.session(j.at("session_id").get<std::string>());
        s.state = SessionState::Abandoned;
        s.closed_at = t;
    } else {
        fail(ErrorKind::Parse, "unknown event type " + ev);
    }
}

void SurveyService::commit_locked(const std::string& line, bool gaze) {
    if (events_) {
        (gaze ? *gaze_log_ : *events_).append(line);
    }
    if (hook_) hook_(line);
    apply_event(line, gaze);
    if (!gaze && events_ && config_.snapshot_every > 0 &&
        ++events_since_snapshot_ >= config_.snapshot_every) {
        write_snapshot_locked();
    }
}

void SurveyService::write_snapshot_locked() {
    if (!events_) return;
    ordered_json j;
    j["schema"] = std::string(kSnapshotSchema);
    j["version"] = 1;
    j["events_offset"] = events_->size();
    j["sessions"] = ordered_json::array();
    for (const auto& s : state_->sessions) j["sessions"].push_back(session_to_json(s));
    text_io::write_file_atomic(config_.data_dir / "snapshot.json", j.dump());
    events_since_snapshot_ = 0;
}

void SurveyService::snapshot() {
    std::lock_guard lock(mutex_);
    write_snapshot_locked();
}

Session& SurveyService::find_session_locked(const std::string& session_id) {
    return state_->session(session_id);
}

bool SurveyService::expire_if_idle_locked(Session& s, std::int64_t now) {
    if (s.state != SessionState::Active || now - s.last_activity <= config_.session_ttl_ms) return false;
    ordered_json ev;
    ev["ev"] = "abandon";
    ev["session_id"] = s.session_id;
    ev["t_ms"] = now;
    commit_locked(ev.dump(), false);
    return true;
}

Session SurveyService::create_session(const Demographics& demographics) {
    validate_demographics(demographics);
    std::lock_guard lock(mutex_);
    const auto now = clock_();
    // Ids are reproducible from the seed so simulated studies are byte-stable.
    std::uint64_t counter = state_->sessions.size();
    std::string id;
    do {
        id = fmt::format("{:016x}", splitmix64(splitmix64(config_.seed ^ fnv1a("session")) + counter++));
    } while (state_->session_index.contains(id));
    ordered_json ev;
    ev["ev"] = "session";
    ev["session_id"] = id;
    ev["age_band"] = demographics.age_band;
    if (demographics.gender) ev["gender"] = *demographics.gender;
    ev["t_ms"] = now;
    commit_locked(ev.dump(), false);
    return state_->session(id);
}

std::pair<std::size_t, std::size_t> SurveyService::schedule_locked(const Session& s) const {
    const auto& st = *state_;
    const std::size_t n = config_.images.size();
    std::vector<std::size_t> degree(n, 0);
    std::set<std::pair<std::size_t, std::size_t>> used;
    for (const auto& p : s.pairs) {
        const auto a = st.image(p.left_image);
        const auto b = st.image(p.right_image);
        used.insert(std::minmax(a, b));
        ++degree[a];
        ++degree[b];
    }
    const bool balanced = config_.policy == SchedulerPolicy::Balanced;
    const std::uint64_t d = st.decisions;
    auto key = [&](std::size_t i, std::uint64_t salt) {
        return std::pair{balanced ? st.exposure[i] : 0, hashed_unit(config_.seed ^ salt, d, i)};
    };
    const std::uint64_t first_salt = fnv1a("schedule/first");
    const std::uint64_t second_salt = fnv1a("schedule/second");

    std::optional<std::size_t> a;
    for (std::size_t i = 0; i < n; ++i) {
        if (degree[i] + 1 >= n) continue;  // already paired with every other image
        if (!a || key(i, first_salt) < key(*a, first_salt)) a = i;
    }
    std::optional<std::size_t> b;
    for (std::size_t j = 0; a && j < n; ++j) {
        if (j == *a || used.contains(std::minmax(*a, j))) continue;
        if (!b || key(j, second_salt) < key(*b, second_salt)) b = j;
    }
    if (!a || !b) fail(ErrorKind::NoMorePairs, "no unused image pair left for this session");
    if (hashed_unit(config_.seed ^ fnv1a("schedule/side"), d, 0) < 0.5) return {*b, *a};
    return {*a, *b};
}

PairAssignment SurveyService::next_pair(const std::string& session_id) {
    std::lock_guard lock(mutex_);
    auto& s = find_session_locked(session_id);
    const auto now = clock_();
    expire_if_idle_locked(s, now);
    if (s.state == SessionState::Abandoned) fail(ErrorKind::Conflict, "session was abandoned");
    if (!s.pairs.empty() && !s.pairs.back().answer) return s.pairs.back();  // retry of an open pair
    if (s.state == SessionState::Complete || s.pairs_served() >= config_.pairs_per_session) {
        fail(ErrorKind::NoMorePairs, "session has answered all its pairs");
    }
    const auto [l, r] = schedule_locked(s);
    ordered_json ev;
    ev["ev"] = "pair";
    ev["session_id"] = s.session_id;
    ev["pair_id"] = fmt::format("{}-{:02}", s.session_id, s.pairs.size() + 1);
    ev["left"] = config_.images[l].image_id;
    ev["right"] = config_.images[r].image_id;
    ev["t_ms"] = now;
    commit_locked(ev.dump(), false);
    return find_session_locked(session_id).pairs.back();
}

ComparisonRecord SurveyService::record_choice(const std::string& session_id,
                                              const std::string& pair_id, Side chosen) {
    std::lock_guard lock(mutex_);
    auto& s = find_session_locked(session_id);
    auto find_pair = [&]() -> PairAssignment& {
        auto& ses = find_session_locked(session_id);
        auto it = std::find_if(ses.pairs.begin(), ses.pairs.end(),
                               [&](const auto& p) { return p.pair_id == pair_id; });
        if (it == ses.pairs.end()) fail(ErrorKind::NotFound, "pair " + pair_id + " was not served to this session");
        return *it;
    };
    auto record = [&](const PairAssignment& p) {
        return ComparisonRecord{p.pair_id, p.left_image, p.right_image, *p.answer, p.session_id,
                                p.answered_at};
    };
    const auto& existing = find_pair();
    if (existing.answer) {
        if (*existing.answer == chosen) return record(existing);  // replay of an acknowledged answer
        fail(ErrorKind::Conflict, "pair " + pair_id + " was already answered");
    }
    const auto now = clock_();
    expire_if_idle_locked(s, now);
    if (s.state == SessionState::Abandoned) fail(ErrorKind::Conflict, "session was abandoned");
    ordered_json ev;
    ev["ev"] = "choice";
    ev["session_id"] = session_id;
    ev["pair_id"] = pair_id;
    ev["chosen"] = std::string(to_string(chosen));
    ev["t_ms"] = now;
    commit_locked(ev.dump(), false);
    return record(find_pair());
}

std::size_t SurveyService::record_gaze_batch(const std::string& session_id,
                                             const std::string& image_id,
                                             std::vector<RawGazeSample> samples) {
    std::lock_guard lock(mutex_);
    auto& s = find_session_locked(session_id);
    state_->image(image_id);
    if (samples.size() > config_.max_gaze_batch) {
        fail(ErrorKind::TooLarge, fmt::format("gaze batch of {} samples exceeds the cap of {}",
                                              samples.size(), config_.max_gaze_batch));
    }
    const auto now = clock_();
    expire_if_idle_locked(s, now);
    const bool open = s.state == SessionState::Active ||
                      (s.state == SessionState::Complete && now - s.closed_at <= config_.gaze_grace_ms);
    if (!open) fail(ErrorKind::Conflict, "session no longer accepts gaze samples");
    const bool shown = std::any_of(s.pairs.begin(), s.pairs.end(), [&](const auto& p) {
        return p.left_image == image_id || p.right_image == image_id;
    });
    if (!shown) fail(ErrorKind::Validation, "image " + image_id + " was not shown in this session");
    if (samples.empty()) return 0;

    ordered_json ev;
    ev["session_id"] = session_id;
    ev["image_id"] = image_id;
    ev["t_ms"] = now;
    ev["samples"] = ordered_json::array();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& g = samples[i];
        const bool valid = g.validity == Validity::Valid;
        if (g.t_ms < 0) fail(ErrorKind::Validation, fmt::format("sample {}: negative t_ms", i));
        if (valid && !(std::isfinite(g.x) && std::isfinite(g.y))) {
            fail(ErrorKind::Validation, fmt::format("sample {}: valid sample needs finite x and y", i));
        }
        auto coord = [&](double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(); };
        ev["samples"].push_back(ordered_json::array({g.t_ms, coord(g.x), coord(g.y), valid}));
    }
    commit_locked(ev.dump(), true);
    return samples.size();
}

std::size_t SurveyService::sweep_abandoned() {
    std::lock_guard lock(mutex_);
    const auto now = clock_();
    std::size_t changed = 0;
    for (auto& s : state_->sessions) changed += expire_if_idle_locked(s, now) ? 1 : 0;
    return changed;
}

Session SurveyService::session(const std::string& session_id) const {
    std::lock_guard lock(mutex_);
    return state_->session(session_id);
}

std::vector<Session> SurveyService::sessions() const {
    std::lock_guard lock(mutex_);
    return state_->sessions;
}

std::vector<ExposureRow> SurveyService::exposure() const {
    std::lock_guard lock(mutex_);
    std::vector<ExposureRow> out;
    for (std::size_t i = 0; i < config_.images.size(); ++i) {
        out.push_back({config_.images[i].image_id, config_.images[i].stratum, state_->exposure[i]});
    }
    return out;
}

std::vector<RawGazeSample> SurveyService::gaze_samples() const {
    std::lock_guard lock(mutex_);
    return state_->gaze;
}

const StudyImage* SurveyService::find_image(const std::string& image_id) const {
    auto it = state_->image_index.find(image_id);
    return it == state_->image_index.end() ? nullptr : &config_.images[it->second];
}

ExportBundle SurveyService::export_bundle(ExportOptions options) const {
    std::lock_guard lock(mutex_);
    ExportBundle out;
    std::vector<ComparisonRecord> records;
    out.sessions = text_io::schema_header(kSessionsSchema) + "\n";
    for (const auto& s : state_->sessions) {
        ordered_json j;
        j["session_id"] = s.session_id;
        j["age_band"] = s.demographics.age_band;
        j["gender"] = s.demographics.gender ? ordered_json(*s.demographics.gender) : ordered_json();
        j["created_at"] = s.created_at;
        j["closed_at"] = s.closed_at;
        j["state"] = std::string(to_string(s.state));
        j["pairs_served"] = s.pairs_served();
        j["pairs_answered"] = s.pairs_answered();
        out.sessions += j.dump() + "\n";
        if (s.state == SessionState::Abandoned && !options.include_abandoned) continue;
        for (const auto& p : s.pairs) {
            if (p.answer) {
                records.push_back({p.pair_id, p.left_image, p.right_image, *p.answer, s.session_id,
                                   p.answered_at});
            }
        }
    }
    out.comparisons = serialize_comparison_log(records);
    auto gaze = state_->gaze;
    std::stable_sort(gaze.begin(), gaze.end(), [](const auto& a, const auto& b) {
        return std::tie(a.session_id, a.image_id, a.t_ms) < std::tie(b.session_id, b.image_id, b.t_ms);
    });
    out.gaze = serialize_gaze_log(gaze);
    return out;
}

void SurveyService::export_logs(const std::filesystem::path& dir, ExportOptions options) const {
    const auto bundle = export_bundle(options);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
    text_io::write_file_atomic(dir / kComparisonsFile, bundle.comparisons);
    text_io::write_file_atomic(dir / kGazeFile, bundle.gaze);
    text_io::write_file_atomic(dir / kSessionsFile, bundle.sessions);
}

std::string exposure_csv(std::span<const ExposureRow> rows) {
    std::string out = "image_id,stratum,exposure\n";
    for (const auto& r : rows) out += fmt::format("{},{},{}\n", r.image_id, r.stratum, r.exposure);
    return out;
}

std::string exposure_summary_json(std::span<const ExposureRow> rows, std::optional<double> target) {
    ordered_json j;
    j["images"] = rows.size();
    if (rows.empty()) {
        j["min"] = j["max"] = j["mean"] = j["spread"] = nullptr;
    } else {
        auto [lo, hi] = std::minmax_element(rows.begin(), rows.end(),
                                            [](const auto& a, const auto& b) { return a.exposure < b.exposure; });
        double sum = 0.0;
        for (const auto& r : rows) sum += static_cast<double>(r.exposure);
        j["min"] = lo->exposure;
        j["max"] = hi->exposure;
        j["mean"] = sum / static_cast<double>(rows.size());
        j["spread"] = hi->exposure - lo->exposure;
    }
    j["target"] = target ? ordered_json(*target) : ordered_json();
    return j.dump(2) + "\n";
}

}  // namespace streetgaze
