#include "doctest.h"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "streetgaze/error.hpp"
#include "streetgaze/survey_service.hpp"
#include "streetgaze/text_io.hpp"

using namespace streetgaze;
namespace fs = std::filesystem;

namespace {

std::vector<StudyImage> images(std::size_t n) {
    std::vector<StudyImage> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back({fmt::format("img{:03}", i), i % 3 == 0 ? "high" : (i % 3 == 1 ? "medium" : "low"),
                       fmt::format("img{:03}.jpg", i)});
    }
    return out;
}

struct FakeClock {
    std::shared_ptr<std::atomic<std::int64_t>> now = std::make_shared<std::atomic<std::int64_t>>(1000);
    ClockFn fn() const {
        auto n = now;
        return [n] { return n->load(); };
    }
    void advance(std::int64_t ms) const { *now += ms; }
};

StudyConfig config(std::size_t n, std::size_t pairs = 10) {
    StudyConfig c;
    c.images = images(n);
    c.pairs_per_session = pairs;
    c.seed = 42;
    return c;
}

fs::path temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("streetgaze_survey_" + name);
    fs::remove_all(dir);
    return dir;
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an Error");
    return ErrorKind::InvalidArgument;
}

const Demographics kAdult{"25-34", std::nullopt};

void answer_all(SurveyService& svc, const std::string& sid, std::size_t pairs, std::uint64_t salt = 0) {
    for (std::size_t k = 0; k < pairs; ++k) {
        auto p = svc.next_pair(sid);
        svc.record_choice(sid, p.pair_id, (k + salt) % 2 ? Side::Left : Side::Right);
    }
}

std::vector<RawGazeSample> samples(std::size_t n, std::int64_t t0 = 0) {
    std::vector<RawGazeSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back({"", "", t0 + static_cast<std::int64_t>(i) * 8, 100.0 + i, 50.0, Validity::Valid});
    }
    return out;
}

}  // namespace

TEST_CASE("demographics schema") {
    auto d = parse_demographics(R"({"age_band":"18-24"})");
    CHECK(d.age_band == "18-24");
    CHECK_FALSE(d.gender);
    CHECK(parse_demographics(R"({"age_band":"65+","gender":"female"})").gender == "female");
    CHECK(parse_demographics(R"({"age_band":"65+","gender":null})").gender == std::nullopt);

    CHECK(kind_of([] { parse_demographics(R"({"age_band":"18-24","email":"a@b.c"})"); }) ==
          ErrorKind::Validation);
    CHECK(kind_of([] { parse_demographics(R"({"age_band":"18-24","name":"X"})"); }) ==
          ErrorKind::Validation);
    CHECK(kind_of([] { parse_demographics(R"({"gender":"male"})"); }) == ErrorKind::Validation);
    CHECK(kind_of([] { parse_demographics(R"({"age_band":"7-9"})"); }) == ErrorKind::Validation);
    CHECK(kind_of([] { parse_demographics(R"({"age_band":25})"); }) == ErrorKind::Validation);
    CHECK(kind_of([] { parse_demographics(R"([1,2])"); }) == ErrorKind::Validation);
    CHECK(kind_of([] { parse_demographics("{nope"); }) == ErrorKind::Parse);
}

TEST_CASE("study manifest CSV") {
    auto imgs = images(4);
    CHECK(parse_study_manifest(serialize_study_manifest(imgs)) == imgs);
    CHECK(kind_of([] { parse_study_manifest("id,file\na,b\n"); }) == ErrorKind::Parse);
    CHECK(kind_of([] { parse_study_manifest("image_id,stratum,file\na,x,a.jpg\na,y,b.jpg\n"); }) ==
          ErrorKind::Validation);
    CHECK(kind_of([] { parse_study_manifest("image_id,stratum,file\na,x\n"); }) == ErrorKind::Parse);
}

TEST_CASE("study config validation") {
    CHECK(kind_of([] { SurveyService s(config(1)); }) == ErrorKind::Validation);
    CHECK(kind_of([] { SurveyService s(config(5, 0)); }) == ErrorKind::Validation);
    CHECK(kind_of([] { SurveyService s(config(5, 11)); }) == ErrorKind::Validation);  // only 10 pairs exist
    SurveyService ok(config(5, 10));
}

TEST_CASE("create_session") {
    SurveyService svc(config(20));
    auto s = svc.create_session(kAdult);
    CHECK(s.state == SessionState::Active);
    CHECK(s.pairs_served() == 0);
    CHECK(kind_of([&] { svc.create_session({"teen", std::nullopt}); }) == ErrorKind::Validation);

    std::set<std::string> ids{s.session_id};
    for (int i = 1; i < 127; ++i) ids.insert(svc.create_session(kAdult).session_id);
    CHECK(ids.size() == 127);
}

TEST_CASE("next_pair basics") {
    SurveyService svc(config(12));
    auto sid = svc.create_session(kAdult).session_id;
    auto p = svc.next_pair(sid);
    CHECK(p.left_image != p.right_image);
    CHECK(p.index == 1);
    for (const auto& row : svc.exposure()) {
        CHECK(row.exposure == ((row.image_id == p.left_image || row.image_id == p.right_image) ? 1u : 0u));
    }
    // An unanswered pair is handed out again rather than a new one.
    CHECK(svc.next_pair(sid) == p);
    CHECK(svc.session(sid).pairs_served() == 1);

    svc.record_choice(sid, p.pair_id, Side::Left);
    answer_all(svc, sid, 9);
    CHECK(svc.session(sid).state == SessionState::Complete);
    CHECK(kind_of([&] { svc.next_pair(sid); }) == ErrorKind::NoMorePairs);
    CHECK(kind_of([&] { svc.next_pair("nope"); }) == ErrorKind::NotFound);
}

TEST_CASE("a session never repeats an unordered pair") {
    for (auto policy : {SchedulerPolicy::Balanced, SchedulerPolicy::Uniform}) {
        auto c = config(5, 10);
        c.policy = policy;
        SurveyService svc(c);
        for (int s = 0; s < 6; ++s) {
            auto sid = svc.create_session(kAdult).session_id;
            answer_all(svc, sid, 10);
            std::set<std::pair<std::string, std::string>> seen;
            for (const auto& p : svc.session(sid).pairs) {
                seen.insert(std::minmax(p.left_image, p.right_image));
            }
            CHECK(seen.size() == 10);  // all C(5,2) pairs, each once
        }
    }
}

TEST_CASE("balanced scheduler keeps exposure within two") {
    SurveyService svc(config(300));
    for (int s = 0; s < 127; ++s) {
        auto sid = svc.create_session(kAdult).session_id;
        answer_all(svc, sid, 10, s);
        auto rows = svc.exposure();
        auto [lo, hi] = std::minmax_element(rows.begin(), rows.end(), [](auto& a, auto& b) {
            return a.exposure < b.exposure;
        });
        CHECK(hi->exposure - lo->exposure <= 10);
    }
    // Recount from the sessions rather than trusting the service's counter.
    std::map<std::string, std::size_t> count;
    for (const auto& img : images(300)) count[img.image_id] = 0;
    for (const auto& s : svc.sessions()) {
        for (const auto& p : s.pairs) {
            ++count[p.left_image];
            ++count[p.right_image];
        }
    }
    std::size_t lo = SIZE_MAX, hi = 0, total = 0;
    for (const auto& [id, c] : count) {
        lo = std::min(lo, c);
        hi = std::max(hi, c);
        total += c;
    }
    CHECK(total == 127 * 10 * 2);
    CHECK(hi - lo <= 2);
    for (const auto& row : svc.exposure()) CHECK(row.exposure == count[row.image_id]);
}

TEST_CASE("scheduling is reproducible from the seed") {
    auto run = [](std::uint64_t seed) {
        auto c = config(30);
        c.seed = seed;
        SurveyService svc(c, FakeClock{}.fn());
        for (int s = 0; s < 5; ++s) answer_all(svc, svc.create_session(kAdult).session_id, 10);
        return svc.export_bundle().comparisons;
    };
    CHECK(run(7) == run(7));
    CHECK(run(7) != run(8));
}

TEST_CASE("record_choice") {
    SurveyService svc(config(10));
    auto sid = svc.create_session(kAdult).session_id;
    auto p = svc.next_pair(sid);
    auto r = svc.record_choice(sid, p.pair_id, Side::Right);
    CHECK(r.pair_id == p.pair_id);
    CHECK(r.winner() == p.right_image);
    CHECK(r.loser() == p.left_image);
    CHECK(r.session_id == sid);

    CHECK(svc.record_choice(sid, p.pair_id, Side::Right) == r);  // idempotent replay
    CHECK(kind_of([&] { svc.record_choice(sid, p.pair_id, Side::Left); }) == ErrorKind::Conflict);
    CHECK(kind_of([&] { svc.record_choice(sid, "bogus", Side::Left); }) == ErrorKind::NotFound);
    CHECK(kind_of([&] { svc.record_choice("bogus", p.pair_id, Side::Left); }) == ErrorKind::NotFound);

    auto other = svc.create_session(kAdult).session_id;
    CHECK(kind_of([&] { svc.record_choice(other, p.pair_id, Side::Left); }) == ErrorKind::NotFound);
}

TEST_CASE("gaze batches") {
    FakeClock clock;
    auto c = config(10, 2);
    c.max_gaze_batch = 500;
    c.gaze_grace_ms = 1000;
    SurveyService svc(c, clock.fn());
    auto sid = svc.create_session(kAdult).session_id;
    auto p = svc.next_pair(sid);

    CHECK(svc.record_gaze_batch(sid, p.left_image, samples(120)) == 120);
    CHECK(svc.record_gaze_batch(sid, p.left_image, {}) == 0);
    CHECK(kind_of([&] { svc.record_gaze_batch(sid, p.left_image, samples(501)); }) == ErrorKind::TooLarge);
    CHECK(kind_of([&] { svc.record_gaze_batch("x", p.left_image, samples(1)); }) == ErrorKind::NotFound);
    CHECK(kind_of([&] { svc.record_gaze_batch(sid, "no-such", samples(1)); }) == ErrorKind::NotFound);

    std::string unseen;
    for (const auto& img : c.images) {
        if (img.image_id != p.left_image && img.image_id != p.right_image) unseen = img.image_id;
    }
    CHECK(kind_of([&] { svc.record_gaze_batch(sid, unseen, samples(1)); }) == ErrorKind::Validation);

    auto bad = samples(2);
    bad[1].x = std::nan("");
    CHECK(kind_of([&] { svc.record_gaze_batch(sid, p.left_image, bad); }) == ErrorKind::Validation);
    bad[1].validity = Validity::Invalid;
    CHECK(svc.record_gaze_batch(sid, p.left_image, bad) == 2);

    svc.record_choice(sid, p.pair_id, Side::Left);
    answer_all(svc, sid, 1);
    CHECK(svc.session(sid).state == SessionState::Complete);
    clock.advance(900);
    CHECK(svc.record_gaze_batch(sid, p.right_image, samples(3)) == 3);  // within the grace window
    clock.advance(200);
    CHECK(kind_of([&] { svc.record_gaze_batch(sid, p.right_image, samples(3)); }) == ErrorKind::Conflict);
}

TEST_CASE("interleaved gaze batches export as per-image time-sorted logs") {
    SurveyService svc(config(10, 1));
    auto sid = svc.create_session(kAdult).session_id;
    auto p = svc.next_pair(sid);
    // Two images, batches arriving alternately, each batch internally ordered.
    svc.record_gaze_batch(sid, p.left_image, samples(5, 0));
    svc.record_gaze_batch(sid, p.right_image, samples(5, 0));
    svc.record_gaze_batch(sid, p.left_image, samples(5, 40));
    svc.record_gaze_batch(sid, p.right_image, samples(5, 40));

    std::istringstream in(svc.export_bundle().gaze);
    auto parsed = parse_gaze_log(in);
    CHECK(parsed.diagnostics.empty());
    REQUIRE(parsed.samples.size() == 20);
    auto streams = split_streams(parsed.samples);
    CHECK(streams.size() == 2);
    for (const auto& [key, stream] : streams) {
        CHECK(stream.size() == 10);
        CHECK(std::is_sorted(stream.begin(), stream.end(),
                             [](const auto& a, const auto& b) { return a.t_ms < b.t_ms; }));
    }
}

TEST_CASE("idle sessions are abandoned and left out of the comparison export") {
    FakeClock clock;
    auto c = config(10, 3);
    c.session_ttl_ms = 60'000;
    SurveyService svc(c, clock.fn());
    auto done = svc.create_session(kAdult).session_id;
    answer_all(svc, done, 3);
    auto idle = svc.create_session(kAdult).session_id;
    auto p = svc.next_pair(idle);
    svc.record_choice(idle, p.pair_id, Side::Left);

    clock.advance(30'000);
    CHECK(svc.sweep_abandoned() == 0);
    clock.advance(31'000);
    CHECK(svc.sweep_abandoned() == 1);
    CHECK(svc.session(idle).state == SessionState::Abandoned);
    CHECK(svc.session(done).state == SessionState::Complete);
    CHECK(kind_of([&] { svc.next_pair(idle); }) == ErrorKind::Conflict);

    std::istringstream def(svc.export_bundle().comparisons);
    CHECK(parse_comparison_log(def).size() == 3);
    std::istringstream all(svc.export_bundle({.include_abandoned = true}).comparisons);
    CHECK(parse_comparison_log(all).size() == 4);
    CHECK(svc.export_bundle().sessions.find("\"abandoned\"") != std::string::npos);
}

TEST_CASE("empty study exports three header-only files") {
    SurveyService svc(config(4, 2));
    auto dir = temp_dir("empty_export");
    svc.export_logs(dir);
    for (auto name : {kComparisonsFile, kGazeFile, kSessionsFile}) {
        const auto text = text_io::read_file(dir / name);
        CHECK(std::count(text.begin(), text.end(), '\n') == 1);
        CHECK(text.rfind("{\"schema\":", 0) == 0);
    }
    CHECK(parse_comparison_log_file(dir / kComparisonsFile).empty());
    CHECK(parse_gaze_log_file(dir / kGazeFile).samples.empty());
    CHECK(kind_of([&] { svc.export_logs("/proc/definitely/not/writable"); }) == ErrorKind::Io);
    fs::remove_all(dir);
}

TEST_CASE("export round-trips through the log parsers and grouping") {
    SurveyService svc(config(8, 6), FakeClock{}.fn());
    std::vector<ComparisonRecord> acked;
    for (int s = 0; s < 6; ++s) {
        auto sid = svc.create_session(kAdult).session_id;
        for (int k = 0; k < 6; ++k) {
            auto p = svc.next_pair(sid);
            svc.record_gaze_batch(sid, p.left_image, samples(4, k * 100));
            acked.push_back(svc.record_choice(sid, p.pair_id, (s + k) % 3 ? Side::Left : Side::Right));
        }
    }
    auto dir = temp_dir("roundtrip_export");
    svc.export_logs(dir);
    auto records = parse_comparison_log_file(dir / kComparisonsFile);
    CHECK(records.size() == acked.size());
    auto sorted = [](std::vector<ComparisonRecord> v) {
        std::sort(v.begin(), v.end(), [](auto& a, auto& b) { return a.pair_id < b.pair_id; });
        return v;
    };
    CHECK(sorted(records) == sorted(acked));
    auto g1 = group_images(records);
    auto g2 = group_images(acked);
    REQUIRE(g1.size() == g2.size());
    for (std::size_t i = 0; i < g1.size(); ++i) {
        CHECK(g1[i].image_id == g2[i].image_id);
        CHECK(g1[i].group == g2[i].group);
        CHECK(g1[i].wins == g2[i].wins);
        CHECK(g1[i].losses == g2[i].losses);
    }
    auto gaze = parse_gaze_log_file(dir / kGazeFile);
    CHECK(gaze.diagnostics.empty());
    CHECK(gaze.samples.size() == 6 * 6 * 4);
    fs::remove_all(dir);
}

TEST_CASE("durability: acknowledged state survives a restart") {
    auto dir = temp_dir("restart");
    auto c = config(12, 4);
    c.data_dir = dir;
    c.snapshot_every = 0;
    FakeClock clock;
    ExportBundle before;
    std::vector<Session> sessions_before;
    {
        SurveyService svc(c, clock.fn());
        for (int s = 0; s < 3; ++s) {
            auto sid = svc.create_session({"35-44", "other"}).session_id;
            for (int k = 0; k < (s == 2 ? 2 : 4); ++k) {
                auto p = svc.next_pair(sid);
                svc.record_gaze_batch(sid, p.right_image, samples(7, 10 * k));
                svc.record_choice(sid, p.pair_id, k % 2 ? Side::Left : Side::Right);
            }
        }
        before = svc.export_bundle();
        sessions_before = svc.sessions();
    }
    SurveyService again(c, clock.fn());
    CHECK(again.sessions() == sessions_before);
    auto after = again.export_bundle();
    CHECK(after.comparisons == before.comparisons);
    CHECK(after.gaze == before.gaze);
    CHECK(after.sessions == before.sessions);
    fs::remove_all(dir);
}

TEST_CASE("durability: crash between append and acknowledgement") {
    auto dir = temp_dir("crash");
    auto c = config(12, 4);
    c.data_dir = dir;
    std::string sid;
    PairAssignment pair;
    {
        SurveyService svc(c);
        sid = svc.create_session(kAdult).session_id;
        pair = svc.next_pair(sid);
        svc.set_append_hook([](std::string_view ev) {
            if (ev.find("\"choice\"") != std::string_view::npos) throw std::runtime_error("killed");
        });
        CHECK_THROWS_WITH(svc.record_choice(sid, pair.pair_id, Side::Left), "killed");
    }
    SurveyService revived(c);
    auto s = revived.session(sid);
    REQUIRE(s.pairs.size() == 1);
    CHECK(s.pairs[0].answer == Side::Left);
    // The client never saw an ack and retries: same side is accepted, the other side is not.
    auto r = revived.record_choice(sid, pair.pair_id, Side::Left);
    CHECK(r.winner() == pair.left_image);
    CHECK(kind_of([&] { revived.record_choice(sid, pair.pair_id, Side::Right); }) == ErrorKind::Conflict);
    std::istringstream in(revived.export_bundle().comparisons);
    CHECK(parse_comparison_log(in).size() == 1);
    fs::remove_all(dir);
}

TEST_CASE("durability: torn final record is discarded on replay") {
    auto dir = temp_dir("torn");
    auto c = config(12, 4);
    c.data_dir = dir;
    std::string sid;
    {
        SurveyService svc(c);
        sid = svc.create_session(kAdult).session_id;
        answer_all(svc, sid, 2);
    }
    const auto events = dir / "events.jsonl";
    const auto good_size = fs::file_size(events);
    {
        std::ofstream out(events, std::ios::app | std::ios::binary);
        out << R"({"ev":"choice","session_id":")" << sid << R"(","pair_)";
    }
    SurveyService revived(c);
    CHECK(fs::file_size(events) == good_size);
    CHECK(revived.session(sid).pairs_answered() == 2);
    answer_all(revived, sid, 2);
    CHECK(revived.session(sid).state == SessionState::Complete);

    // A damaged record in the middle is not silently skipped.
    {
        auto text = text_io::read_file(events);
        const auto second = text.find('\n') + 1;
        text.insert(second, "garbage\n");
        std::ofstream(events, std::ios::binary | std::ios::trunc) << text;
    }
    CHECK(kind_of([&] { SurveyService broken(c); }) == ErrorKind::Parse);
    fs::remove_all(dir);
}

TEST_CASE("snapshots shorten replay without changing state") {
    auto dir = temp_dir("snapshot");
    auto c = config(15, 5);
    c.data_dir = dir;
    c.snapshot_every = 7;
    std::vector<Session> expected;
    {
        SurveyService svc(c, FakeClock{}.fn());
        for (int s = 0; s < 4; ++s) answer_all(svc, svc.create_session(kAdult).session_id, 5, s);
        svc.create_session(kAdult);
        expected = svc.sessions();
    }
    CHECK(fs::exists(dir / "snapshot.json"));
    {
        SurveyService from_snapshot(c);
        CHECK(from_snapshot.sessions() == expected);
    }
    // A corrupt snapshot falls back to the full log.
    std::ofstream(dir / "snapshot.json", std::ios::trunc) << "{broken";
    SurveyService from_log(c);
    CHECK(from_log.sessions() == expected);
    fs::remove_all(dir);
}

TEST_CASE("concurrent sessions") {
    auto c = config(60, 10);
    SurveyService svc(c);
    std::vector<std::thread> workers;
    std::atomic<int> errors{0};
    for (int t = 0; t < 8; ++t) {
        workers.emplace_back([&, t] {
            try {
                for (int s = 0; s < 5; ++s) {
                    auto sid = svc.create_session(kAdult).session_id;
                    for (int k = 0; k < 10; ++k) {
                        auto p = svc.next_pair(sid);
                        svc.record_gaze_batch(sid, p.left_image, samples(3));
                        svc.record_choice(sid, p.pair_id, (t + k) % 2 ? Side::Left : Side::Right);
                    }
                }
            } catch (...) {
                ++errors;
            }
        });
    }
    for (auto& w : workers) w.join();
    CHECK(errors == 0);
    auto sessions = svc.sessions();
    CHECK(sessions.size() == 40);
    for (const auto& s : sessions) CHECK(s.state == SessionState::Complete);
    auto rows = svc.exposure();
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& r : rows) {
        lo = std::min(lo, r.exposure);
        hi = std::max(hi, r.exposure);
    }
    CHECK(hi - lo <= 2);
    std::istringstream in(svc.export_bundle().comparisons);
    CHECK(parse_comparison_log(in).size() == 400);
}

TEST_CASE("exposure files") {
    std::vector<ExposureRow> rows = {{"a", "high", 3}, {"b", "low", 5}};
    CHECK(exposure_csv(rows) == "image_id,stratum,exposure\na,high,3\nb,low,5\n");
    auto j = exposure_summary_json(rows, 5.8);
    CHECK(j.find("\"spread\": 2") != std::string::npos);
    CHECK(j.find("\"mean\": 4.0") != std::string::npos);
    CHECK(j.find("\"target\": 5.8") != std::string::npos);
}
