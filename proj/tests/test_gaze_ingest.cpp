#include "doctest.h"

#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "streetgaze/error.hpp"
#include "streetgaze/gaze_ingest.hpp"

using namespace streetgaze;

namespace {

const ScreenGeometry kScreen{1920.0, 1080.0, 531.0, 700.0};

RawGazeSample sample(std::int64_t t, double x, double y, bool valid = true) {
    return {"s1", "img", t, x, y, valid ? Validity::Valid : Validity::Invalid};
}

GazeParseResult parse(const std::string& text, bool strict = false) {
    std::istringstream in(text);
    return parse_gaze_log(in, {strict});
}

std::string line(std::int64_t t, double x, double y, bool valid = true) {
    return serialize_gaze_sample(sample(t, x, y, valid)) + "\n";
}

// Exact visual angle between two screen points, no small-angle shortcut.
double exact_velocity_deg_s(const RawGazeSample& a, const RawGazeSample& b) {
    const double pitch = kScreen.physical_width_mm / kScreen.width_px;
    const double mm = std::hypot(b.x - a.x, b.y - a.y) * pitch;
    const double deg = 2.0 * std::atan(mm / 2.0 / kScreen.viewing_distance_mm) * 180.0 / M_PI;
    return deg / ((b.t_ms - a.t_ms) / 1000.0);
}

}  // namespace

TEST_CASE("parse_gaze_log: empty stream yields nothing") {
    auto r = parse("");
    CHECK(r.samples.empty());
    CHECK(r.diagnostics.empty());
}

TEST_CASE("parse_gaze_log: one well-formed line") {
    auto r = parse(R"({"session_id":"a","image_id":"b","t_ms":12,"x_px":3.5,"y_px":4,"valid":true})");
    REQUIRE(r.samples.size() == 1);
    CHECK(r.samples[0] == RawGazeSample{"a", "b", 12, 3.5, 4.0, Validity::Valid});
}

TEST_CASE("parse_gaze_log: corrupted line in a six-line fixture") {
    std::string text = line(0, 1, 1) + line(8, 1, 1) + line(17, 1, 1) +
                       "{\"session_id\":\"s1\",\"image_id\":\"img\",\"t_ms\":25,\"x_px\":\n" +
                       line(33, 1, 1) + line(42, 1, 1);
    auto lenient = parse(text);
    CHECK(lenient.samples.size() == 5);
    REQUIRE(lenient.diagnostics.size() == 1);
    CHECK(lenient.diagnostics[0].line == 4);

    try {
        parse(text, true);
        FAIL("strict mode accepted a corrupted line");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Parse);
        CHECK(std::string(e.what()).find("line 4") != std::string::npos);
    }
}

TEST_CASE("parse_gaze_log: strict error lists at most ten offenders") {
    std::string text;
    for (int i = 0; i < 12; ++i) text += "not json\n";
    try {
        parse(text, true);
        FAIL("expected parse error");
    } catch (const Error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("12 malformed") != std::string::npos);
        CHECK(msg.find("line 10:") != std::string::npos);
        CHECK(msg.find("line 11:") == std::string::npos);
    }
}

TEST_CASE("parse_gaze_log: field validation") {
    CHECK(parse(R"({"session_id":"a","image_id":"b","t_ms":-1,"x_px":0,"y_px":0,"valid":true})")
              .diagnostics.size() == 1);
    CHECK(parse(R"({"session_id":"a","image_id":"b","t_ms":1.5,"x_px":0,"y_px":0,"valid":true})")
              .diagnostics.size() == 1);
    CHECK(parse(R"({"session_id":"a","image_id":"b","t_ms":1,"x_px":null,"y_px":0,"valid":true})")
              .diagnostics.size() == 1);
    auto blink = parse(R"({"session_id":"a","image_id":"b","t_ms":1,"x_px":null,"y_px":null,"valid":false})");
    REQUIRE(blink.samples.size() == 1);
    CHECK(std::isnan(blink.samples[0].x));
}

TEST_CASE("parse_gaze_log: small timestamp regressions clamp, larger ones are rejected") {
    auto r = parse(line(10, 0, 0) + line(9, 0, 0) + line(4, 0, 0) + line(12, 0, 0));
    REQUIRE(r.samples.size() == 3);
    CHECK(r.samples[1].t_ms == 10);
    REQUIRE(r.diagnostics.size() == 1);
    CHECK(r.diagnostics[0].line == 3);
}

TEST_CASE("parse_gaze_log: header line and unreadable streams") {
    auto r = parse(serialize_gaze_log({sample(0, 1, 2)}));
    CHECK(r.samples.size() == 1);
    CHECK(r.diagnostics.empty());

    std::istringstream bad("x");
    bad.setstate(std::ios::badbit);
    CHECK_THROWS_AS(parse_gaze_log(bad), Error);
    CHECK_THROWS_AS(parse_gaze_log_file("/nonexistent/gaze.jsonl"), Error);
}

TEST_CASE("parse_gaze_log round-trips serialized valid records") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> coord(-50.0, 2000.0);
    std::vector<RawGazeSample> samples;
    std::int64_t t = 0;
    for (int i = 0; i < 500; ++i) {
        t += static_cast<std::int64_t>(rng() % 20);
        samples.push_back({"sess-" + std::to_string(i % 3), "img/" + std::to_string(i % 5), t,
                           coord(rng), coord(rng), Validity::Valid});
    }
    auto r = parse(serialize_gaze_log(samples));
    CHECK(r.diagnostics.empty());
    CHECK(r.samples == samples);
}

TEST_CASE("downsample: 120 Hz to 60 Hz") {
    std::vector<RawGazeSample> s;
    for (int i = 0; i < 240; ++i) s.push_back(sample(std::llround(i * 1000.0 / 120.0), i, i));

    // Oracle: count distinct 60 Hz windows with integer arithmetic.
    std::set<std::int64_t> buckets;
    for (const auto& x : s) buckets.insert(x.t_ms * 60 / 1000);
    REQUIRE(buckets.size() == 120);

    auto out = downsample(s, 120, 60);
    CHECK(out.size() == 120);
    const double span_s = (s.back().t_ms - s.front().t_ms) / 1000.0;
    CHECK(out.size() <= static_cast<std::size_t>(std::ceil(span_s * 60)) + 1);
    for (std::size_t i = 1; i < out.size(); ++i) CHECK(out[i].t_ms > out[i - 1].t_ms);
    // re-bucketing on the same grid keeps every survivor
    CHECK(downsample(out, 120, 60) == out);
    CHECK(downsample(out, 60, 60) == out);
}

TEST_CASE("downsample: first valid sample of each window wins") {
    std::vector<RawGazeSample> s = {sample(0, 1, 1, false), sample(8, 2, 2), sample(17, 3, 3),
                                    sample(25, 4, 4, false), sample(30, 5, 5, false)};
    auto out = downsample(s, 120, 60);
    REQUIRE(out.size() == 2);
    CHECK(out[0].x == 2.0);
    CHECK(out[1].x == 3.0);
}

TEST_CASE("downsample: identity, empty and invalid rates") {
    std::vector<RawGazeSample> s = {sample(0, 1, 1), sample(1, 2, 2)};
    CHECK(downsample(s, 60, 60) == s);
    CHECK(downsample({}, 120, 60).empty());
    CHECK_THROWS_AS(downsample(s, 30, 60), Error);
}

TEST_CASE("downsample keeps streams separate") {
    std::vector<RawGazeSample> s = {sample(0, 1, 1), {"s2", "img", 1, 5, 5, Validity::Valid},
                                    sample(2, 2, 2)};
    auto out = downsample(s, 120, 60);
    CHECK(out.size() == 2);
}

TEST_CASE("filter_invalid") {
    std::vector<RawGazeSample> s;
    for (int i = 0; i < 10; ++i) s.push_back(sample(i, i, i, i % 4 != 1));
    // i = 1, 5, 9 are invalid
    auto out = filter_invalid(s);
    CHECK(out.size() == 7);
    for (std::size_t i = 1; i < out.size(); ++i) CHECK(out[i].t_ms > out[i - 1].t_ms);

    std::vector<RawGazeSample> valid = {sample(0, 1, 1), sample(1, 2, 2)};
    CHECK(filter_invalid(valid) == valid);
    CHECK(filter_invalid({sample(0, 1, 1, false)}).empty());
    CHECK(filter_invalid({sample(0, std::numeric_limits<double>::infinity(), 1)}).empty());
}

TEST_CASE("I-VT: a stationary 500 ms stream is one fixation") {
    std::vector<RawGazeSample> s;
    for (int t = 0; t <= 500; t += 10) s.push_back(sample(t, 640, 360));
    auto f = classify_fixations_ivt(s, kScreen);
    REQUIRE(f.size() == 1);
    CHECK(f[0].duration_ms == 500);
    CHECK(f[0].start_ms == 0);
    CHECK(f[0].cx == 640.0);
    CHECK(f[0].cy == 360.0);
}

TEST_CASE("I-VT: two clusters joined by a saccade") {
    std::vector<RawGazeSample> s;
    std::int64_t t = 0;
    for (int i = 0; i < 20; ++i, t += 17) s.push_back(sample(t, 400 + (i % 2), 300));
    for (int i = 0; i < 20; ++i, t += 17) s.push_back(sample(t, 1200 + (i % 2), 700));

    // Oracle: count maximal runs below 30 deg/s using exact geometry.
    int runs = 0;
    bool in_run = false;
    for (std::size_t i = 1; i < s.size(); ++i) {
        const bool slow = exact_velocity_deg_s(s[i - 1], s[i]) < 30.0;
        if (slow && !in_run) ++runs;
        in_run = slow;
    }
    REQUIRE(runs == 2);

    auto f = classify_fixations_ivt(s, kScreen);
    REQUIRE(f.size() == 2);
    CHECK(f[0].cx == doctest::Approx(400.5));
    CHECK(f[1].cx == doctest::Approx(1200.5));
    CHECK(f[1].start_ms == 20 * 17);
}

TEST_CASE("I-VT: all saccades, short input, short fixations") {
    std::vector<RawGazeSample> fast;
    for (int i = 0; i < 30; ++i) fast.push_back(sample(i * 17, (i % 2) * 800.0, 100));
    CHECK(classify_fixations_ivt(fast, kScreen).empty());
    CHECK(classify_fixations_ivt({sample(0, 1, 1)}, kScreen).empty());

    std::vector<RawGazeSample> brief = {sample(0, 5, 5), sample(17, 5, 5), sample(34, 5, 5)};
    CHECK(classify_fixations_ivt(brief, kScreen).empty());  // 34 ms < 60 ms
    CHECK(classify_fixations_ivt(brief, kScreen, {30.0, 30}).size() == 1);
}

TEST_CASE("I-VT rejects mixed streams and bad geometry") {
    std::vector<RawGazeSample> mixed = {sample(0, 1, 1), {"s2", "img", 1, 1, 1, Validity::Valid}};
    CHECK_THROWS_AS(classify_fixations_ivt(mixed, kScreen), Error);
    CHECK_THROWS_AS(classify_fixations_ivt({sample(0, 1, 1), sample(5, 1, 1)},
                                           ScreenGeometry{0, 1, 1, 1}),
                    Error);
}

TEST_CASE("I-VT properties on random streams") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<RawGazeSample> s;
        std::int64_t t = 0;
        double x = 960;
        double y = 540;
        for (int i = 0; i < 300; ++i) {
            t += 8 + static_cast<std::int64_t>(rng() % 10);
            if (rng() % 15 == 0) {
                x = static_cast<double>(rng() % 2400) - 200.0;  // may leave the screen
                y = static_cast<double>(rng() % 1400) - 150.0;
            }
            s.push_back(sample(t, x + (rng() % 3), y + (rng() % 3)));
        }
        auto f = classify_fixations_ivt(s, kScreen);
        std::int64_t total = 0;
        for (const auto& e : f) {
            CHECK(e.duration_ms > 0);
            total += e.duration_ms;
            CHECK(e.cx >= 0.0);
            CHECK(e.cx <= kScreen.width_px);
            CHECK(e.cy >= 0.0);
            CHECK(e.cy <= kScreen.height_px);
        }
        CHECK(total <= s.back().t_ms - s.front().t_ms);
    }
}

TEST_CASE("fixation log round-trip") {
    std::vector<FixationEvent> f = {{"s", "i", 1.25, 2.5, 10, 120}, {"s", "j", 3, 4, 200, 61}};
    std::istringstream in(serialize_fixations(f));
    CHECK(parse_fixations(in) == f);
}
