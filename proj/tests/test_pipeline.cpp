#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <map>

#include "json.hpp"
#include "streetgaze/pipeline.hpp"
#include "streetgaze/simulate.hpp"
#include "streetgaze/text_io.hpp"

using namespace streetgaze;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("streetgaze_pipeline_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path fixture(const std::string& name) { return fs::path(STREETGAZE_SOURCE_DIR) / "tests" / "fixtures" / name; }

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) files[e.path().lexically_relative(root).generic_string()] = text_io::read_file(e.path());
    }
    return files;
}

SimulationConfig small_config() {
    SimulationConfig c;
    c.images = 4;
    c.participants = 3;
    c.pairs_per_session = 4;
    c.width = 64;
    c.height = 48;
    c.screen = {64, 48, 96, 700};
    c.seed = 11;
    return c;
}

// Minimal valid directory layout for manifest validation tests.
fs::path layout(const std::string& name) {
    auto dir = scratch(name);
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "seg");
    std::ofstream(dir / "gaze.jsonl") << "{\"schema\":\"gaze_log\",\"version\":1}\n";
    std::ofstream(dir / "cmp.jsonl") << "{\"schema\":\"comparison_log\",\"version\":1}\n";
    return dir;
}

const char* kManifest = R"({
  // minimal
  "image_dir": "images",
  "segmentation_dir": "seg",
  "gaze_logs": ["gaze.jsonl"],
  "comparison_log": "cmp.jsonl",
  "output_dir": "out",
  "screen": {"width_px": 64, "height_px": 48, "physical_width_mm": 96},
  "params": {"thresholds": [15, 30]}
})";

}  // namespace

TEST_CASE("manifest: parse, defaults and relative paths") {
    auto dir = layout("parse");
    const auto m = parse_pipeline_manifest(kManifest, dir);
    CHECK(m.segmentation_dir == dir / "seg");
    CHECK(m.gaze_logs.size() == 1);
    CHECK(m.screen.viewing_distance_mm == 700.0);
    CHECK(m.params.thresholds == std::vector<double>{15, 30});
    CHECK(m.params.group_threshold == 3);
    CHECK_NOTHROW(m.validate());
    CHECK(m.sigma() == doctest::Approx(default_sigma_px(m.screen)));

    const auto text = serialize_pipeline_manifest(m, dir);
    CHECK(text.find(dir.string()) == std::string::npos);
    const auto back = parse_pipeline_manifest(text, dir);
    CHECK(back.segmentation_dir == m.segmentation_dir);
    CHECK(back.output_dir == m.output_dir);
    CHECK(back.params.thresholds == m.params.thresholds);
    fs::remove_all(dir);
}

TEST_CASE("manifest: missing segmentation directory names the field") {
    auto dir = layout("missing_seg");
    fs::remove_all(dir / "seg");
    const auto m = parse_pipeline_manifest(kManifest, dir);
    try {
        m.validate();
        FAIL("expected a validation error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Validation);
        CHECK(std::string(e.what()).find("segmentation_dir") != std::string::npos);
    }

    json j = json::parse(kManifest, nullptr, true, true);
    j.erase("segmentation_dir");
    try {
        parse_pipeline_manifest(j.dump(), dir);
        FAIL("expected a validation error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Validation);
        CHECK(std::string(e.what()).find("segmentation_dir") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("manifest: rejected values") {
    auto dir = layout("rejects");
    auto with = [&](const std::function<void(json&)>& edit) {
        json j = json::parse(kManifest, nullptr, true, true);
        edit(j);
        return j.dump();
    };
    auto invalid = [&](const std::string& text) {
        try {
            parse_pipeline_manifest(text, dir).validate();
        } catch (const Error& e) {
            return e.kind() == ErrorKind::Validation;
        }
        return false;
    };
    CHECK(invalid(with([](json& j) { j["params"]["thresholds"] = {15, 151}; })));
    CHECK(invalid(with([](json& j) { j["params"]["thresholds"] = {-1}; })));
    CHECK(invalid(with([](json& j) { j["params"]["thresholds"] = json::array(); })));
    CHECK(invalid(with([](json& j) { j["params"]["thresholds"] = {15, 15}; })));
    CHECK(invalid(with([](json& j) { j["params"]["colour"] = 1; })));
    CHECK(invalid(with([](json& j) { j["extra"] = 1; })));
    CHECK(invalid(with([](json& j) { j["screen"]["width_px"] = 0; })));
    CHECK(invalid(with([](json& j) { j["gaze_logs"] = {"nope.jsonl"}; })));
    CHECK(invalid(with([](json& j) { j["xai_dirs"] = {{"NotACam", "images"}}; })));
    CHECK(invalid(with([](json& j) { j["xai_dirs"] = {{"EigenCAM", "missing"}}; })));
    CHECK(invalid(with([](json& j) { j["params"]["target_hz"] = 240; })));
    CHECK_FALSE(invalid(with([](json& j) { j["params"]["thresholds"] = {0, 150}; })));
    CHECK_THROWS_AS(parse_pipeline_manifest("{not json", dir), Error);
    fs::remove_all(dir);
}

TEST_CASE("manifest: the documented example parses") {
    const auto m = load_pipeline_manifest(fixture("manifest.example.json"));
    CHECK(m.xai_dirs.size() == 2);
    CHECK(m.params.top_k == 10);
    CHECK(m.screen.width_px == 1920);
}

TEST_CASE("threshold labels") {
    CHECK(threshold_label(15) == "15");
    CHECK(threshold_label(22.5) == "22.5");
}

TEST_CASE("simulate: infeasible configs and empty studies") {
    auto dir = scratch("sim_edge");
    auto c = small_config();
    c.images = 0;
    CHECK_THROWS_AS(cmd_simulate(c, dir), Error);
    c = small_config();
    c.pairs_per_session = 7;  // four images only have six pairs
    CHECK_THROWS_AS(cmd_simulate(c, dir), Error);
    c = small_config();
    c.saliency_bias = {{20, 0.7}, {12, 0.6}};
    CHECK_THROWS_AS(cmd_simulate(c, dir), Error);
    CHECK_THROWS_AS(parse_simulation_config(R"({"imgs": 3})"), Error);
    CHECK(parse_simulation_config(R"({"saliency_bias": {"12": 0.5}})").saliency_bias.at(12) == 0.5);

    c = small_config();
    c.participants = 0;
    const auto s = cmd_simulate(c, dir);
    CHECK(s.comparisons == 0);
    std::istringstream cmp(text_io::read_file(dir / "comparisons.jsonl"));
    CHECK(parse_comparison_log(cmp).empty());
    auto gaze = parse_gaze_log_file(dir / "gaze.jsonl");
    CHECK(gaze.samples.empty());
    CHECK(gaze.diagnostics.empty());

    // The pipeline runs on an empty study and skips the comparison with no human maps.
    const auto r = cmd_run(load_pipeline_manifest(dir / "manifest.json"));
    CHECK(r.ok);
    CHECK(r.stages[4].status == "skipped");
    fs::remove_all(dir);
}

TEST_CASE("simulate: emitted files pass the readers") {
    auto dir = scratch("sim_files");
    const auto c = small_config();
    const auto s = cmd_simulate(c, dir);
    CHECK(s.comparisons == 12);
    CHECK(s.gaze_samples > 0);
    for (const auto& [id, png] : list_pngs(dir / "segmentation")) {
        CHECK_NOTHROW(read_segmentation_png(png).validate());
    }
    CHECK(parse_gaze_log_file(dir / "gaze.jsonl", {.strict = true}).samples.size() == s.gaze_samples);
    const auto lp = parse_lpips(text_io::read_file(dir / "lpips.jsonl"));
    CHECK(lp.scores.size() == 4 * 7);
    CHECK(lp.missing.empty());
    CHECK(parse_dual_scores(text_io::read_file(dir / "scores.csv")).size() == 4);
    CHECK(read_study_manifest(dir / "study.csv").size() == 4);
    const auto summary = json::parse(text_io::read_file(dir / "exposure_summary.json"));
    CHECK(summary["images"] == 4);
    CHECK(summary["spread"].get<int>() <= 2);
    for (auto m : kAllMethods) {
        const auto meta = read_heatmap_metadata(dir / "xai" / std::string(to_string(m)) / "img000.png");
        CHECK(meta.width == 64);
    }
    fs::remove_all(dir);
}

TEST_CASE("simulate: study shape of 300 images, 127 participants, 10 pairs") {
    auto dir = scratch("sim_shape");
    SimulationConfig c;
    c.images = 300;
    c.participants = 127;
    c.pairs_per_session = 10;
    c.width = 32;
    c.height = 24;
    c.screen = {32, 24, 48, 700};
    c.record_gaze = false;
    c.xai = false;
    cmd_simulate(c, dir);
    REQUIRE(fs::exists(dir / "exposure.csv"));
    const auto summary = json::parse(text_io::read_file(dir / "exposure_summary.json"));
    CHECK(summary["images"] == 300);
    CHECK(summary["spread"].get<int>() <= 2);
    CHECK(summary["mean"].get<double>() == doctest::Approx(127.0 * 10 * 2 / 300));
    fs::remove_all(dir);
}

TEST_CASE("run: bundled fixture, both thresholds, deterministic, class 20 first") {
    auto a = scratch("run_a");
    auto b = scratch("run_b");
    const auto cfg = load_simulation_config(fixture("synthetic_study.json"));
    CHECK(cfg.images == 8);
    CHECK(cfg.participants == 5);
    for (const auto& dir : {a, b}) {
        cmd_simulate(cfg, dir);
        const auto r = cmd_run(load_pipeline_manifest(dir / "manifest.json"));
        REQUIRE(r.ok);
        for (const auto& s : r.stages) CHECK(s.status == "ok");
    }
    const auto ta = snapshot_tree(a);
    CHECK(ta == snapshot_tree(b));
    CHECK(ta.contains("out/metrics/morh_t15.csv"));
    CHECK(ta.contains("out/metrics/morh_t30.csv"));
    CHECK(ta.contains("out/report.html"));
    CHECK(ta.at("out/report.md").find(a.string()) == std::string::npos);
    CHECK(ta.at("out/report.html").find("<svg") != std::string::npos);

    const auto rows = parse_metric_table(ta.at("out/metrics/moh.csv"));
    std::vector<ObjectVector> vs;
    for (const auto& r : rows) vs.push_back(r.vector);
    const auto top = top_k(mean_over_images(vs), 10);
    REQUIRE_FALSE(top.empty());
    CHECK(top[0].index == 20);
    // The car class also leads within every single image.
    for (const auto& r : rows) CHECK(top_k(r.vector, 1)[0].index == 20);

    // Re-rendering the report from the files reproduces it.
    cmd_report(a / "out");
    CHECK(text_io::read_file(a / "out" / "report.md") == ta.at("out/report.md"));
    CHECK(text_io::read_file(a / "out" / "report.html") == ta.at("out/report.html"));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("run: a failing stage labels partial outputs and stops later stages") {
    auto dir = scratch("run_fail");
    cmd_simulate(small_config(), dir);
    std::ofstream(dir / "comparisons.jsonl", std::ios::app) << "{\"broken\":\n";
    const auto r = cmd_run(load_pipeline_manifest(dir / "manifest.json"));
    CHECK_FALSE(r.ok);
    REQUIRE(r.failure);
    CHECK(*r.failure == ErrorKind::Parse);
    const auto status = json::parse(text_io::read_file(dir / "out" / "status.json"));
    CHECK(status["complete"] == false);
    std::map<std::string, std::string> st;
    for (const auto& s : status["stages"]) st[s["name"]] = s["status"];
    CHECK(st["ingest"] == "ok");
    CHECK(st["metrics"] == "ok");
    CHECK(st["group"] == "failed");
    CHECK(st["similarity"] == "not-run");
    CHECK(st["report"] == "not-run");
    fs::remove_all(dir);
}

TEST_CASE("ingest: per-stream pipeline matches the building blocks") {
    const ScreenGeometry screen{64, 48, 96, 700};
    PipelineParams p;
    std::vector<RawGazeSample> samples;
    // Two interleaved streams, each a steady fixation then a jump.
    for (int k = 0; k < 60; ++k) {
        const auto t = static_cast<std::int64_t>(std::llround(k * 1000.0 / 120.0));
        samples.push_back({"s1", "a", t, k < 30 ? 10.0 : 50.0, 10.0, Validity::Valid});
        samples.push_back({"s2", "a", t, 20.0, k < 30 ? 20.0 : 40.0, Validity::Valid});
    }
    const auto fix = fixations_from_samples(samples, screen, p);
    REQUIRE(fix.size() == 4);
    CHECK(fix[0].session_id == "s1");
    CHECK(fix[0].cx == doctest::Approx(10.0));
    CHECK(fix[1].cx == doctest::Approx(50.0));
    CHECK(fix[2].session_id == "s2");
    CHECK(fix[3].cy == doctest::Approx(40.0));

    const auto h = human_heatmap(fix, 64, 48, 3.0);
    REQUIRE(h);
    CHECK(h->participants == 2);
    CHECK_FALSE(human_heatmap({}, 64, 48, 3.0));
}

TEST_CASE("lpips fixture: missing pairs are reported") {
    const auto t = ingest_lpips(fixture("lpips_sample.jsonl"));
    CHECK(t.scores.size() == 8);
    CHECK(t.missing.size() == 6);  // img001 lacks six methods
}
