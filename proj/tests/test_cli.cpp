#include "doctest.h"

#include <fmt/format.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "streetgaze/pipeline.hpp"
#include "streetgaze/survey_service.hpp"
#include "streetgaze/text_io.hpp"

using namespace streetgaze;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("streetgaze_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int sg(const std::string& args) {
    const std::string cmd = std::string(STREETGAZE_CLI) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

const std::string kFixture = std::string(STREETGAZE_SOURCE_DIR) + "/tests/fixtures/synthetic_study.json";

}  // namespace

TEST_CASE("cli: usage errors exit 2") {
    CHECK(sg("") == 2);
    CHECK(sg("frobnicate") == 2);
    CHECK(sg("run") == 2);
    CHECK(sg("group --threshold x y") == 2);
    CHECK(sg("--help") == 0);
}

TEST_CASE("cli: simulate then run") {
    auto dir = scratch("run");
    CHECK(sg("simulate --config " + kFixture + " -o " + q(dir / "study")) == 0);
    CHECK(sg("run " + q(dir / "study" / "manifest.json")) == 0);
    CHECK(fs::exists(dir / "study" / "out" / "report.html"));
    CHECK(sg("report " + q(dir / "study" / "out")) == 0);

    // Validation problems exit 2, runtime problems 3.
    std::ofstream(dir / "zero.json") << R"({"images": 0})";
    CHECK(sg("simulate --config " + q(dir / "zero.json") + " -o " + q(dir / "z")) == 2);
    fs::remove_all(dir / "study" / "segmentation");
    CHECK(sg("run " + q(dir / "study" / "manifest.json")) == 2);
    CHECK(sg("run " + q(dir / "nope.json")) == 3);
    CHECK(sg("report " + q(dir / "empty")) == 2);
    fs::remove_all(dir);
}

TEST_CASE("cli: single-stage commands reproduce the run outputs") {
    auto dir = scratch("stages");
    const auto st = dir / "study";
    REQUIRE(sg("simulate --config " + kFixture + " -o " + q(st)) == 0);
    REQUIRE(sg("run " + q(st / "manifest.json")) == 0);
    const auto out = st / "out";
    const std::string screen = " --screen-width 160 --screen-height 120 --screen-mm 240";

    CHECK(sg("ingest " + q(st / "gaze.jsonl") + screen + " -o " + q(dir / "fix.jsonl")) == 0);
    CHECK(text_io::read_file(dir / "fix.jsonl") == text_io::read_file(out / "ingest" / "fixations.jsonl"));

    CHECK(sg("heatmap --fixations " + q(dir / "fix.jsonl") + " --segmentation " + q(st / "segmentation") + screen +
             " -o " + q(dir / "heat")) == 0);
    CHECK(text_io::read_file(dir / "heat" / "img003.png") == text_io::read_file(out / "heatmaps" / "img003.png"));
    CHECK(sg("heatmap --fixations " + q(dir / "fix.jsonl") + " --segmentation " + q(st / "segmentation") +
             " -o " + q(dir / "heat2")) == 2);  // neither sigma nor screen

    CHECK(sg("metrics --segmentation " + q(st / "segmentation") + " --heatmaps " + q(dir / "heat") + " -t 15 -t 30 -o " +
             q(dir / "metrics")) == 0);
    for (const auto* f : {"mor.csv", "morh_t15.csv", "morh_t30.csv", "moh.csv"}) {
        CHECK(text_io::read_file(dir / "metrics" / f) == text_io::read_file(out / "metrics" / f));
    }
    CHECK(sg("metrics --segmentation " + q(st / "segmentation") + " --heatmaps " + q(dir / "heat") + " -t 200 -o " +
             q(dir / "m2")) == 2);

    CHECK(sg("group " + q(st / "comparisons.jsonl") + " -o " + q(dir / "groups.csv")) == 0);
    CHECK(text_io::read_file(dir / "groups.csv") == text_io::read_file(out / "groups" / "groups.csv"));

    std::string xai;
    for (auto m : kAllMethods) {
        const std::string name(to_string(m));
        xai += " --xai " + name + "=" + q(st / "xai" / name);
    }
    CHECK(sg("compare --heatmaps " + q(dir / "heat") + " --segmentation " + q(st / "segmentation") + xai +
             " --lpips " + q(st / "lpips.jsonl") + " -o " + q(dir / "sim")) == 0);
    CHECK(text_io::read_file(dir / "sim" / "similarity.json") ==
          text_io::read_file(out / "similarity" / "similarity.json"));
    CHECK(sg("compare --heatmaps " + q(dir / "heat") + " --segmentation " + q(st / "segmentation") +
             " --xai Foo=bar -o " + q(dir / "sim2")) == 2);

    // Eight images cannot fill three strata of fifty.
    CHECK(sg("stratify " + q(st / "scores.csv") + " --per-stratum 50 --seed 1") == 2);
    CHECK(sg("stratify " + q(st / "scores.csv") + " --per-stratum 1") == 2);  // the seed is never implicit
    fs::remove_all(dir);
}

TEST_CASE("cli: stratify writes a study manifest") {
    auto dir = scratch("stratify");
    std::string csv = "image_id,global,sweden\n";
    for (int i = 0; i < 100; ++i) csv += fmt::format("i{},{},{}\n", i, 1 + i * 0.08, 1 + i * 0.05);
    text_io::write_file_atomic(dir / "scores.csv", csv);
    CHECK(sg("stratify " + q(dir / "scores.csv") + " --per-stratum 5 --seed 3 --ext .png -o " + q(dir / "study.csv")) == 0);
    const auto study = read_study_manifest(dir / "study.csv");
    REQUIRE(study.size() == 15);
    CHECK(study[0].stratum == "high");
    CHECK(study[14].stratum == "low");
    CHECK(study[0].file == study[0].image_id + ".png");
    fs::remove_all(dir);
}
