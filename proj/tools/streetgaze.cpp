// streetgaze command-line entry point.

#include <fmt/format.h>

#include <csignal>
#include <filesystem>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "streetgaze/error.hpp"
#include "streetgaze/pipeline.hpp"
#include "streetgaze/simulate.hpp"
#include "streetgaze/survey_http.hpp"
#include "streetgaze/text_io.hpp"

using namespace streetgaze;
namespace fs = std::filesystem;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Validation:
        case ErrorKind::Parse:
        case ErrorKind::InvalidArgument:
        case ErrorKind::StratumUnderflow:
            return kExitValidation;
        default:
            return kExitRuntime;
    }
}

void write_or_print(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
    } else {
        if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
        text_io::write_file_atomic(path, text);
    }
}

struct ScreenOpts {
    double width = 0;
    double height = 0;
    double mm = 0;
    double distance = 700;

    void add(CLI::App* app, bool required) {
        auto* w = app->add_option("--screen-width", width, "screen width in pixels");
        auto* h = app->add_option("--screen-height", height, "screen height in pixels");
        auto* m = app->add_option("--screen-mm", mm, "physical screen width in mm");
        app->add_option("--distance-mm", distance, "viewing distance in mm")->capture_default_str();
        if (required) {
            w->required();
            h->required();
            m->required();
        }
    }
    ScreenGeometry geometry() const { return {width, height, mm, distance}; }
};

SurveyServer* g_server = nullptr;

extern "C" void on_signal(int) {
    if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Street-view perceived-safety attention toolkit"};
    app.require_subcommand(1);

    // run
    std::string manifest_path;
    auto* run = app.add_subcommand("run", "Run the whole pipeline from a manifest");
    run->add_option("manifest", manifest_path, "pipeline manifest (JSON, comments allowed)")->required();

    // ingest
    std::vector<std::string> logs;
    std::string out;
    std::string diag_out;
    ScreenOpts screen;
    PipelineParams params;
    auto* ingest = app.add_subcommand("ingest", "Parse gaze logs and detect fixations");
    ingest->add_option("logs", logs, "gaze log files")->required();
    screen.add(ingest, true);
    ingest->add_option("--source-hz", params.source_hz)->capture_default_str();
    ingest->add_option("--target-hz", params.target_hz)->capture_default_str();
    ingest->add_option("--velocity", params.ivt.velocity_threshold_deg_s, "I-VT threshold, deg/s")->capture_default_str();
    ingest->add_option("--min-duration", params.ivt.min_duration_ms, "minimum fixation, ms")->capture_default_str();
    ingest->add_option("-o,--out", out, "fixations output (default stdout)");
    ingest->add_option("--diagnostics", diag_out, "write malformed-line diagnostics here");

    // heatmap
    std::string fixations_path;
    std::string seg_dir;
    std::optional<double> sigma;
    auto* heatmap = app.add_subcommand("heatmap", "Build per-image human attention heatmaps");
    heatmap->add_option("--fixations", fixations_path)->required();
    heatmap->add_option("--segmentation", seg_dir, "directory of <image_id>.png maps (sets image size)")->required();
    heatmap->add_option("--sigma", sigma, "Gaussian sigma in pixels (default: half a degree)");
    screen.add(heatmap, false);
    heatmap->add_option("-o,--out", out)->required();

    // metrics
    std::string heat_dir;
    std::vector<double> thresholds = {15.0, 30.0};
    auto* metrics = app.add_subcommand("metrics", "Compute MoR, MoRH and MoH tables");
    metrics->add_option("--segmentation", seg_dir)->required();
    metrics->add_option("--heatmaps", heat_dir, "directory of human heatmap PNGs")->required();
    metrics->add_option("-t,--threshold", thresholds, "MoRH hue thresholds")->capture_default_str();
    metrics->add_option("-o,--out", out)->required();

    // group
    std::string comparisons;
    std::size_t group_threshold = 3;
    auto* group = app.add_subcommand("group", "Label images safe/unsafe/ambiguous from comparisons");
    group->add_option("comparisons", comparisons)->required();
    group->add_option("--threshold", group_threshold)->capture_default_str();
    group->add_option("-o,--out", out, "groups CSV (default stdout)");

    // stratify
    std::string scores_path;
    std::size_t per_stratum = 100;
    std::uint64_t seed = 0;
    std::string ext = ".jpg";
    auto* stratify = app.add_subcommand("stratify", "Sample high/medium/low images from dual model scores");
    stratify->add_option("scores", scores_path, "CSV image_id,global,sweden")->required();
    stratify->add_option("--per-stratum", per_stratum)->capture_default_str();
    stratify->add_option("--seed", seed, "sampling seed")->required();
    stratify->add_option("--ext", ext, "file extension for the study manifest")->capture_default_str();
    stratify->add_option("-o,--out", out, "study manifest CSV (default stdout)");

    // compare
    std::vector<std::string> xai_specs;
    std::string lpips_path;
    auto* compare = app.add_subcommand("compare", "Score XAI heatmaps against human heatmaps");
    compare->add_option("--heatmaps", heat_dir, "directory of human heatmap PNGs")->required();
    compare->add_option("--segmentation", seg_dir)->required();
    compare->add_option("--xai", xai_specs, "METHOD=DIR, repeatable")->required();
    compare->add_option("--lpips", lpips_path, "LPIPS scores from the model sidecar");
    compare->add_option("-o,--out", out)->required();

    // report
    std::string report_dir;
    auto* report = app.add_subcommand("report", "Re-render report.md and report.html from a run directory");
    report->add_option("dir", report_dir)->required();

    // serve
    std::string config_path;
    auto* serve = app.add_subcommand("serve", "Run the survey HTTP service");
    serve->add_option("--config", config_path, "server config JSON; STREETGAZE_* variables override it");

    // simulate
    std::string sim_config;
    std::optional<std::uint64_t> sim_seed;
    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic study bundle");
    simulate->add_option("--config", sim_config, "simulation config JSON (defaults if absent)");
    simulate->add_option("--seed", sim_seed, "override the config seed");
    simulate->add_option("-o,--out", out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitValidation;
    }

    try {
        if (*run) {
            const auto manifest = load_pipeline_manifest(manifest_path);
            const auto result = cmd_run(manifest);
            for (const auto& s : result.stages) {
                std::cout << fmt::format("{:<11} {:<8} {}\n", s.name, s.status, s.message);
            }
            if (!result.ok) return exit_code(*result.failure);
        } else if (*ingest) {
            std::vector<fs::path> paths(logs.begin(), logs.end());
            const auto r = ingest_gaze_logs(paths, screen.geometry(), params);
            write_or_print(out, serialize_fixations(r.fixations));
            std::string diag;
            for (const auto& d : r.diagnostics) diag += fmt::format("line {}: {}\n", d.line, d.message);
            if (!diag_out.empty()) write_or_print(diag_out, diag);
            std::cerr << fmt::format("{} samples, {} fixations, {} malformed lines\n", r.samples, r.fixations.size(),
                                     r.diagnostics.size());
        } else if (*heatmap) {
            const auto fix = parse_fixations_file(fixations_path);
            double s = 0.0;
            if (sigma) {
                s = *sigma;
            } else {
                if (screen.width <= 0) fail(ErrorKind::Validation, "give --sigma or the --screen-* options");
                s = default_sigma_px(screen.geometry());
            }
            if (!(s > 0.0)) fail(ErrorKind::Validation, "--sigma must be positive");
            std::map<std::string, std::vector<FixationEvent>> by_image;
            for (const auto& f : fix) by_image[f.image_id].push_back(f);
            fs::create_directories(out);
            std::size_t written = 0;
            for (const auto& [id, png] : list_pngs(seg_dir)) {
                const auto it = by_image.find(id);
                if (it == by_image.end()) continue;
                const auto seg = read_segmentation_png(png);
                const auto h = human_heatmap(it->second, seg.labels.width(), seg.labels.height(), s);
                if (!h) continue;
                write_heatmap_png(fs::path(out) / (id + ".png"), h->heatmap,
                                  {id, seg.labels.width(), seg.labels.height(), h->participants, s});
                write_hue_visualization(fs::path(out) / (id + "_hue.png"), hue_encode(h->heatmap));
                ++written;
            }
            std::cerr << fmt::format("{} heatmaps written\n", written);
        } else if (*metrics) {
            for (double t : thresholds) {
                if (!(t >= 0.0 && t <= kMaxHue)) fail(ErrorKind::Validation, fmt::format("threshold {} is outside [0, 150]", t));
            }
            std::vector<MetricRow> mor_rows, moh_rows;
            std::vector<std::vector<MetricRow>> morh_rows(thresholds.size());
            for (const auto& [id, png] : list_pngs(seg_dir)) {
                const auto seg = read_segmentation_png(png);
                mor_rows.push_back({id, mor(seg)});
                const auto hp = fs::path(heat_dir) / (id + ".png");
                if (!fs::exists(hp)) continue;
                const auto hue = load_hue(hp);
                for (std::size_t i = 0; i < thresholds.size(); ++i) morh_rows[i].push_back({id, morh(seg, hue, thresholds[i])});
                moh_rows.push_back({id, moh(seg, hue)});
            }
            fs::create_directories(out);
            text_io::write_file_atomic(fs::path(out) / "mor.csv", serialize_metric_table(mor_rows));
            for (std::size_t i = 0; i < thresholds.size(); ++i) {
                text_io::write_file_atomic(fs::path(out) / ("morh_t" + threshold_label(thresholds[i]) + ".csv"),
                                           serialize_metric_table(morh_rows[i]));
            }
            text_io::write_file_atomic(fs::path(out) / "moh.csv", serialize_metric_table(moh_rows));
        } else if (*group) {
            if (group_threshold < 1) fail(ErrorKind::Validation, "--threshold must be at least 1");
            const auto records = parse_comparison_log_file(comparisons);
            write_or_print(out, serialize_groups(group_images(records, group_threshold)));
        } else if (*stratify) {
            const auto scores = parse_dual_scores(text_io::read_file(scores_path));
            const auto strata = stratify_by_score(scores, per_stratum, seed);
            std::vector<StudyImage> images;
            for (const auto& [name, ids] : {std::pair{"high", &strata.high}, {"medium", &strata.medium}, {"low", &strata.low}}) {
                for (const auto& id : *ids) images.push_back({id, name, id + ext});
            }
            write_or_print(out, serialize_study_manifest(images));
        } else if (*compare) {
            std::vector<MethodInputs> methods;
            for (const auto& spec : xai_specs) {
                const auto eq = spec.find('=');
                if (eq == std::string::npos) fail(ErrorKind::Validation, "--xai expects METHOD=DIR, got " + spec);
                methods.push_back({xai_method_from_string(spec.substr(0, eq)), spec.substr(eq + 1)});
            }
            std::vector<std::string> ids;
            for (const auto& [id, png] : list_pngs(heat_dir)) {
                if (id.size() < 4 || id.substr(id.size() - 4) != "_hue") ids.push_back(id);
            }
            std::optional<LpipsTable> lpips;
            if (!lpips_path.empty()) lpips = ingest_lpips(lpips_path, ids);
            const auto scores = score_methods(ids, heat_dir, seg_dir, methods, lpips ? &*lpips : nullptr);
            const auto r = rank_methods(scores);
            fs::create_directories(out);
            text_io::write_file_atomic(fs::path(out) / "similarity.md", render_similarity_table(r));
            text_io::write_file_atomic(fs::path(out) / "similarity.json", similarity_report_json(r));
            std::cout << render_similarity_table(r);
        } else if (*report) {
            cmd_report(report_dir);
        } else if (*serve) {
            std::optional<fs::path> cfg_file;
            if (!config_path.empty()) cfg_file = config_path;
            const auto cfg = load_server_config(cfg_file);
            SurveyService service(cfg.study);
            SurveyServer server(service, cfg);
            const int port = server.bind();
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cerr << fmt::format("serving {} images on http://{}:{}\n", cfg.study.images.size(), cfg.host, port);
            server.run();
            g_server = nullptr;
        } else if (*simulate) {
            auto cfg = sim_config.empty() ? SimulationConfig{} : load_simulation_config(sim_config);
            if (sim_seed) cfg.seed = *sim_seed;
            const auto s = cmd_simulate(cfg, out);
            std::cerr << fmt::format("{} images, {} sessions, {} comparisons, {} gaze samples\n", s.images, s.sessions,
                                     s.comparisons, s.gaze_samples);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
