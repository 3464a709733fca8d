#include "streetgaze/simulate.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <set>

#include "json.hpp"
#include "streetgaze/ade20k_classes.hpp"
#include "streetgaze/attention_heatmap.hpp"
#include "streetgaze/error.hpp"
#include "streetgaze/pipeline.hpp"
#include "streetgaze/png_io.hpp"
#include "streetgaze/rng.hpp"
#include "streetgaze/segmentation_metrics.hpp"
#include "streetgaze/similarity.hpp"
#include "streetgaze/text_io.hpp"

namespace streetgaze {
namespace fs = std::filesystem;

namespace {

using nlohmann::json;

constexpr std::uint8_t kBuilding = 1;
constexpr std::uint8_t kSky = 2;
constexpr std::uint8_t kTree = 4;
constexpr std::uint8_t kRoad = 6;
constexpr std::uint8_t kSidewalk = 11;
constexpr std::uint8_t kPerson = 12;
constexpr std::uint8_t kCar = 20;

// Synthetic XAI maps: share of machine "fixations" that ignore the salient classes.
double method_noise(XaiMethod m) {
    switch (m) {
        case XaiMethod::AblationCAM: return 0.55;
        case XaiMethod::EigenCAM: return 0.25;
        case XaiMethod::GradCAM: return 0.5;
        case XaiMethod::GradCAMPlusPlus: return 0.6;
        case XaiMethod::HiResCAM: return 0.4;
        case XaiMethod::ScoreCAM: return 0.7;
        case XaiMethod::XGradCAM: return 0.2;
    }
    return 0.5;
}

png::Rgb class_colour(std::uint8_t label) {
    switch (label) {
        case kBuilding: return {150, 120, 110};
        case kSky: return {135, 190, 235};
        case kTree: return {60, 130, 50};
        case kRoad: return {90, 90, 95};
        case kSidewalk: return {185, 180, 170};
        case kPerson: return {220, 60, 60};
        case kCar: return {40, 60, 200};
        default: return {128, 128, 128};
    }
}

void fill_rect(Grid<std::uint8_t>& g, long x0, long y0, long w, long h, std::uint8_t label) {
    for (long y = std::max(0L, y0); y < std::min<long>(g.height(), y0 + h); ++y) {
        for (long x = std::max(0L, x0); x < std::min<long>(g.width(), x0 + w); ++x) g(x, y) = label;
    }
}

SegmentationMap make_segmentation(const SimulationConfig& cfg, const std::string& id) {
    auto rng = substream(cfg.seed, "segmentation/" + id);
    auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    auto pick = [&](long a, long b) { return std::uniform_int_distribution<long>(a, std::max(a, b))(rng); };
    const long w = static_cast<long>(cfg.width);
    const long h = static_cast<long>(cfg.height);
    Grid<std::uint8_t> g(cfg.width, cfg.height, kBuilding);
    const long horizon = static_cast<long>(h * uni(0.25, 0.4));
    const long street = static_cast<long>(h * uni(0.55, 0.65));
    const long walk = static_cast<long>(w * 0.18);
    fill_rect(g, 0, 0, w, horizon, kSky);
    fill_rect(g, 0, street, w, h - street, kRoad);
    fill_rect(g, 0, street, walk, h - street, kSidewalk);
    fill_rect(g, w - walk, street, walk, h - street, kSidewalk);

    const long trees = pick(1, 3);
    for (long t = 0; t < trees; ++t) {
        const double r = uni(0.05, 0.09) * w;
        const double cx = uni(0, w);
        const double cy = uni(horizon, street);
        for (long y = 0; y < street; ++y) {
            for (long x = 0; x < w; ++x) {
                if (std::hypot(x + 0.5 - cx, y + 0.5 - cy) <= r) g(x, y) = kTree;
            }
        }
    }
    const long cars = pick(1, 3);
    for (long c = 0; c < cars; ++c) {
        const long cw = static_cast<long>(w * uni(0.11, 0.19));
        const long ch = static_cast<long>(h * uni(0.08, 0.12));
        fill_rect(g, pick(walk, w - walk - cw), pick(street, h - ch), cw, ch, kCar);
    }
    const long people = pick(0, 2);
    for (long p = 0; p < people; ++p) {
        const long pw = std::max(2L, w / 40);
        const long ph = std::max(4L, h / 12);
        const long x = pick(0, 1) ? pick(0, walk - pw) : pick(w - walk, w - pw);
        fill_rect(g, x, pick(street, h - ph), pw, ph, kPerson);
    }
    return SegmentationMap{std::move(g)};
}

Grid<png::Rgb> render(const SimulationConfig& cfg, const std::string& id, const SegmentationMap& seg) {
    auto rng = substream(cfg.seed, "render/" + id);
    std::uniform_int_distribution<int> jitter(-12, 12);
    Grid<png::Rgb> img(cfg.width, cfg.height);
    for (std::size_t y = 0; y < cfg.height; ++y) {
        for (std::size_t x = 0; x < cfg.width; ++x) {
            auto c = class_colour(seg.labels(x, y));
            for (auto& v : c) v = static_cast<std::uint8_t>(std::clamp(v + jitter(rng), 0, 255));
            img(x, y) = c;
        }
    }
    return img;
}

// Pixel lists per class, used to aim fixations.
using ClassPixels = std::map<std::size_t, std::vector<std::pair<double, double>>>;

ClassPixels class_pixels(const SegmentationMap& seg) {
    ClassPixels out;
    const auto& g = seg.labels;
    for (std::size_t y = 0; y < g.height(); ++y) {
        for (std::size_t x = 0; x < g.width(); ++x) out[g(x, y)].emplace_back(x + 0.5, y + 0.5);
    }
    return out;
}

std::pair<double, double> pick_target(std::mt19937_64& rng, const SimulationConfig& cfg, const ClassPixels& pixels,
                                      double noise) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double r = u(rng);
    if (u(rng) >= noise) {
        for (const auto& [cls, share] : cfg.saliency_bias) {
            if (r < share) {
                const auto it = pixels.find(cls);
                if (it == pixels.end() || it->second.empty()) break;
                return it->second[std::uniform_int_distribution<std::size_t>(0, it->second.size() - 1)(rng)];
            }
            r -= share;
        }
    }
    return {u(rng) * static_cast<double>(cfg.width), u(rng) * static_cast<double>(cfg.height)};
}

// One viewing of an image at 120 Hz: a glance at the centre, then saccades
// between biased fixation targets, with random blink dropouts.
std::vector<RawGazeSample> view_gaze(std::mt19937_64& rng, const SimulationConfig& cfg, const ClassPixels& pixels,
                                     const std::string& sid, const std::string& image, std::int64_t t0) {
    std::vector<RawGazeSample> out;
    std::normal_distribution<double> jitter(0.0, 0.25);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> fix_ms(180, 400);
    std::size_t k = 0;
    auto emit = [&](double x, double y) {
        RawGazeSample s{sid, image, t0 + std::llround(static_cast<double>(k++) * 1000.0 / 120.0), x, y,
                        Validity::Valid};
        if (u(rng) < cfg.blink_rate) {
            s.validity = Validity::Invalid;
            s.x = 0.0;
            s.y = 0.0;
        }
        out.push_back(s);
    };
    double cx = cfg.width / 2.0;
    double cy = cfg.height / 2.0;
    emit(cx, cy);
    for (std::size_t f = 0; f < cfg.fixations_per_view; ++f) {
        const auto [tx, ty] = pick_target(rng, cfg, pixels, 0.0);
        for (int s = 1; s <= 3; ++s) emit(cx + (tx - cx) * s / 4.0, cy + (ty - cy) * s / 4.0);
        const int n = fix_ms(rng) * 120 / 1000;
        for (int s = 0; s < n; ++s) {
            emit(std::clamp(tx + jitter(rng), 0.0, cfg.width - 1e-6), std::clamp(ty + jitter(rng), 0.0, cfg.height - 1e-6));
        }
        cx = tx;
        cy = ty;
    }
    return out;
}

AttentionHeatmap machine_heatmap(const SimulationConfig& cfg, const std::string& id, XaiMethod m,
                                 const ClassPixels& pixels) {
    auto rng = substream(cfg.seed, fmt::format("xai/{}/{}", to_string(m), id));
    std::vector<FixationEvent> fix;
    for (int i = 0; i < 12; ++i) {
        const auto [x, y] = pick_target(rng, cfg, pixels, method_noise(m));
        fix.push_back({"model", id, x, y, i * 300, 300});
    }
    return cdf_normalize(accumulate(fix, cfg.width, cfg.height, default_sigma_px(cfg.screen)));
}

template <typename T>
void read_opt(const json& j, const char* name, T& out) {
    if (!j.contains(name)) return;
    try {
        out = j.at(name).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorKind::Validation, fmt::format("simulation config field '{}': {}", name, e.what()));
    }
}

}  // namespace

void SimulationConfig::validate() const {
    if (images < 2) fail(ErrorKind::Validation, fmt::format("simulation needs at least 2 images, got {}", images));
    if (pairs_per_session < 1 || pairs_per_session > images * (images - 1) / 2) {
        fail(ErrorKind::Validation, fmt::format("pairs_per_session {} is infeasible with {} images", pairs_per_session, images));
    }
    if (width < 16 || height < 16) fail(ErrorKind::Validation, "images must be at least 16x16 pixels");
    double total = 0.0;
    for (const auto& [cls, share] : saliency_bias) {
        if (cls >= kNumClasses) fail(ErrorKind::Validation, fmt::format("saliency_bias class {} is outside [0, 150)", cls));
        if (!(share >= 0.0 && share <= 1.0)) fail(ErrorKind::Validation, "saliency_bias shares must lie in [0, 1]");
        total += share;
    }
    if (total > 1.0 + 1e-9) fail(ErrorKind::Validation, "saliency_bias shares sum above 1");
    if (fixations_per_view < 1) fail(ErrorKind::Validation, "fixations_per_view must be at least 1");
    if (!(blink_rate >= 0.0 && blink_rate < 1.0)) fail(ErrorKind::Validation, "blink_rate must lie in [0, 1)");
    try {
        screen.validate();
    } catch (const Error& e) {
        fail(ErrorKind::Validation, std::string("screen: ") + e.what());
    }
}

SimulationConfig parse_simulation_config(std::string_view text) {
    json j;
    try {
        j = json::parse(text, nullptr, true, true);
    } catch (const json::exception& e) {
        fail(ErrorKind::Parse, std::string("simulation config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) fail(ErrorKind::Validation, "simulation config must be a JSON object");
    static const std::set<std::string> known = {"images", "participants", "pairs_per_session", "seed", "width",
                                                "height", "saliency_bias", "screen", "fixations_per_view",
                                                "blink_rate", "record_gaze", "xai", "scheduler"};
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) fail(ErrorKind::Validation, "unknown simulation config field '" + key + "'");
    }
    SimulationConfig c;
    read_opt(j, "images", c.images);
    read_opt(j, "participants", c.participants);
    read_opt(j, "pairs_per_session", c.pairs_per_session);
    read_opt(j, "seed", c.seed);
    read_opt(j, "width", c.width);
    read_opt(j, "height", c.height);
    read_opt(j, "fixations_per_view", c.fixations_per_view);
    read_opt(j, "blink_rate", c.blink_rate);
    read_opt(j, "record_gaze", c.record_gaze);
    read_opt(j, "xai", c.xai);
    if (j.contains("scheduler")) {
        std::string s;
        read_opt(j, "scheduler", s);
        c.policy = scheduler_policy_from_string(s);
    }
    if (j.contains("saliency_bias")) {
        std::map<std::string, double> bias;
        read_opt(j, "saliency_bias", bias);
        c.saliency_bias.clear();
        for (const auto& [k, v] : bias) {
            std::size_t pos = 0;
            unsigned long cls = 0;
            try {
                cls = std::stoul(k, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos != k.size()) fail(ErrorKind::Validation, "saliency_bias key '" + k + "' is not a class index");
            c.saliency_bias[cls] = v;
        }
    }
    // Screen defaults follow the image size unless given.
    c.screen = {static_cast<double>(c.width), static_cast<double>(c.height), 240.0, 700.0};
    if (j.contains("screen")) {
        const auto& s = j["screen"];
        if (!s.is_object()) fail(ErrorKind::Validation, "simulation config field 'screen' must be an object");
        for (const auto& [key, value] : s.items()) {
            if (key != "width_px" && key != "height_px" && key != "physical_width_mm" && key != "viewing_distance_mm") {
                fail(ErrorKind::Validation, "unknown simulation config field 'screen." + key + "'");
            }
        }
        read_opt(s, "width_px", c.screen.width_px);
        read_opt(s, "height_px", c.screen.height_px);
        read_opt(s, "physical_width_mm", c.screen.physical_width_mm);
        read_opt(s, "viewing_distance_mm", c.screen.viewing_distance_mm);
    }
    return c;
}

SimulationConfig load_simulation_config(const fs::path& path) {
    return parse_simulation_config(text_io::read_file(path));
}

SimulationSummary cmd_simulate(const SimulationConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    for (const auto* sub : {"images", "segmentation"}) fs::create_directories(out_dir / sub);

    std::vector<std::string> ids;
    for (std::size_t i = 0; i < cfg.images; ++i) ids.push_back(fmt::format("img{:03d}", i));

    std::vector<SegmentationMap> segs(ids.size());
    std::vector<ClassPixels> pixels(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        segs[i] = make_segmentation(cfg, ids[i]);
        pixels[i] = class_pixels(segs[i]);
        write_segmentation_png(out_dir / "segmentation" / (ids[i] + ".png"), segs[i]);
        png::write_rgb8(out_dir / "images" / (ids[i] + ".png"), render(cfg, ids[i], segs[i]));
    }

    // Latent safety drives both the model scores and participants' choices.
    std::vector<double> latent(ids.size());
    std::vector<DualScore> scores;
    {
        auto rng = substream(cfg.seed, "latent");
        std::normal_distribution<double> n(0.0, 1.0);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            latent[i] = n(rng);
            const double g = std::clamp(5.0 + 1.5 * latent[i] + 0.3 * n(rng), 1.0, 9.0);
            const double s = std::clamp(5.0 + 1.4 * latent[i] + 0.4 * n(rng), 1.0, 9.0);
            scores.push_back({ids[i], g, s});
        }
    }
    std::string scores_csv = "image_id,global,sweden\n";
    for (const auto& s : scores) {
        scores_csv += fmt::format("{},{},{}\n", s.image_id, text_io::format_number(s.global), text_io::format_number(s.sweden));
    }
    text_io::write_file_atomic(out_dir / "scores.csv", scores_csv);

    std::vector<std::size_t> order(ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a].global > scores[b].global; });
    StudyConfig study;
    study.images.resize(ids.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
        const auto i = order[r];
        const char* stratum = r * 3 < order.size() ? "high" : (r * 3 < 2 * order.size() ? "medium" : "low");
        study.images[i] = {ids[i], stratum, ids[i] + ".png"};
    }
    study.pairs_per_session = cfg.pairs_per_session;
    study.seed = cfg.seed;
    study.policy = cfg.policy;
    study.exposure_target = static_cast<double>(cfg.participants * cfg.pairs_per_session * 2) / ids.size();
    text_io::write_file_atomic(out_dir / "study.csv", serialize_study_manifest(study.images));

    auto now = std::make_shared<std::int64_t>(1'700'000'000'000);
    SurveyService service(study, [now] { return *now; });
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < ids.size(); ++i) index[ids[i]] = i;
    auto choice_rng = substream(cfg.seed, "choices");
    auto gaze_rng = substream(cfg.seed, "gaze");
    auto demo_rng = substream(cfg.seed, "demographics");
    std::size_t gaze_samples = 0;
    for (std::size_t p = 0; p < cfg.participants; ++p) {
        *now = 1'700'000'000'000 + static_cast<std::int64_t>(p) * 3'600'000;
        const std::int64_t start = *now;
        Demographics d{std::string(kAgeBands[std::uniform_int_distribution<std::size_t>(0, 5)(demo_rng)]), std::nullopt};
        if (std::uniform_int_distribution<int>(0, 2)(demo_rng) > 0) d.gender = p % 2 ? "female" : "male";
        const auto session = service.create_session(d);
        for (std::size_t k = 0; k < cfg.pairs_per_session; ++k) {
            const auto pair = service.next_pair(session.session_id);
            if (cfg.record_gaze) {
                for (const auto* img : {&pair.left_image, &pair.right_image}) {
                    auto samples = view_gaze(gaze_rng, cfg, pixels[index.at(*img)], session.session_id, *img,
                                             *now - start);
                    *now += samples.back().t_ms - (*now - start) + 400;
                    gaze_samples += service.record_gaze_batch(session.session_id, *img, std::move(samples));
                }
            } else {
                *now += 3000;
            }
            const double diff = latent[index.at(pair.left_image)] - latent[index.at(pair.right_image)];
            const double p_left = 1.0 / (1.0 + std::exp(-2.0 * diff));
            const bool left = std::uniform_real_distribution<double>(0.0, 1.0)(choice_rng) < p_left;
            service.record_choice(session.session_id, pair.pair_id, left ? Side::Left : Side::Right);
            *now += 500;
        }
    }
    service.export_logs(out_dir);
    const auto exposure = service.exposure();
    text_io::write_file_atomic(out_dir / "exposure.csv", exposure_csv(exposure));
    text_io::write_file_atomic(out_dir / "exposure_summary.json", exposure_summary_json(exposure, study.exposure_target));

    PipelineManifest m;
    m.image_dir = out_dir / "images";
    m.segmentation_dir = out_dir / "segmentation";
    m.gaze_logs = {out_dir / kGazeFile};
    m.comparison_log = out_dir / kComparisonsFile;
    m.output_dir = out_dir / "out";
    m.screen = cfg.screen;
    m.params.seed = cfg.seed;
    if (cfg.xai) {
        LpipsTable lpips;
        auto rng = substream(cfg.seed, "lpips");
        std::normal_distribution<double> n(0.0, 0.03);
        for (auto method : kAllMethods) {
            const auto dir = out_dir / "xai" / std::string(to_string(method));
            fs::create_directories(dir);
            m.xai_dirs[method] = dir;
            for (std::size_t i = 0; i < ids.size(); ++i) {
                write_heatmap_png(dir / (ids[i] + ".png"), machine_heatmap(cfg, ids[i], method, pixels[i]),
                                  {ids[i], cfg.width, cfg.height, 1, default_sigma_px(cfg.screen)});
                lpips.scores[{ids[i], method}] = std::clamp(0.2 + 0.6 * method_noise(method) + n(rng), 0.0, 1.0);
            }
        }
        text_io::write_file_atomic(out_dir / "lpips.jsonl", serialize_lpips(lpips));
        m.lpips_scores = out_dir / "lpips.jsonl";
    }
    text_io::write_file_atomic(out_dir / "manifest.json", serialize_pipeline_manifest(m, out_dir));

    SimulationSummary summary;
    summary.images = ids.size();
    summary.sessions = cfg.participants;
    summary.comparisons = cfg.participants * cfg.pairs_per_session;
    summary.gaze_samples = gaze_samples;
    for (const auto& e : fs::recursive_directory_iterator(out_dir)) {
        if (!e.is_regular_file()) continue;
        const auto rel = e.path().lexically_relative(out_dir).generic_string();
        if (rel.rfind("out/", 0) != 0) summary.files.push_back(rel);
    }
    std::sort(summary.files.begin(), summary.files.end());
    return summary;
}

}  // namespace streetgaze
