#include "streetgaze/pipeline.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <set>
#include <thread>

#include "json.hpp"
#include "streetgaze/ade20k_classes.hpp"
#include "streetgaze/error.hpp"
#include "streetgaze/text_io.hpp"

namespace streetgaze {
namespace fs = std::filesystem;

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// Runs body(i) for i in [0, n) on up to hardware_concurrency threads and
// rethrows the first failure by index, so errors are reproducible.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
    const std::size_t workers = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                body(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
}

fs::path resolve(const fs::path& base, const std::string& value) {
    fs::path p(value);
    return p.is_absolute() ? p : (base / p).lexically_normal();
}

std::string relative_or_absolute(const fs::path& p, const fs::path& base) {
    const auto rel = p.lexically_relative(base);
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return p.generic_string();
}

std::string html_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

// --- manifest field readers -------------------------------------------------

template <typename T>
T field(const json& obj, const std::string& name, const std::string& where) {
    if (!obj.contains(name)) fail(ErrorKind::Validation, fmt::format("manifest is missing required field '{}{}'", where, name));
    try {
        return obj.at(name).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorKind::Validation, fmt::format("manifest field '{}{}': {}", where, name, e.what()));
    }
}

template <typename T>
std::optional<T> optional_field(const json& obj, const std::string& name, const std::string& where) {
    if (!obj.contains(name) || obj.at(name).is_null()) return std::nullopt;
    return field<T>(obj, name, where);
}

void reject_unknown(const json& obj, const std::set<std::string>& known, const std::string& where) {
    if (!obj.is_object()) fail(ErrorKind::Validation, fmt::format("manifest field '{}' must be an object", where));
    for (const auto& [key, value] : obj.items()) {
        if (!known.contains(key)) fail(ErrorKind::Validation, fmt::format("unknown manifest field '{}{}'", where, key));
    }
}

// --- metric tables shared by the group and report stages -----------------------

struct MetricTable {
    std::string name;   // file stem, e.g. morh_t15
    std::string title;  // human label
    std::vector<MetricRow> rows;
};

struct GroupSummary {
    std::string metric;
    std::string title;
    std::string group;
    std::size_t images = 0;
    std::vector<RankedObject> top;
};

const std::array<std::string, 3> kSummaryGroups = {"all", "safe", "unsafe"};

std::vector<GroupSummary> summarize(const std::vector<MetricTable>& tables,
                                    const std::vector<GroupLabel>& groups, std::size_t k) {
    std::map<std::string, Group> label;
    for (const auto& g : groups) label[g.image_id] = g.group;
    std::vector<GroupSummary> out;
    for (const auto& table : tables) {
        for (const auto& group : kSummaryGroups) {
            std::vector<ObjectVector> members;
            for (const auto& row : table.rows) {
                const auto it = label.find(row.image_id);
                const bool in = group == "all" || (it != label.end() && to_string(it->second) == group);
                if (in) members.push_back(row.vector);
            }
            GroupSummary s{table.name, table.title, group, members.size(), {}};
            if (!members.empty()) s.top = top_k(mean_over_images(members), k);
            out.push_back(std::move(s));
        }
    }
    return out;
}

std::string summary_csv(const GroupSummary& s) {
    std::string out = "rank,class_index,class_name,value\n";
    for (std::size_t i = 0; i < s.top.size(); ++i) {
        out += fmt::format("{},{},{},{}\n", i + 1, s.top[i].index, s.top[i].name,
                           text_io::format_number(s.top[i].value));
    }
    return out;
}

std::string metric_title(const std::string& name) {
    if (name == "mor") return "MoR (object share of the image)";
    if (name == "moh") return "MoH adjusted (150 - mean hue over the object)";
    if (name.rfind("morh_t", 0) == 0) return fmt::format("MoRH, hue <= {}", name.substr(6));
    return name;
}

std::vector<MetricTable> load_metric_tables(const fs::path& metrics_dir, const std::vector<double>& thresholds) {
    std::vector<MetricTable> out;
    auto load = [&](const std::string& name) {
        const auto path = metrics_dir / (name + ".csv");
        if (!fs::exists(path)) return;
        out.push_back({name, metric_title(name), parse_metric_table(text_io::read_file(path))});
    };
    load("mor");
    for (double t : thresholds) load("morh_t" + threshold_label(t));
    load("moh");
    return out;
}

// --- report rendering ---------------------------------------------------------

struct ReportInputs {
    json run_info;
    json ingest;
    json heatmaps;
    std::optional<std::vector<GroupLabel>> groups;
    std::vector<MetricTable> tables;
    std::vector<GroupSummary> summaries;
    std::optional<SimilarityReport> similarity;
    std::vector<std::string> similarity_notes;
};

ReportInputs load_report_inputs(const fs::path& out) {
    ReportInputs r;
    auto read_json = [&](const fs::path& p) -> json {
        if (!fs::exists(p)) return json();
        try {
            return json::parse(text_io::read_file(p));
        } catch (const json::exception& e) {
            fail(ErrorKind::Parse, p.filename().string() + ": " + e.what());
        }
    };
    r.run_info = read_json(out / "run_info.json");
    if (r.run_info.is_null()) fail(ErrorKind::Validation, "no run_info.json in " + out.string() + "; run the pipeline first");
    r.ingest = read_json(out / "ingest" / "summary.json");
    r.heatmaps = read_json(out / "heatmaps" / "summary.json");
    if (fs::exists(out / "groups" / "groups.csv")) r.groups = parse_groups(text_io::read_file(out / "groups" / "groups.csv"));
    r.tables = load_metric_tables(out / "metrics", r.run_info.value("thresholds", std::vector<double>{}));
    const auto k = r.run_info.value("top_k", std::size_t{10});
    r.summaries = summarize(r.tables, r.groups.value_or(std::vector<GroupLabel>{}), k);
    if (fs::exists(out / "similarity" / "similarity.json")) {
        r.similarity = parse_similarity_report_json(text_io::read_file(out / "similarity" / "similarity.json"));
        const auto notes = read_json(out / "similarity" / "notes.json");
        if (notes.is_array()) {
            for (const auto& n : notes) r.similarity_notes.push_back(n.get<std::string>());
        }
    }
    return r;
}

std::string fmt4(double v) { return fmt::format("{:.4f}", v); }

std::string render_markdown(const ReportInputs& r) {
    std::string md = "# Street-view attention report\n\n";
    md += "## Inputs\n\n";
    if (r.ingest.is_object()) {
        md += fmt::format("- gaze logs: {}\n- gaze samples: {}\n- gaze streams (session x image): {}\n"
                          "- fixations: {}\n- malformed gaze lines: {}\n",
                          r.ingest.value("logs", 0), r.ingest.value("samples", 0), r.ingest.value("streams", 0),
                          r.ingest.value("fixations", 0), r.ingest.value("diagnostics", 0));
    }
    if (r.heatmaps.is_object()) {
        md += fmt::format("- segmented images: {}\n- images with human heatmaps: {}\n- heatmap sigma (px): {}\n",
                          r.heatmaps.value("images", 0), r.heatmaps.value("with_heatmap", 0),
                          fmt4(r.run_info.value("sigma_px", 0.0)));
    }
    md += "\n";
    if (r.groups) {
        std::map<std::string, std::size_t> count;
        for (const auto& g : *r.groups) ++count[std::string(to_string(g.group))];
        md += fmt::format("## Safety groups (threshold {})\n\n| group | images |\n|---|---|\n",
                          r.run_info.value("group_threshold", 3));
        for (const auto* g : {"safe", "unsafe", "ambiguous"}) md += fmt::format("| {} | {} |\n", g, count[g]);
        md += "\n";
    }
    for (const auto& s : r.summaries) {
        md += fmt::format("## Top {}: {} ({} images, {} group)\n\n", s.top.size(), s.title, s.images, s.group);
        if (s.top.empty()) {
            md += "No images in this group.\n\n";
            continue;
        }
        md += "| rank | object | value |\n|---|---|---|\n";
        for (std::size_t i = 0; i < s.top.size(); ++i) {
            md += fmt::format("| {} | {} | {} |\n", i + 1, s.top[i].name, fmt4(s.top[i].value));
        }
        md += "\n";
    }
    if (r.similarity) {
        md += "## XAI similarity to human attention\n\n";
        md += "Loss and LPIPS: lower is closer. Cosine: higher is closer. Bold marks the top two per column.\n\n";
        md += render_similarity_table(*r.similarity);
        for (const auto& n : r.similarity_notes) md += "\n" + n + "\n";
    }
    return md;
}

std::string svg_bars(const GroupSummary& s) {
    constexpr int kRow = 22;
    constexpr int kLabel = 170;
    constexpr int kBar = 320;
    const int height = static_cast<int>(s.top.size()) * kRow + 10;
    double max = 0.0;
    for (const auto& o : s.top) max = std::max(max, o.value);
    std::string svg = fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" role=\"img\">\n",
        kLabel + kBar + 80, height);
    for (std::size_t i = 0; i < s.top.size(); ++i) {
        const auto& o = s.top[i];
        const int y = static_cast<int>(i) * kRow + 5;
        const double w = max > 0.0 ? o.value / max * kBar : 0.0;
        svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"12\">{}</text>", kLabel - 6,
                           y + 14, html_escape(o.name));
        svg += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{:.2f}\" height=\"{}\" fill=\"#4a78b5\"/>", kLabel, y,
                           w, kRow - 6);
        svg += fmt::format("<text x=\"{:.2f}\" y=\"{}\" font-size=\"11\">{}</text>\n", kLabel + w + 4, y + 13,
                           fmt4(o.value));
    }
    return svg + "</svg>\n";
}

std::string render_html(const ReportInputs& r) {
    std::string h =
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n"
        "<title>Street-view attention report</title>\n<style>\n"
        "body{font-family:sans-serif;max-width:980px;margin:2em auto;color:#222}\n"
        "table{border-collapse:collapse;margin:1em 0}td,th{border:1px solid #bbb;padding:3px 8px}\n"
        ".charts{display:flex;flex-wrap:wrap;gap:1em}.chart{flex:1 1 460px}\n"
        "</style>\n</head>\n<body>\n<h1>Street-view attention report</h1>\n";
    if (r.groups) {
        std::map<std::string, std::size_t> count;
        for (const auto& g : *r.groups) ++count[std::string(to_string(g.group))];
        h += "<h2>Safety groups</h2>\n<table><tr><th>group</th><th>images</th></tr>\n";
        for (const auto* g : {"safe", "unsafe", "ambiguous"}) h += fmt::format("<tr><td>{}</td><td>{}</td></tr>\n", g, count[g]);
        h += "</table>\n";
    }
    std::string current;
    for (const auto& s : r.summaries) {
        if (s.metric != current) {
            if (!current.empty()) h += "</div>\n";
            h += fmt::format("<h2>{}</h2>\n<div class=\"charts\">\n", html_escape(s.title));
            current = s.metric;
        }
        h += fmt::format("<div class=\"chart\"><h3>{} ({} images)</h3>\n", html_escape(s.group), s.images);
        h += s.top.empty() ? "<p>No images in this group.</p>\n" : svg_bars(s);
        h += "</div>\n";
    }
    if (!current.empty()) h += "</div>\n";
    if (r.similarity) {
        const auto& sim = *r.similarity;
        auto bold = [](const BoldSet& b, XaiMethod m) {
            return std::find(b.members.begin(), b.members.end(), m) != b.members.end();
        };
        auto cell = [](double v, bool b) { return b ? "<b>" + fmt4(v) + "</b>" : fmt4(v); };
        h += "<h2>XAI similarity to human attention</h2>\n<table>\n<tr><th>Model Name</th><th>Loss</th>"
             "<th>LPIPS Score</th><th>Cosine Similarity</th></tr>\n";
        for (const auto& m : sim.means) {
            h += fmt::format("<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>\n", to_string(m.method),
                             cell(m.l2, bold(sim.bold_l2, m.method)),
                             m.lpips ? cell(*m.lpips, bold(sim.bold_lpips, m.method)) : "",
                             cell(m.cosine, bold(sim.bold_cosine, m.method)));
        }
        h += "</table>\n";
        for (const auto& n : r.similarity_notes) h += "<p>" + html_escape(n) + "</p>\n";
    }
    return h + "</body>\n</html>\n";
}

}  // namespace

// --- manifest ----------------------------------------------------------------

double PipelineManifest::sigma() const { return params.sigma_px ? *params.sigma_px : default_sigma_px(screen); }

void PipelineManifest::validate() const {
    auto need_dir = [](const fs::path& p, const char* name) {
        if (p.empty()) fail(ErrorKind::Validation, fmt::format("manifest field '{}' is empty", name));
        if (!fs::is_directory(p)) {
            fail(ErrorKind::Validation, fmt::format("manifest field '{}': directory does not exist: {}", name, p.string()));
        }
    };
    auto need_file = [](const fs::path& p, const std::string& name) {
        if (!fs::is_regular_file(p)) {
            fail(ErrorKind::Validation, fmt::format("manifest field '{}': file does not exist: {}", name, p.string()));
        }
    };
    need_dir(image_dir, "image_dir");
    need_dir(segmentation_dir, "segmentation_dir");
    for (std::size_t i = 0; i < gaze_logs.size(); ++i) need_file(gaze_logs[i], fmt::format("gaze_logs[{}]", i));
    need_file(comparison_log, "comparison_log");
    for (const auto& [m, dir] : xai_dirs) {
        if (!fs::is_directory(dir)) {
            fail(ErrorKind::Validation, fmt::format("manifest field 'xai_dirs.{}': directory does not exist: {}",
                                                    to_string(m), dir.string()));
        }
    }
    if (lpips_scores) need_file(*lpips_scores, "lpips_scores");
    if (output_dir.empty()) fail(ErrorKind::Validation, "manifest field 'output_dir' is empty");
    try {
        screen.validate();
    } catch (const Error& e) {
        fail(ErrorKind::Validation, std::string("manifest field 'screen': ") + e.what());
    }
    const auto& p = params;
    if (p.sigma_px && !(*p.sigma_px > 0.0)) fail(ErrorKind::Validation, "manifest field 'params.sigma_px' must be positive");
    if (p.thresholds.empty()) fail(ErrorKind::Validation, "manifest field 'params.thresholds' is empty");
    for (double t : p.thresholds) {
        if (!(t >= 0.0 && t <= kMaxHue)) {
            fail(ErrorKind::Validation, fmt::format("manifest field 'params.thresholds': {} is outside [0, 150]", t));
        }
    }
    std::set<std::string> labels;
    for (double t : p.thresholds) {
        if (!labels.insert(threshold_label(t)).second) {
            fail(ErrorKind::Validation, fmt::format("manifest field 'params.thresholds': {} is repeated", t));
        }
    }
    if (p.group_threshold < 1) fail(ErrorKind::Validation, "manifest field 'params.group_threshold' must be at least 1");
    if (p.top_k < 1) fail(ErrorKind::Validation, "manifest field 'params.top_k' must be at least 1");
    if (!(p.target_hz > 0.0) || !(p.source_hz >= p.target_hz)) {
        fail(ErrorKind::Validation, "manifest fields 'params.source_hz'/'params.target_hz' need source >= target > 0");
    }
    if (!(p.ivt.velocity_threshold_deg_s > 0.0)) {
        fail(ErrorKind::Validation, "manifest field 'params.ivt_velocity_deg_s' must be positive");
    }
    if (p.ivt.min_duration_ms < 0) fail(ErrorKind::Validation, "manifest field 'params.ivt_min_duration_ms' must not be negative");
}

PipelineManifest parse_pipeline_manifest(std::string_view text, const fs::path& base_dir) {
    json j;
    try {
        j = json::parse(text, nullptr, true, true);
    } catch (const json::exception& e) {
        fail(ErrorKind::Parse, std::string("manifest is not valid JSON: ") + e.what());
    }
    reject_unknown(j, {"image_dir", "segmentation_dir", "gaze_logs", "comparison_log", "xai_dirs", "lpips_scores",
                       "output_dir", "screen", "params"}, "");
    PipelineManifest m;
    m.image_dir = resolve(base_dir, field<std::string>(j, "image_dir", ""));
    m.segmentation_dir = resolve(base_dir, field<std::string>(j, "segmentation_dir", ""));
    for (const auto& p : field<std::vector<std::string>>(j, "gaze_logs", "")) m.gaze_logs.push_back(resolve(base_dir, p));
    m.comparison_log = resolve(base_dir, field<std::string>(j, "comparison_log", ""));
    if (auto x = optional_field<std::map<std::string, std::string>>(j, "xai_dirs", "")) {
        for (const auto& [name, dir] : *x) {
            XaiMethod method;
            try {
                method = xai_method_from_string(name);
            } catch (const Error&) {
                fail(ErrorKind::Validation, fmt::format("manifest field 'xai_dirs.{}': unknown XAI method", name));
            }
            m.xai_dirs[method] = resolve(base_dir, dir);
        }
    }
    if (auto l = optional_field<std::string>(j, "lpips_scores", "")) m.lpips_scores = resolve(base_dir, *l);
    m.output_dir = resolve(base_dir, field<std::string>(j, "output_dir", ""));

    const auto screen = field<json>(j, "screen", "");
    reject_unknown(screen, {"width_px", "height_px", "physical_width_mm", "viewing_distance_mm"}, "screen.");
    m.screen.width_px = field<double>(screen, "width_px", "screen.");
    m.screen.height_px = field<double>(screen, "height_px", "screen.");
    m.screen.physical_width_mm = field<double>(screen, "physical_width_mm", "screen.");
    if (auto d = optional_field<double>(screen, "viewing_distance_mm", "screen.")) m.screen.viewing_distance_mm = *d;

    if (j.contains("params")) {
        const auto& p = j["params"];
        reject_unknown(p, {"sigma_px", "thresholds", "group_threshold", "seed", "source_hz", "target_hz",
                           "ivt_velocity_deg_s", "ivt_min_duration_ms", "top_k"}, "params.");
        auto& q = m.params;
        q.sigma_px = optional_field<double>(p, "sigma_px", "params.");
        if (auto v = optional_field<std::vector<double>>(p, "thresholds", "params.")) q.thresholds = *v;
        if (auto v = optional_field<std::size_t>(p, "group_threshold", "params.")) q.group_threshold = *v;
        if (auto v = optional_field<std::uint64_t>(p, "seed", "params.")) q.seed = *v;
        if (auto v = optional_field<double>(p, "source_hz", "params.")) q.source_hz = *v;
        if (auto v = optional_field<double>(p, "target_hz", "params.")) q.target_hz = *v;
        if (auto v = optional_field<double>(p, "ivt_velocity_deg_s", "params.")) q.ivt.velocity_threshold_deg_s = *v;
        if (auto v = optional_field<std::int64_t>(p, "ivt_min_duration_ms", "params.")) q.ivt.min_duration_ms = *v;
        if (auto v = optional_field<std::size_t>(p, "top_k", "params.")) q.top_k = *v;
    }
    return m;
}

PipelineManifest load_pipeline_manifest(const fs::path& path) {
    return parse_pipeline_manifest(text_io::read_file(path), fs::absolute(path).parent_path());
}

std::string serialize_pipeline_manifest(const PipelineManifest& m, const fs::path& base_dir) {
    auto rel = [&](const fs::path& p) { return relative_or_absolute(p, base_dir); };
    ordered_json j;
    j["image_dir"] = rel(m.image_dir);
    j["segmentation_dir"] = rel(m.segmentation_dir);
    j["gaze_logs"] = ordered_json::array();
    for (const auto& g : m.gaze_logs) j["gaze_logs"].push_back(rel(g));
    j["comparison_log"] = rel(m.comparison_log);
    j["xai_dirs"] = ordered_json::object();
    for (const auto& [method, dir] : m.xai_dirs) j["xai_dirs"][std::string(to_string(method))] = rel(dir);
    if (m.lpips_scores) j["lpips_scores"] = rel(*m.lpips_scores);
    j["output_dir"] = rel(m.output_dir);
    j["screen"] = {{"width_px", m.screen.width_px},
                   {"height_px", m.screen.height_px},
                   {"physical_width_mm", m.screen.physical_width_mm},
                   {"viewing_distance_mm", m.screen.viewing_distance_mm}};
    ordered_json p;
    if (m.params.sigma_px) p["sigma_px"] = *m.params.sigma_px;
    p["thresholds"] = m.params.thresholds;
    p["group_threshold"] = m.params.group_threshold;
    p["seed"] = m.params.seed;
    p["source_hz"] = m.params.source_hz;
    p["target_hz"] = m.params.target_hz;
    p["ivt_velocity_deg_s"] = m.params.ivt.velocity_threshold_deg_s;
    p["ivt_min_duration_ms"] = m.params.ivt.min_duration_ms;
    p["top_k"] = m.params.top_k;
    j["params"] = p;
    return j.dump(2) + "\n";
}

std::string threshold_label(double t) { return text_io::format_number(t); }

// --- stage building blocks ------------------------------------------------------

std::vector<FixationEvent> fixations_from_samples(const std::vector<RawGazeSample>& samples,
                                                  const ScreenGeometry& screen, const PipelineParams& params) {
    auto streams = split_streams(samples);
    std::sort(streams.begin(), streams.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<FixationEvent> out;
    for (auto& [key, stream] : streams) {
        std::stable_sort(stream.begin(), stream.end(), [](const auto& a, const auto& b) { return a.t_ms < b.t_ms; });
        const auto clean = filter_invalid(downsample(stream, params.source_hz, params.target_hz));
        const auto fix = classify_fixations_ivt(clean, screen, params.ivt);
        out.insert(out.end(), fix.begin(), fix.end());
    }
    return out;
}

IngestResult ingest_gaze_logs(std::span<const fs::path> logs, const ScreenGeometry& screen,
                              const PipelineParams& params) {
    IngestResult r;
    std::vector<RawGazeSample> all;
    for (const auto& log : logs) {
        auto parsed = parse_gaze_log_file(log);
        for (auto& d : parsed.diagnostics) {
            d.message = fmt::format("{}: {}", log.filename().string(), d.message);
            r.diagnostics.push_back(std::move(d));
        }
        all.insert(all.end(), std::make_move_iterator(parsed.samples.begin()),
                   std::make_move_iterator(parsed.samples.end()));
    }
    r.samples = all.size();
    r.streams = split_streams(all).size();
    r.fixations = fixations_from_samples(all, screen, params);
    return r;
}

std::optional<HumanHeatmap> human_heatmap(std::span<const FixationEvent> fixations, std::size_t width,
                                          std::size_t height, double sigma) {
    std::map<std::string, std::vector<FixationEvent>> by_session;
    for (const auto& f : fixations) by_session[f.session_id].push_back(f);
    if (by_session.empty()) return std::nullopt;
    std::vector<AttentionHeatmap> maps;
    for (const auto& [session, fix] : by_session) maps.push_back(cdf_normalize(accumulate(fix, width, height, sigma)));
    return HumanHeatmap{aggregate_participants(maps), maps.size()};
}

std::vector<std::pair<std::string, fs::path>> list_pngs(const fs::path& dir) {
    std::vector<std::pair<std::string, fs::path>> out;
    if (!fs::is_directory(dir)) fail(ErrorKind::Io, "not a directory: " + dir.string());
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") out.emplace_back(e.path().stem().string(), e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

HueMap load_hue(const fs::path& heatmap_png) { return hue_encode(read_heatmap_png(heatmap_png)); }

std::vector<ImageScores> score_methods(const std::vector<std::string>& image_ids, const fs::path& human_dir,
                                       const fs::path& segmentation_dir, std::span<const MethodInputs> methods,
                                       const LpipsTable* lpips) {
    std::vector<ImageScores> out(image_ids.size());
    parallel_for(image_ids.size(), [&](std::size_t i) {
        const auto& id = image_ids[i];
        const auto human = load_hue(human_dir / (id + ".png"));
        const auto seg = read_segmentation_png(segmentation_dir / (id + ".png"));
        const auto human_moh = moh(seg, human);
        ImageScores scores{id, {}};
        for (const auto& m : methods) {
            const auto path = m.dir / (id + ".png");
            if (!fs::exists(path)) continue;
            try {
                const auto machine = load_hue(path);
                MethodScore s;
                s.method = m.method;
                s.l2 = l2_rms(human, machine);
                s.cosine = cosine_element(human_moh, moh(seg, machine)).value;
                if (lpips) {
                    auto it = lpips->scores.find({id, m.method});
                    if (it != lpips->scores.end()) s.lpips = it->second;
                }
                scores.methods.push_back(s);
            } catch (const Error& e) {
                fail(e.kind(), fmt::format("{} heatmap for {}: {}", to_string(m.method), id, e.what()));
            }
        }
        out[i] = std::move(scores);
    });
    std::erase_if(out, [](const ImageScores& s) { return s.methods.empty(); });
    return out;
}

// --- whole pipeline -------------------------------------------------------------

RunResult cmd_run(const PipelineManifest& manifest) {
    manifest.validate();
    const auto& p = manifest.params;
    const auto out = manifest.output_dir;
    ensure_dir(out);
    const double sigma = manifest.sigma();

    RunResult result;
    auto stage = [&](const std::string& name, const std::function<void(StageStatus&)>& body) {
        StageStatus st{name, "ok", "", {}};
        if (!result.ok) {
            st.status = "not-run";
            result.stages.push_back(std::move(st));
            return;
        }
        try {
            body(st);
        } catch (const Error& e) {
            st.status = "failed";
            st.message = e.what();
            result.ok = false;
            result.failure = e.kind();
        } catch (const std::exception& e) {
            st.status = "failed";
            st.message = e.what();
            result.ok = false;
            result.failure = ErrorKind::Io;
        }
        result.stages.push_back(std::move(st));
    };
    auto write = [&](StageStatus& st, const fs::path& rel, std::string_view contents) {
        ensure_dir((out / rel).parent_path());
        text_io::write_file_atomic(out / rel, contents);
        st.outputs.push_back(rel.generic_string());
    };

    {
        ordered_json info;
        info["sigma_px"] = sigma;
        info["thresholds"] = p.thresholds;
        info["group_threshold"] = p.group_threshold;
        info["top_k"] = p.top_k;
        info["seed"] = p.seed;
        info["source_hz"] = p.source_hz;
        info["target_hz"] = p.target_hz;
        info["ivt_velocity_deg_s"] = p.ivt.velocity_threshold_deg_s;
        info["ivt_min_duration_ms"] = p.ivt.min_duration_ms;
        text_io::write_file_atomic(out / "run_info.json", info.dump(2) + "\n");
    }

    IngestResult ingest;
    stage("ingest", [&](StageStatus& st) {
        ingest = ingest_gaze_logs(manifest.gaze_logs, manifest.screen, p);
        write(st, "ingest/fixations.jsonl", serialize_fixations(ingest.fixations));
        std::string diag;
        for (const auto& d : ingest.diagnostics) diag += fmt::format("line {}: {}\n", d.line, d.message);
        write(st, "ingest/diagnostics.txt", diag);
        ordered_json s;
        s["logs"] = manifest.gaze_logs.size();
        s["samples"] = ingest.samples;
        s["streams"] = ingest.streams;
        s["fixations"] = ingest.fixations.size();
        s["diagnostics"] = ingest.diagnostics.size();
        write(st, "ingest/summary.json", s.dump(2) + "\n");
        st.message = fmt::format("{} fixations from {} samples, {} malformed lines", ingest.fixations.size(),
                                 ingest.samples, ingest.diagnostics.size());
    });

    std::vector<std::string> ids;
    std::vector<SegmentationMap> segs;
    std::vector<std::optional<HumanHeatmap>> heat;
    stage("heatmap", [&](StageStatus& st) {
        const auto pngs = list_pngs(manifest.segmentation_dir);
        if (pngs.empty()) fail(ErrorKind::Validation, "segmentation_dir contains no PNG maps");
        std::map<std::string, std::vector<FixationEvent>> by_image;
        for (const auto& f : ingest.fixations) by_image[f.image_id].push_back(f);
        std::size_t orphans = 0;
        for (const auto& [id, fix] : by_image) {
            orphans += std::none_of(pngs.begin(), pngs.end(), [&](const auto& e) { return e.first == id; }) ? 1 : 0;
        }
        ids.resize(pngs.size());
        segs.resize(pngs.size());
        heat.resize(pngs.size());
        for (std::size_t i = 0; i < pngs.size(); ++i) ids[i] = pngs[i].first;
        ensure_dir(out / "heatmaps");
        parallel_for(pngs.size(), [&](std::size_t i) {
            segs[i] = read_segmentation_png(pngs[i].second);
            const auto& g = segs[i].labels;
            const auto it = by_image.find(ids[i]);
            if (it == by_image.end()) return;
            heat[i] = human_heatmap(it->second, g.width(), g.height(), sigma);
            if (!heat[i]) return;
            const auto png = out / "heatmaps" / (ids[i] + ".png");
            write_heatmap_png(png, heat[i]->heatmap, {ids[i], g.width(), g.height(), heat[i]->participants, sigma});
            // Later stages use the stored 16-bit values so single-stage commands agree with a run.
            heat[i]->heatmap = read_heatmap_png(png);
            write_hue_visualization(out / "heatmaps" / (ids[i] + "_hue.png"), hue_encode(heat[i]->heatmap));
        });
        std::size_t with = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!heat[i]) continue;
            ++with;
            st.outputs.push_back("heatmaps/" + ids[i] + ".png");
            st.outputs.push_back("heatmaps/" + ids[i] + ".png.json");
            st.outputs.push_back("heatmaps/" + ids[i] + "_hue.png");
        }
        ordered_json s;
        s["images"] = ids.size();
        s["with_heatmap"] = with;
        s["fixations_on_unknown_images"] = orphans;
        write(st, "heatmaps/summary.json", s.dump(2) + "\n");
        st.message = fmt::format("{} of {} images have human heatmaps", with, ids.size());
        if (orphans) st.message += fmt::format("; gaze for {} unknown images ignored", orphans);
    });

    stage("metrics", [&](StageStatus& st) {
        const std::size_t n = ids.size();
        std::vector<ObjectVector> mor_v(n), moh_v(n);
        std::vector<std::vector<ObjectVector>> morh_v(p.thresholds.size(), std::vector<ObjectVector>(n));
        parallel_for(n, [&](std::size_t i) {
            mor_v[i] = mor(segs[i]);
            if (!heat[i]) return;
            const auto hue = hue_encode(heat[i]->heatmap);
            for (std::size_t t = 0; t < p.thresholds.size(); ++t) morh_v[t][i] = morh(segs[i], hue, p.thresholds[t]);
            moh_v[i] = moh(segs[i], hue);
        });
        std::vector<MetricRow> rows;
        for (std::size_t i = 0; i < n; ++i) rows.push_back({ids[i], mor_v[i]});
        write(st, "metrics/mor.csv", serialize_metric_table(rows));
        for (std::size_t t = 0; t < p.thresholds.size(); ++t) {
            rows.clear();
            for (std::size_t i = 0; i < n; ++i) {
                if (heat[i]) rows.push_back({ids[i], morh_v[t][i]});
            }
            write(st, "metrics/morh_t" + threshold_label(p.thresholds[t]) + ".csv", serialize_metric_table(rows));
        }
        rows.clear();
        for (std::size_t i = 0; i < n; ++i) {
            if (heat[i]) rows.push_back({ids[i], moh_v[i]});
        }
        write(st, "metrics/moh.csv", serialize_metric_table(rows));
    });

    stage("group", [&](StageStatus& st) {
        const auto records = parse_comparison_log_file(manifest.comparison_log);
        const auto groups = group_images(records, p.group_threshold);
        write(st, "groups/groups.csv", serialize_groups(groups));
        const auto summaries = summarize(load_metric_tables(out / "metrics", p.thresholds), groups, p.top_k);
        for (const auto& s : summaries) {
            write(st, fmt::format("groups/top{}_{}_{}.csv", p.top_k, s.metric, s.group), summary_csv(s));
        }
        std::map<Group, std::size_t> count;
        for (const auto& g : groups) ++count[g.group];
        st.message = fmt::format("{} comparisons: {} safe, {} unsafe, {} ambiguous", records.size(),
                                 count[Group::Safe], count[Group::Unsafe], count[Group::Ambiguous]);
    });

    stage("similarity", [&](StageStatus& st) {
        if (manifest.xai_dirs.empty()) {
            st.status = "skipped";
            st.message = "no xai_dirs configured";
            return;
        }
        std::vector<std::string> human_ids;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (heat[i]) human_ids.push_back(ids[i]);
        }
        if (human_ids.empty()) {
            st.status = "skipped";
            st.message = "no human heatmaps to compare against";
            return;
        }
        std::optional<LpipsTable> lpips;
        if (manifest.lpips_scores) lpips = ingest_lpips(*manifest.lpips_scores, human_ids);
        std::vector<MethodInputs> methods;
        for (const auto& [m, dir] : manifest.xai_dirs) methods.push_back({m, dir});
        const auto scores = score_methods(human_ids, out / "heatmaps", manifest.segmentation_dir, methods,
                                          lpips ? &*lpips : nullptr);
        const auto report = rank_methods(scores);
        std::vector<std::string> notes;
        if (!lpips) {
            notes.push_back("LPIPS column empty: no lpips_scores file configured.");
        } else {
            std::size_t missing = 0;
            for (const auto& [img, m] : lpips->missing) {
                missing += manifest.xai_dirs.contains(m) ? 1 : 0;
            }
            if (missing) notes.push_back(fmt::format("LPIPS missing for {} (image, method) pairs; means use the pairs present.", missing));
        }
        std::size_t incomplete = 0;
        for (const auto& s : scores) incomplete += s.methods.size() < kAllMethods.size() ? 1 : 0;
        if (incomplete) notes.push_back(fmt::format("{} images lack a heatmap for at least one method.", incomplete));
        write(st, "similarity/similarity.md", render_similarity_table(report));
        write(st, "similarity/similarity.json", similarity_report_json(report));
        write(st, "similarity/notes.json", ordered_json(notes).dump(2) + "\n");
        st.message = fmt::format("{} images scored against {} methods", scores.size(), methods.size());
    });

    stage("report", [&](StageStatus& st) {
        cmd_report(out);
        st.outputs = {"report.md", "report.html"};
    });

    ordered_json status;
    status["complete"] = result.ok;
    status["failure"] = result.failure ? ordered_json(std::string(to_string(*result.failure))) : ordered_json();
    status["stages"] = ordered_json::array();
    for (const auto& s : result.stages) {
        ordered_json j;
        j["name"] = s.name;
        j["status"] = s.status;
        j["message"] = s.message;
        j["outputs"] = s.outputs;
        j["partial"] = s.status == "failed" && !s.outputs.empty();
        status["stages"].push_back(j);
    }
    text_io::write_file_atomic(out / "status.json", status.dump(2) + "\n");
    return result;
}

void cmd_report(const fs::path& output_dir) {
    const auto inputs = load_report_inputs(output_dir);
    text_io::write_file_atomic(output_dir / "report.md", render_markdown(inputs));
    text_io::write_file_atomic(output_dir / "report.html", render_html(inputs));
}

}  // namespace streetgaze
