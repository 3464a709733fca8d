#include "streetgaze/segmentation_metrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"
#include "streetgaze/error.hpp"
#include "streetgaze/png_io.hpp"
#include "streetgaze/rng.hpp"
#include "streetgaze/text_io.hpp"

namespace streetgaze {
namespace {

constexpr std::string_view kComparisonSchema = "comparison_log";

void require_same_shape(const SegmentationMap& seg, const HueMap& hue) {
    if (!seg.labels.same_shape(hue.cells)) {
        fail(ErrorKind::InvalidArgument,
             fmt::format("segmentation {}x{} does not match hue map {}x{}", seg.labels.width(),
                         seg.labels.height(), hue.cells.width(), hue.cells.height()));
    }
}

double parse_double(std::string_view field, std::string_view what) {
    double v = 0.0;
    const auto* end = field.data() + field.size();
    auto [ptr, ec] = std::from_chars(field.data(), end, v);
    if (ec != std::errc{} || ptr != end) {
        fail(ErrorKind::Parse, fmt::format("{}: '{}' is not a number", what, field));
    }
    return v;
}

}  // namespace

void SegmentationMap::validate() const {
    if (labels.empty()) fail(ErrorKind::Validation, "segmentation map is empty");
    for (auto v : labels.cells()) {
        if (v >= kNumClasses && v != kUnlabeled) {
            fail(ErrorKind::Validation, fmt::format("label {} is outside the 150-class taxonomy", v));
        }
    }
}

SegmentationMap read_segmentation_png(const std::filesystem::path& path) {
    SegmentationMap seg{png::read_gray8(path)};
    try {
        seg.validate();
    } catch (const Error& e) {
        fail(ErrorKind::Validation, path.string() + ": " + e.what());
    }
    return seg;
}

void write_segmentation_png(const std::filesystem::path& path, const SegmentationMap& seg) {
    seg.validate();
    png::write_gray8(path, seg.labels);
}

std::string_view to_string(MetricKind kind) {
    switch (kind) {
        case MetricKind::MoR: return "MoR";
        case MetricKind::MoRH: return "MoRH";
        case MetricKind::MoHAdjusted: return "MoH_adjusted";
    }
    return "?";
}

MetricKind metric_kind_from_string(std::string_view text) {
    if (text == "MoR") return MetricKind::MoR;
    if (text == "MoRH") return MetricKind::MoRH;
    if (text == "MoH_adjusted") return MetricKind::MoHAdjusted;
    fail(ErrorKind::Parse, fmt::format("unknown metric kind '{}'", text));
}

ObjectVector mor(const SegmentationMap& seg) {
    if (seg.labels.empty()) fail(ErrorKind::InvalidArgument, "segmentation map has zero area");
    std::array<std::size_t, kNumClasses> counts{};
    for (auto v : seg.labels.cells()) {
        if (v < kNumClasses) ++counts[v];
    }
    ObjectVector out;
    out.kind = MetricKind::MoR;
    const double area = static_cast<double>(seg.labels.size());
    for (std::size_t o = 0; o < kNumClasses; ++o) out.values[o] = static_cast<double>(counts[o]) / area;
    return out;
}

ObjectVector morh(const SegmentationMap& seg, const HueMap& hue, double t) {
    require_same_shape(seg, hue);
    if (!(t >= 0.0 && t <= kMaxHue)) {
        fail(ErrorKind::InvalidArgument, fmt::format("threshold {} outside [0, 150]", t));
    }
    std::array<std::size_t, kNumClasses> counts{};
    std::size_t region = 0;
    auto labels = seg.labels.cells();
    auto hues = hue.cells.cells();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (hues[i] > t) continue;
        ++region;
        if (labels[i] < kNumClasses) ++counts[labels[i]];
    }
    if (region == 0) {
        fail(ErrorKind::EmptyHighlightRegion, fmt::format("no pixel has hue <= {}", t));
    }
    ObjectVector out;
    out.kind = MetricKind::MoRH;
    out.threshold = t;
    for (std::size_t o = 0; o < kNumClasses; ++o) {
        if (counts[o] > 0) {
            out.values[o] = static_cast<double>(counts[o]) / static_cast<double>(region);
        }
    }
    return out;
}

ObjectVector moh(const SegmentationMap& seg, const HueMap& hue) {
    require_same_shape(seg, hue);
    std::array<double, kNumClasses> sums{};
    std::array<std::size_t, kNumClasses> counts{};
    auto labels = seg.labels.cells();
    auto hues = hue.cells.cells();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= kNumClasses) continue;
        sums[labels[i]] += hues[i];
        ++counts[labels[i]];
    }
    ObjectVector out;
    out.kind = MetricKind::MoHAdjusted;
    for (std::size_t o = 0; o < kNumClasses; ++o) {
        if (counts[o] > 0) out.values[o] = kMaxHue - sums[o] / static_cast<double>(counts[o]);
    }
    return out;
}

ObjectVector mean_over_images(std::span<const ObjectVector> vectors) {
    if (vectors.empty()) fail(ErrorKind::InvalidArgument, "no vectors to average");
    const auto& first = vectors.front();
    std::array<double, kNumClasses> sums{};
    std::array<std::size_t, kNumClasses> counts{};
    for (const auto& v : vectors) {
        if (v.kind != first.kind) fail(ErrorKind::InvalidArgument, "cannot average mixed metric kinds");
        if (v.threshold != first.threshold) {
            fail(ErrorKind::InvalidArgument, "cannot average MoRH vectors with different thresholds");
        }
        for (std::size_t o = 0; o < kNumClasses; ++o) {
            if (v.values[o]) {
                sums[o] += *v.values[o];
                ++counts[o];
            }
        }
    }
    ObjectVector out;
    out.kind = first.kind;
    out.threshold = first.threshold;
    for (std::size_t o = 0; o < kNumClasses; ++o) {
        if (counts[o] > 0) out.values[o] = sums[o] / static_cast<double>(counts[o]);
    }
    return out;
}

std::vector<RankedObject> top_k(const ObjectVector& vector, std::size_t k) {
    if (k == 0) fail(ErrorKind::InvalidArgument, "k must be at least 1");
    std::vector<RankedObject> ranked;
    for (std::size_t o = 0; o < kNumClasses; ++o) {
        if (vector.values[o]) ranked.push_back({o, class_name(o), *vector.values[o]});
    }
    std::sort(ranked.begin(), ranked.end(), [](const RankedObject& a, const RankedObject& b) {
        if (a.value != b.value) return a.value > b.value;
        return a.index < b.index;
    });
    if (ranked.size() > k) ranked.resize(k);
    return ranked;
}

std::string serialize_metric_table(std::span<const MetricRow> rows) {
    std::string out = "image_id,kind,t";
    for (auto name : class_names()) {
        out += ',';
        out += name;
    }
    out += '\n';
    for (const auto& row : rows) {
        if (row.image_id.find_first_of(",\n\"") != std::string::npos) {
            fail(ErrorKind::InvalidArgument, "image id contains a CSV delimiter: " + row.image_id);
        }
        out += row.image_id;
        out += ',';
        out += to_string(row.vector.kind);
        out += ',';
        if (row.vector.threshold) out += text_io::format_number(*row.vector.threshold);
        for (const auto& v : row.vector.values) {
            out += ',';
            if (v) out += text_io::format_number(*v);
        }
        out += '\n';
    }
    return out;
}

std::vector<MetricRow> parse_metric_table(std::string_view text) {
    auto lines = text_io::split(text, '\n');
    if (lines.empty() || text_io::trim(lines[0]).empty()) {
        fail(ErrorKind::Parse, "metric table has no header");
    }
    const auto header = text_io::split(text_io::trim(lines[0]), ',');
    if (header.size() != 3 + kNumClasses || header[0] != "image_id" || header[1] != "kind" ||
        header[2] != "t") {
        fail(ErrorKind::Parse, "metric table header does not match the 150-class layout");
    }
    std::vector<MetricRow> rows;
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        const auto line = text_io::trim(lines[ln]);
        if (line.empty()) continue;
        const auto fields = text_io::split(line, ',');
        if (fields.size() != header.size()) {
            fail(ErrorKind::Parse, fmt::format("metric table line {}: expected {} fields, got {}",
                                               ln + 1, header.size(), fields.size()));
        }
        MetricRow row;
        row.image_id = fields[0];
        row.vector.kind = metric_kind_from_string(fields[1]);
        const auto where = fmt::format("metric table line {}", ln + 1);
        if (!fields[2].empty()) row.vector.threshold = parse_double(fields[2], where);
        for (std::size_t o = 0; o < kNumClasses; ++o) {
            if (!fields[3 + o].empty()) row.vector.values[o] = parse_double(fields[3 + o], where);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string_view to_string(Side side) { return side == Side::Left ? "left" : "right"; }

Side side_from_string(std::string_view text) {
    if (text == "left") return Side::Left;
    if (text == "right") return Side::Right;
    fail(ErrorKind::Parse, fmt::format("chosen side must be 'left' or 'right', got '{}'", text));
}

std::string serialize_comparison(const ComparisonRecord& r) {
    nlohmann::ordered_json j;
    j["pair_id"] = r.pair_id;
    j["left"] = r.left_image;
    j["right"] = r.right_image;
    j["chosen"] = std::string(to_string(r.chosen));
    j["session_id"] = r.session_id;
    j["t_ms"] = r.t_ms;
    return j.dump();
}

std::string serialize_comparison_log(std::span<const ComparisonRecord> records) {
    std::string out = text_io::schema_header(kComparisonSchema);
    out += '\n';
    for (const auto& r : records) {
        out += serialize_comparison(r);
        out += '\n';
    }
    return out;
}

std::vector<ComparisonRecord> parse_comparison_log(std::istream& in) {
    std::vector<ComparisonRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto body = text_io::trim(line);
        if (body.empty()) continue;
        if (line_no == 1 && text_io::is_schema_header(body, kComparisonSchema)) continue;
        try {
            const auto j = nlohmann::json::parse(body);
            ComparisonRecord r;
            r.pair_id = j.at("pair_id").get<std::string>();
            r.left_image = j.at("left").get<std::string>();
            r.right_image = j.at("right").get<std::string>();
            r.chosen = side_from_string(j.at("chosen").get<std::string>());
            r.session_id = j.at("session_id").get<std::string>();
            r.t_ms = j.at("t_ms").get<std::int64_t>();
            if (r.left_image == r.right_image) {
                throw std::runtime_error("left and right image are identical");
            }
            out.push_back(std::move(r));
        } catch (const std::exception& e) {
            fail(ErrorKind::Parse, fmt::format("comparison log line {}: {}", line_no, e.what()));
        }
    }
    if (in.bad()) fail(ErrorKind::Io, "comparison log stream is unreadable");
    return out;
}

std::vector<ComparisonRecord> parse_comparison_log_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open comparison log " + path.string());
    return parse_comparison_log(in);
}

std::string_view to_string(Group group) {
    switch (group) {
        case Group::Safe: return "safe";
        case Group::Unsafe: return "unsafe";
        case Group::Ambiguous: return "ambiguous";
    }
    return "?";
}

std::vector<GroupLabel> group_images(std::span<const ComparisonRecord> records,
                                     std::size_t threshold) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> tally;
    for (const auto& r : records) {
        ++tally[r.winner()].first;
        ++tally[r.loser()].second;
    }
    std::vector<GroupLabel> out;
    out.reserve(tally.size());
    for (const auto& [image, wl] : tally) {
        const auto [wins, losses] = wl;
        Group g = Group::Ambiguous;
        if (wins >= threshold && losses < threshold) {
            g = Group::Safe;
        } else if (losses >= threshold && wins < threshold) {
            g = Group::Unsafe;
        }
        out.push_back({image, g, wins, losses});
    }
    return out;
}

Group group_from_string(std::string_view text) {
    if (text == "safe") return Group::Safe;
    if (text == "unsafe") return Group::Unsafe;
    if (text == "ambiguous") return Group::Ambiguous;
    fail(ErrorKind::Parse, fmt::format("unknown group '{}'", text));
}

std::string serialize_groups(std::span<const GroupLabel> labels) {
    std::string out = "image_id,group,wins,losses\n";
    for (const auto& l : labels) {
        out += fmt::format("{},{},{},{}\n", l.image_id, to_string(l.group), l.wins, l.losses);
    }
    return out;
}

std::vector<GroupLabel> parse_groups(std::string_view text) {
    std::vector<GroupLabel> out;
    const auto lines = text_io::split(text, '\n');
    bool header = false;
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
        const auto body = text_io::trim(lines[ln]);
        if (body.empty()) continue;
        if (!header) {
            if (body != "image_id,group,wins,losses") fail(ErrorKind::Parse, "groups file has the wrong header");
            header = true;
            continue;
        }
        const auto f = text_io::split(body, ',');
        if (f.size() != 4) fail(ErrorKind::Parse, fmt::format("groups line {}: expected 4 fields", ln + 1));
        GroupLabel g;
        g.image_id = f[0];
        g.group = group_from_string(f[1]);
        try {
            g.wins = std::stoul(f[2]);
            g.losses = std::stoul(f[3]);
        } catch (const std::exception&) {
            fail(ErrorKind::Parse, fmt::format("groups line {}: bad count", ln + 1));
        }
        out.push_back(std::move(g));
    }
    if (!header) fail(ErrorKind::Parse, "groups file is empty");
    return out;
}

std::vector<DualScore> pair_scores(std::span<const SafetyScore> scores) {
    std::map<std::string, std::pair<std::optional<double>, std::optional<double>>> joined;
    std::vector<std::string> order;
    for (const auto& s : scores) {
        auto [it, inserted] = joined.try_emplace(s.image_id);
        if (inserted) order.push_back(s.image_id);
        auto& slot = s.source_model == ScoreModel::Global ? it->second.first : it->second.second;
        if (slot) fail(ErrorKind::Validation, "duplicate score for image " + s.image_id);
        slot = s.score;
    }
    std::vector<DualScore> out;
    for (const auto& id : order) {
        const auto& [g, s] = joined[id];
        if (!g || !s) fail(ErrorKind::Validation, "image " + id + " lacks one of the two model scores");
        out.push_back({id, *g, *s});
    }
    return out;
}

std::vector<DualScore> parse_dual_scores(std::string_view text) {
    auto lines = text_io::split(text, '\n');
    if (lines.empty() || text_io::trim(lines[0]) != "image_id,global,sweden") {
        fail(ErrorKind::Parse, "score file must start with header image_id,global,sweden");
    }
    std::vector<DualScore> out;
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        const auto line = text_io::trim(lines[ln]);
        if (line.empty()) continue;
        const auto fields = text_io::split(line, ',');
        const auto where = fmt::format("score file line {}", ln + 1);
        if (fields.size() != 3) fail(ErrorKind::Parse, where + ": expected 3 fields");
        out.push_back({fields[0], parse_double(fields[1], where), parse_double(fields[2], where)});
    }
    return out;
}

Strata percentile_strata(std::span<const DualScore> scores) {
    const std::size_t n = scores.size();
    std::vector<double> global;
    std::vector<double> sweden;
    for (const auto& s : scores) {
        global.push_back(s.global);
        sweden.push_back(s.sweden);
    }
    std::sort(global.begin(), global.end());
    std::sort(sweden.begin(), sweden.end());

    struct Interval {
        std::size_t below;     // #(s < x)
        std::size_t at_most;   // #(s <= x)
    };
    auto interval = [](const std::vector<double>& sorted, double x) {
        return Interval{
            static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), x) - sorted.begin()),
            static_cast<std::size_t>(std::upper_bound(sorted.begin(), sorted.end(), x) - sorted.begin())};
    };
    // Integer forms of below/n >= 0.8, at_most/n <= 0.2, and [0.4, 0.6] containment.
    auto high = [n](Interval v) { return 5 * v.below >= 4 * n; };
    auto low = [n](Interval v) { return 5 * v.at_most <= n; };
    auto medium = [n](Interval v) { return 5 * v.below >= 2 * n && 5 * v.at_most <= 3 * n; };

    Strata out;
    for (const auto& s : scores) {
        const auto g = interval(global, s.global);
        const auto w = interval(sweden, s.sweden);
        if (high(g) && high(w)) {
            out.high.push_back(s.image_id);
        } else if (low(g) && low(w)) {
            out.low.push_back(s.image_id);
        } else if (medium(g) && medium(w)) {
            out.medium.push_back(s.image_id);
        }
    }
    return out;
}

Strata stratify_by_score(std::span<const DualScore> scores, std::size_t per_stratum,
                         std::uint64_t seed) {
    std::set<std::string> seen;
    for (const auto& s : scores) {
        if (!seen.insert(s.image_id).second) {
            fail(ErrorKind::Validation, "duplicate image id " + s.image_id);
        }
        for (double v : {s.global, s.sweden}) {
            if (!(v >= 1.0 && v <= 9.0)) {
                fail(ErrorKind::Validation,
                     fmt::format("score {} for {} outside the 1-9 scale", v, s.image_id));
            }
        }
    }
    auto pools = percentile_strata(scores);
    auto draw = [&](const std::vector<std::string>& pool, std::string_view name) {
        if (pool.size() < per_stratum) {
            fail(ErrorKind::StratumUnderflow,
                 fmt::format("stratum '{}' has {} qualifying images, {} requested", name,
                             pool.size(), per_stratum));
        }
        std::vector<std::string> picked;
        auto rng = substream(seed, fmt::format("stratify/{}", name));
        std::sample(pool.begin(), pool.end(), std::back_inserter(picked), per_stratum, rng);
        return picked;
    };
    Strata out;
    out.high = draw(pools.high, "high");
    out.medium = draw(pools.medium, "medium");
    out.low = draw(pools.low, "low");
    return out;
}

}  // namespace streetgaze
