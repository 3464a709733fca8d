#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "streetgaze/ade20k_classes.hpp"
#include "streetgaze/attention_heatmap.hpp"
#include "streetgaze/grid.hpp"

namespace streetgaze {

inline constexpr std::uint8_t kUnlabeled = 255;

/// Per-pixel class index in [0, 150) or kUnlabeled.
struct SegmentationMap {
    Grid<std::uint8_t> labels;

    /// Throws Validation on an out-of-taxonomy label or an empty map.
    void validate() const;
};

SegmentationMap read_segmentation_png(const std::filesystem::path& path);
void write_segmentation_png(const std::filesystem::path& path, const SegmentationMap& seg);

enum class MetricKind { MoR, MoRH, MoHAdjusted };
std::string_view to_string(MetricKind kind);
MetricKind metric_kind_from_string(std::string_view text);

struct ObjectVector {
    MetricKind kind = MetricKind::MoR;
    std::array<std::optional<double>, kNumClasses> values{};
    std::optional<double> threshold;  // hue units, MoRH only

    double value_or_zero(std::size_t o) const { return values[o].value_or(0.0); }
};

/// R_o = #{label == o} / (h * w). Every class gets a value; absent classes are 0.
ObjectVector mor(const SegmentationMap& seg);

/// RH_(t,o) = #{label == o and hue <= t} / #{hue <= t}. Classes with no pixel in
/// the highlighted region are missing.
ObjectVector morh(const SegmentationMap& seg, const HueMap& hue, double t);

/// 150 - mean hue over the pixels of each present class; absent classes missing.
ObjectVector moh(const SegmentationMap& seg, const HueMap& hue);

/// Per-class mean over the entries that are present.
ObjectVector mean_over_images(std::span<const ObjectVector> vectors);

struct RankedObject {
    std::size_t index = 0;
    std::string_view name;
    double value = 0.0;
};

/// Descending by value, missing entries skipped, ties by ascending class index.
std::vector<RankedObject> top_k(const ObjectVector& vector, std::size_t k);

struct MetricRow {
    std::string image_id;
    ObjectVector vector;
};

/// CSV: image_id,kind,t followed by one column per class; missing is an empty field.
std::string serialize_metric_table(std::span<const MetricRow> rows);
std::vector<MetricRow> parse_metric_table(std::string_view text);

// ---- pairwise comparisons -------------------------------------------------

enum class Side { Left, Right };
std::string_view to_string(Side side);
Side side_from_string(std::string_view text);

struct ComparisonRecord {
    std::string pair_id;
    std::string left_image;
    std::string right_image;
    Side chosen = Side::Left;
    std::string session_id;
    std::int64_t t_ms = 0;

    const std::string& winner() const { return chosen == Side::Left ? left_image : right_image; }
    const std::string& loser() const { return chosen == Side::Left ? right_image : left_image; }
    friend bool operator==(const ComparisonRecord&, const ComparisonRecord&) = default;
};

std::string serialize_comparison(const ComparisonRecord& record);
std::string serialize_comparison_log(std::span<const ComparisonRecord> records);
std::vector<ComparisonRecord> parse_comparison_log(std::istream& in);
std::vector<ComparisonRecord> parse_comparison_log_file(const std::filesystem::path& path);

enum class Group { Safe, Unsafe, Ambiguous };
std::string_view to_string(Group group);
Group group_from_string(std::string_view text);

struct GroupLabel {
    std::string image_id;
    Group group = Group::Ambiguous;
    std::size_t wins = 0;
    std::size_t losses = 0;

    friend bool operator==(const GroupLabel&, const GroupLabel&) = default;
};

/// safe: wins >= threshold and losses < threshold; unsafe: the mirror; every
/// other exposed image is ambiguous. Output sorted by image_id.
std::vector<GroupLabel> group_images(std::span<const ComparisonRecord> records,
                                     std::size_t threshold = 3);

std::string serialize_groups(std::span<const GroupLabel> labels);
std::vector<GroupLabel> parse_groups(std::string_view text);

// ---- score stratification -------------------------------------------------

enum class ScoreModel { Global, Sweden };

struct SafetyScore {
    std::string image_id;
    double score = 0.0;  // 1..9
    ScoreModel source_model = ScoreModel::Global;
};

struct DualScore {
    std::string image_id;
    double global = 0.0;
    double sweden = 0.0;
};

/// Joins per-model scores by image id; an image lacking either score is an error.
std::vector<DualScore> pair_scores(std::span<const SafetyScore> scores);

/// CSV with header image_id,global,sweden.
std::vector<DualScore> parse_dual_scores(std::string_view text);

struct Strata {
    std::vector<std::string> high;
    std::vector<std::string> medium;
    std::vector<std::string> low;
};

/// Percentile membership only (no sampling, no range check). An image's
/// percentile interval under one model is [#(s < x) / n, #(s <= x) / n];
/// high needs the interval inside [0.8, 1] for both models, low inside
/// [0, 0.2], medium inside [0.4, 0.6]. Members are listed in input order.
Strata percentile_strata(std::span<const DualScore> scores);

/// Seeded uniform sample of per_stratum images from each percentile stratum.
/// Throws StratumUnderflow naming the first stratum that is too small.
Strata stratify_by_score(std::span<const DualScore> scores, std::size_t per_stratum,
                         std::uint64_t seed);

}  // namespace streetgaze
