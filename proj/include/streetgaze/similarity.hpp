#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "streetgaze/attention_heatmap.hpp"
#include "streetgaze/segmentation_metrics.hpp"

namespace streetgaze {

enum class XaiMethod {
    AblationCAM,
    EigenCAM,
    GradCAM,
    GradCAMPlusPlus,
    HiResCAM,
    ScoreCAM,
    XGradCAM,
};

/// All seven methods, in method-name order (the tie-break order).
inline constexpr std::array<XaiMethod, 7> kAllMethods = {
    XaiMethod::AblationCAM, XaiMethod::EigenCAM, XaiMethod::GradCAM,  XaiMethod::GradCAMPlusPlus,
    XaiMethod::HiResCAM,    XaiMethod::ScoreCAM, XaiMethod::XGradCAM,
};

std::string_view to_string(XaiMethod method);
XaiMethod xai_method_from_string(std::string_view text);

struct HeatmapPair {
    HueMap human;
    HueMap machine;
    std::string image_id;
    XaiMethod method = XaiMethod::GradCAM;
};

/// Scene-level distance: RMS of the cellwise difference after scaling hue to
/// [0, 1] by /150. 0 means identical, 1 means opposite extremes everywhere.
double l2_rms(const HueMap& a, const HueMap& b);
inline double l2_rms(const HeatmapPair& pair) { return l2_rms(pair.human, pair.machine); }

struct CosineScore {
    double value = 0.0;
    bool degenerate = false;  // one side was the zero vector; value is 0
};

/// Element-level cosine over the 150-dim adjusted-MoH vectors, missing as 0.
CosineScore cosine_element(const ObjectVector& human, const ObjectVector& machine);

struct LpipsTable {
    std::map<std::pair<std::string, XaiMethod>, double> scores;
    /// (image, method) pairs expected but absent from the file.
    std::vector<std::pair<std::string, XaiMethod>> missing;
};

/// Line-delimited {image_id, method, lpips} records from the model sidecar.
/// Expected pairs are every image named in the file crossed with all seven
/// methods unless an explicit image list is supplied.
LpipsTable parse_lpips(std::string_view text,
                       std::optional<std::vector<std::string>> expected_images = std::nullopt);
LpipsTable ingest_lpips(const std::filesystem::path& path,
                        std::optional<std::vector<std::string>> expected_images = std::nullopt);
std::string serialize_lpips(const LpipsTable& table);

struct MethodScore {
    XaiMethod method = XaiMethod::GradCAM;
    double l2 = 0.0;
    std::optional<double> lpips;
    double cosine = 0.0;
};

struct ImageScores {
    std::string image_id;
    std::vector<MethodScore> methods;
};

struct BoldSet {
    std::vector<XaiMethod> members;  // exactly two when the column has data
    bool tied = false;               // the cut between 2nd and 3rd was a tie
};

struct SimilarityReport {
    std::vector<MethodScore> means;         // one per method seen, method-name order
    std::vector<ImageScores> per_image;     // sorted by image_id
    BoldSet bold_l2;
    BoldSet bold_lpips;                     // empty when no LPIPS data
    BoldSet bold_cosine;
    bool has_lpips = false;
};

/// Unweighted per-method means across images and the Table-1 style top-2 sets:
/// lowest loss, lowest LPIPS, highest cosine. Throws InsufficientData unless
/// at least one image scores all seven methods.
SimilarityReport rank_methods(std::span<const ImageScores> scores);

/// Model Name | Loss | LPIPS Score | Cosine Similarity, bold members in **.
std::string render_similarity_table(const SimilarityReport& report);
std::string similarity_report_json(const SimilarityReport& report);
/// Inverse of similarity_report_json.
SimilarityReport parse_similarity_report_json(std::string_view text);

}  // namespace streetgaze
