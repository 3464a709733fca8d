#include "streetgaze/similarity.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"
#include "streetgaze/error.hpp"
#include "streetgaze/text_io.hpp"

namespace streetgaze {
namespace {

constexpr std::string_view kLpipsSchema = "lpips_scores";

BoldSet pick_two(std::vector<std::pair<XaiMethod, double>> column, bool ascending) {
    // Method enum order is alphabetical, which is the tie-break order.
    std::sort(column.begin(), column.end(), [ascending](const auto& a, const auto& b) {
        if (a.second != b.second) return ascending ? a.second < b.second : a.second > b.second;
        return a.first < b.first;
    });
    BoldSet out;
    for (std::size_t i = 0; i < std::min<std::size_t>(2, column.size()); ++i) {
        out.members.push_back(column[i].first);
    }
    out.tied = column.size() > 2 && column[1].second == column[2].second;
    return out;
}

bool contains(const BoldSet& set, XaiMethod m) {
    return std::find(set.members.begin(), set.members.end(), m) != set.members.end();
}

}  // namespace

std::string_view to_string(XaiMethod method) {
    switch (method) {
        case XaiMethod::AblationCAM: return "AblationCAM";
        case XaiMethod::EigenCAM: return "EigenCAM";
        case XaiMethod::GradCAM: return "GradCAM";
        case XaiMethod::GradCAMPlusPlus: return "GradCAMPlusPlus";
        case XaiMethod::HiResCAM: return "HiResCAM";
        case XaiMethod::ScoreCAM: return "ScoreCAM";
        case XaiMethod::XGradCAM: return "XGradCAM";
    }
    return "?";
}

XaiMethod xai_method_from_string(std::string_view text) {
    for (auto m : kAllMethods) {
        if (to_string(m) == text) return m;
    }
    fail(ErrorKind::Parse, fmt::format("unknown XAI method '{}'", text));
}

double l2_rms(const HueMap& a, const HueMap& b) {
    if (!a.cells.same_shape(b.cells)) {
        fail(ErrorKind::InvalidArgument,
             fmt::format("heatmap dimensions differ: {}x{} vs {}x{}", a.cells.width(),
                         a.cells.height(), b.cells.width(), b.cells.height()));
    }
    if (a.cells.empty()) fail(ErrorKind::InvalidArgument, "heatmaps are empty");
    auto pa = a.cells.cells();
    auto pb = b.cells.cells();
    double sum = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const double d = (pa[i] - pb[i]) / kMaxHue;
        sum += d * d;
    }
    return std::sqrt(sum / static_cast<double>(pa.size()));
}

CosineScore cosine_element(const ObjectVector& human, const ObjectVector& machine) {
    if (human.kind != machine.kind) {
        fail(ErrorKind::InvalidArgument, "cosine needs two vectors of the same metric kind");
    }
    double dot = 0.0;
    double nh = 0.0;
    double nm = 0.0;
    for (std::size_t o = 0; o < kNumClasses; ++o) {
        const double u = human.value_or_zero(o);
        const double v = machine.value_or_zero(o);
        dot += u * v;
        nh += u * u;
        nm += v * v;
    }
    if (nh == 0.0 || nm == 0.0) return {0.0, true};
    return {std::clamp(dot / (std::sqrt(nh) * std::sqrt(nm)), -1.0, 1.0), false};
}

LpipsTable parse_lpips(std::string_view text, std::optional<std::vector<std::string>> expected_images) {
    LpipsTable table;
    std::set<std::string> images;
    const auto lines = text_io::split(text, '\n');
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
        const auto body = text_io::trim(lines[ln]);
        if (body.empty()) continue;
        if (ln == 0 && text_io::is_schema_header(body, kLpipsSchema)) continue;
        std::string image;
        XaiMethod method{};
        double score = 0.0;
        try {
            const auto j = nlohmann::json::parse(body);
            image = j.at("image_id").get<std::string>();
            method = xai_method_from_string(j.at("method").get<std::string>());
            const auto& v = j.at("lpips");
            if (!v.is_number()) throw std::runtime_error("lpips must be a number");
            score = v.get<double>();
        } catch (const Error&) {
            throw;
        } catch (const std::exception& e) {
            fail(ErrorKind::Parse, fmt::format("LPIPS file line {}: {}", ln + 1, e.what()));
        }
        if (!(score >= 0.0 && score <= 1.0)) {
            fail(ErrorKind::Validation,
                 fmt::format("LPIPS file line {}: score {} outside [0, 1]", ln + 1, score));
        }
        if (!table.scores.emplace(std::pair{image, method}, score).second) {
            fail(ErrorKind::Parse, fmt::format("LPIPS file line {}: duplicate ({}, {})", ln + 1,
                                               image, to_string(method)));
        }
        images.insert(image);
    }
    if (expected_images) images.insert(expected_images->begin(), expected_images->end());
    for (const auto& image : images) {
        for (auto m : kAllMethods) {
            if (!table.scores.contains({image, m})) table.missing.emplace_back(image, m);
        }
    }
    return table;
}

LpipsTable ingest_lpips(const std::filesystem::path& path,
                        std::optional<std::vector<std::string>> expected_images) {
    return parse_lpips(text_io::read_file(path), std::move(expected_images));
}

std::string serialize_lpips(const LpipsTable& table) {
    std::string out = text_io::schema_header(kLpipsSchema);
    out += '\n';
    for (const auto& [key, score] : table.scores) {
        nlohmann::ordered_json j;
        j["image_id"] = key.first;
        j["method"] = std::string(to_string(key.second));
        j["lpips"] = score;
        out += j.dump();
        out += '\n';
    }
    return out;
}

SimilarityReport rank_methods(std::span<const ImageScores> scores) {
    SimilarityReport report;
    report.per_image.assign(scores.begin(), scores.end());
    std::sort(report.per_image.begin(), report.per_image.end(),
              [](const ImageScores& a, const ImageScores& b) { return a.image_id < b.image_id; });

    bool complete_row = false;
    for (std::size_t i = 0; i < report.per_image.size(); ++i) {
        auto& img = report.per_image[i];
        if (i > 0 && report.per_image[i - 1].image_id == img.image_id) {
            fail(ErrorKind::InvalidArgument, "duplicate image in similarity scores: " + img.image_id);
        }
        std::sort(img.methods.begin(), img.methods.end(),
                  [](const MethodScore& a, const MethodScore& b) { return a.method < b.method; });
        const auto dup = std::adjacent_find(
            img.methods.begin(), img.methods.end(),
            [](const MethodScore& a, const MethodScore& b) { return a.method == b.method; });
        if (dup != img.methods.end()) {
            fail(ErrorKind::InvalidArgument, "duplicate method score for image " + img.image_id);
        }
        complete_row = complete_row || img.methods.size() == kAllMethods.size();
    }
    if (!complete_row) {
        fail(ErrorKind::InsufficientData, "no image has scores for all seven XAI methods");
    }

    struct Acc {
        double l2 = 0.0;
        double cosine = 0.0;
        std::size_t n = 0;
        double lpips = 0.0;
        std::size_t n_lpips = 0;
    };
    std::array<Acc, kAllMethods.size()> acc{};
    for (const auto& img : report.per_image) {
        for (const auto& m : img.methods) {
            auto& a = acc[static_cast<std::size_t>(m.method)];
            a.l2 += m.l2;
            a.cosine += m.cosine;
            ++a.n;
            if (m.lpips) {
                a.lpips += *m.lpips;
                ++a.n_lpips;
            }
        }
    }

    std::vector<std::pair<XaiMethod, double>> l2_col;
    std::vector<std::pair<XaiMethod, double>> lpips_col;
    std::vector<std::pair<XaiMethod, double>> cos_col;
    for (auto method : kAllMethods) {
        const auto& a = acc[static_cast<std::size_t>(method)];
        if (a.n == 0) continue;
        MethodScore mean;
        mean.method = method;
        mean.l2 = a.l2 / static_cast<double>(a.n);
        mean.cosine = a.cosine / static_cast<double>(a.n);
        if (a.n_lpips > 0) {
            mean.lpips = a.lpips / static_cast<double>(a.n_lpips);
            lpips_col.emplace_back(method, *mean.lpips);
        }
        l2_col.emplace_back(method, mean.l2);
        cos_col.emplace_back(method, mean.cosine);
        report.means.push_back(mean);
    }
    report.bold_l2 = pick_two(std::move(l2_col), true);
    report.has_lpips = !lpips_col.empty();
    if (report.has_lpips) report.bold_lpips = pick_two(std::move(lpips_col), true);
    report.bold_cosine = pick_two(std::move(cos_col), false);
    return report;
}

std::string render_similarity_table(const SimilarityReport& report) {
    auto cell = [](double v, bool bold) {
        const auto s = fmt::format("{:.4f}", v);
        return bold ? "**" + s + "**" : s;
    };
    std::string out = "| Model Name | Loss | LPIPS Score | Cosine Similarity |\n";
    out += "|---|---|---|---|\n";
    for (const auto& m : report.means) {
        out += fmt::format("| {} | {} | {} | {} |\n", to_string(m.method),
                           cell(m.l2, contains(report.bold_l2, m.method)),
                           m.lpips ? cell(*m.lpips, contains(report.bold_lpips, m.method)) : "",
                           cell(m.cosine, contains(report.bold_cosine, m.method)));
    }
    std::vector<std::string> ties;
    if (report.bold_l2.tied) ties.emplace_back("Loss");
    if (report.bold_lpips.tied) ties.emplace_back("LPIPS Score");
    if (report.bold_cosine.tied) ties.emplace_back("Cosine Similarity");
    if (!ties.empty()) {
        out += fmt::format("\nTop-2 cut decided by method-name order in: {}\n", fmt::join(ties, ", "));
    }
    return out;
}

std::string similarity_report_json(const SimilarityReport& report) {
    auto bold = [](const BoldSet& set) {
        nlohmann::ordered_json j;
        auto members = nlohmann::ordered_json::array();
        for (auto m : set.members) members.push_back(std::string(to_string(m)));
        j["members"] = members;
        j["tied"] = set.tied;
        return j;
    };
    auto score = [](const MethodScore& m) {
        nlohmann::ordered_json j;
        j["method"] = std::string(to_string(m.method));
        j["l2"] = m.l2;
        j["lpips"] = m.lpips ? nlohmann::ordered_json(*m.lpips) : nlohmann::ordered_json();
        j["cosine"] = m.cosine;
        return j;
    };
    nlohmann::ordered_json j;
    j["means"] = nlohmann::ordered_json::array();
    for (const auto& m : report.means) j["means"].push_back(score(m));
    j["bold"]["loss"] = bold(report.bold_l2);
    j["bold"]["lpips"] = report.has_lpips ? bold(report.bold_lpips) : nlohmann::ordered_json();
    j["bold"]["cosine"] = bold(report.bold_cosine);
    j["per_image"] = nlohmann::ordered_json::array();
    for (const auto& img : report.per_image) {
        nlohmann::ordered_json row;
        row["image_id"] = img.image_id;
        row["methods"] = nlohmann::ordered_json::array();
        for (const auto& m : img.methods) row["methods"].push_back(score(m));
        j["per_image"].push_back(row);
    }
    return j.dump(2) + "\n";
}

SimilarityReport parse_similarity_report_json(std::string_view text) {
    try {
        const auto j = nlohmann::json::parse(text);
        auto score = [](const nlohmann::json& m) {
            MethodScore s;
            s.method = xai_method_from_string(m.at("method").get<std::string>());
            s.l2 = m.at("l2").get<double>();
            if (!m.at("lpips").is_null()) s.lpips = m.at("lpips").get<double>();
            s.cosine = m.at("cosine").get<double>();
            return s;
        };
        auto bold = [](const nlohmann::json& b) {
            BoldSet set;
            for (const auto& m : b.at("members")) set.members.push_back(xai_method_from_string(m.get<std::string>()));
            set.tied = b.at("tied").get<bool>();
            return set;
        };
        SimilarityReport r;
        for (const auto& m : j.at("means")) r.means.push_back(score(m));
        r.bold_l2 = bold(j.at("bold").at("loss"));
        r.has_lpips = !j.at("bold").at("lpips").is_null();
        if (r.has_lpips) r.bold_lpips = bold(j.at("bold").at("lpips"));
        r.bold_cosine = bold(j.at("bold").at("cosine"));
        for (const auto& row : j.at("per_image")) {
            ImageScores img{row.at("image_id").get<std::string>(), {}};
            for (const auto& m : row.at("methods")) img.methods.push_back(score(m));
            r.per_image.push_back(std::move(img));
        }
        return r;
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        fail(ErrorKind::Parse, std::string("similarity report: ") + e.what());
    }
}

}  // namespace streetgaze
