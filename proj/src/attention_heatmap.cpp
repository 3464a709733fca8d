#include "streetgaze/attention_heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "json.hpp"
#include "streetgaze/error.hpp"
#include "streetgaze/text_io.hpp"

namespace streetgaze {

double default_sigma_px(const ScreenGeometry& geom) {
    geom.validate();
    return geom.degrees_to_pixels(0.5);
}

AttentionAccumulator accumulate(std::span<const FixationEvent> fixations, std::size_t width,
                                std::size_t height, double sigma) {
    if (width == 0 || height == 0) fail(ErrorKind::InvalidArgument, "heatmap must be non-empty");
    if (!(sigma > 0.0)) fail(ErrorKind::InvalidArgument, "sigma must be positive");

    AttentionAccumulator acc{Grid<double>(width, height, 0.0)};
    const double radius = 3.0 * sigma;
    const double norm = 1.0 / (2.0 * std::numbers::pi * sigma * sigma);
    const double inv_two_var = 1.0 / (2.0 * sigma * sigma);
    std::vector<double> wx;
    std::vector<double> wy;

    for (const auto& f : fixations) {
        const auto lo = [](double v) { return static_cast<long>(std::ceil(v)); };
        const auto hi = [](double v) { return static_cast<long>(std::floor(v)); };
        const long x0 = std::max(0L, lo(f.cx - radius - 0.5));
        const long x1 = std::min(static_cast<long>(width) - 1, hi(f.cx + radius - 0.5));
        const long y0 = std::max(0L, lo(f.cy - radius - 0.5));
        const long y1 = std::min(static_cast<long>(height) - 1, hi(f.cy + radius - 0.5));
        if (x0 > x1 || y0 > y1) continue;

        wx.assign(static_cast<std::size_t>(x1 - x0 + 1), 0.0);
        wy.assign(static_cast<std::size_t>(y1 - y0 + 1), 0.0);
        for (long x = x0; x <= x1; ++x) {
            const double d = static_cast<double>(x) + 0.5 - f.cx;
            wx[static_cast<std::size_t>(x - x0)] = std::exp(-d * d * inv_two_var);
        }
        for (long y = y0; y <= y1; ++y) {
            const double d = static_cast<double>(y) + 0.5 - f.cy;
            wy[static_cast<std::size_t>(y - y0)] = std::exp(-d * d * inv_two_var);
        }
        const double mass = static_cast<double>(f.duration_ms) * norm;
        for (long y = y0; y <= y1; ++y) {
            const double row = mass * wy[static_cast<std::size_t>(y - y0)];
            for (long x = x0; x <= x1; ++x) {
                acc.cells(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) +=
                    row * wx[static_cast<std::size_t>(x - x0)];
            }
        }
    }
    return acc;
}

AttentionHeatmap cdf_normalize(const AttentionAccumulator& acc) {
    if (acc.cells.empty()) fail(ErrorKind::InvalidArgument, "accumulator has no cells");
    const auto raw = acc.cells.cells();
    std::vector<double> sorted(raw.begin(), raw.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());

    AttentionHeatmap out{Grid<double>(acc.cells.width(), acc.cells.height(), 0.0)};
    auto dst = out.cells.cells();
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const auto rank = std::upper_bound(sorted.begin(), sorted.end(), raw[i]) - sorted.begin();
        dst[i] = static_cast<double>(rank) / n;
    }
    return out;
}

HueMap hue_encode(const AttentionHeatmap& heatmap) {
    HueMap out{Grid<double>(heatmap.cells.width(), heatmap.cells.height(), 0.0)};
    auto src = heatmap.cells.cells();
    auto dst = out.cells.cells();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = std::clamp(kMaxHue * (1.0 - src[i]), 0.0, kMaxHue);
    }
    return out;
}

AttentionHeatmap aggregate_participants(std::span<const AttentionHeatmap> heatmaps) {
    if (heatmaps.empty()) fail(ErrorKind::InvalidArgument, "no heatmaps to aggregate");
    const auto& first = heatmaps.front().cells;
    AttentionAccumulator mean{Grid<double>(first.width(), first.height(), 0.0)};
    for (const auto& h : heatmaps) {
        if (!h.cells.same_shape(first)) {
            fail(ErrorKind::InvalidArgument, "heatmap dimensions differ across participants");
        }
        auto src = h.cells.cells();
        auto dst = mean.cells.cells();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    }
    const double n = static_cast<double>(heatmaps.size());
    for (auto& v : mean.cells.cells()) v /= n;
    return cdf_normalize(mean);
}

std::filesystem::path metadata_path_for(const std::filesystem::path& png_path) {
    auto p = png_path;
    p += ".json";
    return p;
}

void write_heatmap_png(const std::filesystem::path& png_path, const AttentionHeatmap& heatmap,
                       const HeatmapMetadata& meta) {
    Grid<std::uint16_t> encoded(heatmap.cells.width(), heatmap.cells.height(), 0);
    auto src = heatmap.cells.cells();
    auto dst = encoded.cells();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = static_cast<std::uint16_t>(std::lround(std::clamp(src[i], 0.0, 1.0) * 65535.0));
    }
    png::write_gray16(png_path, encoded);

    nlohmann::ordered_json j;
    j["image_id"] = meta.image_id;
    j["width"] = heatmap.cells.width();
    j["height"] = heatmap.cells.height();
    j["participants"] = meta.participants;
    j["sigma_px"] = meta.sigma_px;
    text_io::write_file_atomic(metadata_path_for(png_path), j.dump(2) + "\n");
}

AttentionHeatmap read_heatmap_png(const std::filesystem::path& png_path) {
    const auto encoded = png::read_gray16(png_path);
    AttentionHeatmap out{Grid<double>(encoded.width(), encoded.height(), 0.0)};
    auto src = encoded.cells();
    auto dst = out.cells.cells();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(src[i]) / 65535.0;
    return out;
}

HeatmapMetadata read_heatmap_metadata(const std::filesystem::path& png_path) {
    const auto text = text_io::read_file(metadata_path_for(png_path));
    try {
        const auto j = nlohmann::json::parse(text);
        HeatmapMetadata m;
        m.image_id = j.at("image_id").get<std::string>();
        m.width = j.at("width").get<std::size_t>();
        m.height = j.at("height").get<std::size_t>();
        m.participants = j.at("participants").get<std::size_t>();
        m.sigma_px = j.at("sigma_px").get<double>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, "heatmap metadata " + png_path.string() + ": " + e.what());
    }
}

png::Rgb hue_to_rgb(double hue) {
    const double h = std::clamp(hue, 0.0, kMaxHue) / kMaxHue * 240.0 / 60.0;
    const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
    double r = 0.0;
    double g = 0.0;
    double b = 0.0;
    switch (static_cast<int>(h)) {
        case 0: r = 1.0; g = x; break;
        case 1: r = x; g = 1.0; break;
        case 2: g = 1.0; b = x; break;
        default: g = x; b = 1.0; break;  // sector 3, and h == 4 exactly
    }
    auto to8 = [](double v) { return static_cast<std::uint8_t>(std::lround(v * 255.0)); };
    return {to8(r), to8(g), to8(b)};
}

void write_hue_visualization(const std::filesystem::path& png_path, const HueMap& hue) {
    Grid<png::Rgb> rgb(hue.cells.width(), hue.cells.height(), png::Rgb{0, 0, 0});
    auto src = hue.cells.cells();
    auto dst = rgb.cells();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = hue_to_rgb(src[i]);
    png::write_rgb8(png_path, rgb);
}

}  // namespace streetgaze
