#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include "streetgaze/grid.hpp"

namespace streetgaze::png {

using Rgb = std::array<std::uint8_t, 3>;

void write_gray8(const std::filesystem::path& path, const Grid<std::uint8_t>& image);
void write_gray16(const std::filesystem::path& path, const Grid<std::uint16_t>& image);
void write_rgb8(const std::filesystem::path& path, const Grid<Rgb>& image);

// Readers reject anything that is not single-channel at the expected depth.
Grid<std::uint8_t> read_gray8(const std::filesystem::path& path);
Grid<std::uint16_t> read_gray16(const std::filesystem::path& path);

}  // namespace streetgaze::png
