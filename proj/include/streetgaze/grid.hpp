#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "streetgaze/error.hpp"

namespace streetgaze {

/// Row-major 2-D raster. (x, y) = (column, row).
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(std::size_t width, std::size_t height, T fill = T{})
        : width_(width), height_(height), cells_(width * height, fill) {}
    Grid(std::size_t width, std::size_t height, std::vector<T> cells)
        : width_(width), height_(height), cells_(std::move(cells)) {
        if (cells_.size() != width_ * height_) {
            fail(ErrorKind::InvalidArgument, "grid cell count does not match dimensions");
        }
    }

    std::size_t width() const noexcept { return width_; }
    std::size_t height() const noexcept { return height_; }
    std::size_t size() const noexcept { return cells_.size(); }
    bool empty() const noexcept { return cells_.empty(); }

    T& operator()(std::size_t x, std::size_t y) { return cells_[y * width_ + x]; }
    const T& operator()(std::size_t x, std::size_t y) const { return cells_[y * width_ + x]; }

    std::span<T> cells() noexcept { return cells_; }
    std::span<const T> cells() const noexcept { return cells_; }

    bool same_shape(const Grid& other) const noexcept {
        return width_ == other.width_ && height_ == other.height_;
    }
    template <typename U>
    bool same_shape(const Grid<U>& other) const noexcept {
        return width_ == other.width() && height_ == other.height();
    }

    friend bool operator==(const Grid&, const Grid&) = default;

private:
    std::size_t width_ = 0;
    std::size_t height_ = 0;
    std::vector<T> cells_;
};

}  // namespace streetgaze
