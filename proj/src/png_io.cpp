#include "streetgaze/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

namespace streetgaze::png {
namespace {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) fail(ErrorKind::Io, "cannot open " + path.string());
    return f;
}

[[noreturn]] void on_png_error(png_structp, png_const_charp msg) {
    throw Error(ErrorKind::Io, std::string("libpng: ") + msg);
}

void on_png_warning(png_structp, png_const_charp) {}

void write_rows(const std::filesystem::path& path, std::size_t width, std::size_t height,
                int bit_depth, int color_type, const std::vector<png_bytep>& rows) {
    if (width == 0 || height == 0) fail(ErrorKind::InvalidArgument, "cannot write an empty PNG");
    auto file = open_file(path, "wb");
    png_structp png_ptr = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error,
                                                  on_png_warning);
    if (!png_ptr) fail(ErrorKind::Io, "png_create_write_struct failed");
    png_infop info_ptr = png_create_info_struct(png_ptr);
    try {
        if (!info_ptr) fail(ErrorKind::Io, "png_create_info_struct failed");
        png_init_io(png_ptr, file.get());
        png_set_IHDR(png_ptr, info_ptr, static_cast<png_uint_32>(width),
                     static_cast<png_uint_32>(height), bit_depth, color_type, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png_ptr, info_ptr);
        // PNG stores 16-bit samples big-endian.
        if (bit_depth == 16) png_set_swap(png_ptr);
        png_write_image(png_ptr, const_cast<png_bytepp>(rows.data()));
        png_write_end(png_ptr, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png_ptr, &info_ptr);
        throw;
    }
    png_destroy_write_struct(&png_ptr, &info_ptr);
    if (std::fflush(file.get()) != 0) fail(ErrorKind::Io, "cannot flush " + path.string());
}

struct Decoded {
    std::size_t width = 0;
    std::size_t height = 0;
    int bit_depth = 0;
    int color_type = 0;
    std::vector<std::uint8_t> bytes;
};

Decoded decode(const std::filesystem::path& path) {
    auto file = open_file(path, "rb");
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        fail(ErrorKind::Parse, path.string() + ": not a PNG file");
    }
    png_structp png_ptr =
        png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
    if (!png_ptr) fail(ErrorKind::Io, "png_create_read_struct failed");
    png_infop info_ptr = png_create_info_struct(png_ptr);
    Decoded out;
    try {
        if (!info_ptr) fail(ErrorKind::Io, "png_create_info_struct failed");
        png_init_io(png_ptr, file.get());
        png_set_sig_bytes(png_ptr, 8);
        png_read_info(png_ptr, info_ptr);
        out.width = png_get_image_width(png_ptr, info_ptr);
        out.height = png_get_image_height(png_ptr, info_ptr);
        out.bit_depth = png_get_bit_depth(png_ptr, info_ptr);
        out.color_type = png_get_color_type(png_ptr, info_ptr);
        if (out.bit_depth == 16) png_set_swap(png_ptr);
        png_read_update_info(png_ptr, info_ptr);
        const std::size_t stride = png_get_rowbytes(png_ptr, info_ptr);
        out.bytes.resize(stride * out.height);
        std::vector<png_bytep> rows(out.height);
        for (std::size_t y = 0; y < out.height; ++y) rows[y] = out.bytes.data() + y * stride;
        png_read_image(png_ptr, rows.data());
        png_read_end(png_ptr, nullptr);
    } catch (...) {
        png_destroy_read_struct(&png_ptr, &info_ptr, nullptr);
        throw;
    }
    png_destroy_read_struct(&png_ptr, &info_ptr, nullptr);
    return out;
}

}  // namespace

void write_gray8(const std::filesystem::path& path, const Grid<std::uint8_t>& image) {
    std::vector<std::uint8_t> buffer(image.cells().begin(), image.cells().end());
    std::vector<png_bytep> rows(image.height());
    for (std::size_t y = 0; y < image.height(); ++y) rows[y] = buffer.data() + y * image.width();
    write_rows(path, image.width(), image.height(), 8, PNG_COLOR_TYPE_GRAY, rows);
}

void write_gray16(const std::filesystem::path& path, const Grid<std::uint16_t>& image) {
    std::vector<std::uint16_t> buffer(image.cells().begin(), image.cells().end());
    std::vector<png_bytep> rows(image.height());
    for (std::size_t y = 0; y < image.height(); ++y) {
        rows[y] = reinterpret_cast<png_bytep>(buffer.data() + y * image.width());
    }
    write_rows(path, image.width(), image.height(), 16, PNG_COLOR_TYPE_GRAY, rows);
}

void write_rgb8(const std::filesystem::path& path, const Grid<Rgb>& image) {
    std::vector<std::uint8_t> buffer;
    buffer.reserve(image.size() * 3);
    for (const auto& px : image.cells()) buffer.insert(buffer.end(), px.begin(), px.end());
    std::vector<png_bytep> rows(image.height());
    for (std::size_t y = 0; y < image.height(); ++y) rows[y] = buffer.data() + y * image.width() * 3;
    write_rows(path, image.width(), image.height(), 8, PNG_COLOR_TYPE_RGB, rows);
}

Grid<std::uint8_t> read_gray8(const std::filesystem::path& path) {
    auto d = decode(path);
    if (d.color_type != PNG_COLOR_TYPE_GRAY || d.bit_depth != 8) {
        fail(ErrorKind::Validation, path.string() + ": expected 8-bit single-channel PNG");
    }
    return Grid<std::uint8_t>(d.width, d.height, std::move(d.bytes));
}

Grid<std::uint16_t> read_gray16(const std::filesystem::path& path) {
    auto d = decode(path);
    if (d.color_type != PNG_COLOR_TYPE_GRAY || d.bit_depth != 16) {
        fail(ErrorKind::Validation, path.string() + ": expected 16-bit single-channel PNG");
    }
    std::vector<std::uint16_t> cells(d.width * d.height);
    std::memcpy(cells.data(), d.bytes.data(), cells.size() * sizeof(std::uint16_t));
    return Grid<std::uint16_t>(d.width, d.height, std::move(cells));
}

}  // namespace streetgaze::png
