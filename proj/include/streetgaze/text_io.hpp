#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace streetgaze::text_io {

std::string read_file(const std::filesystem::path& path);

/// Writes through a temporary sibling and renames, so readers never see a torn file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::vector<std::string> split(std::string_view text, char sep);
std::string_view trim(std::string_view text);

/// Shortest representation that round-trips a double; empty for NaN.
std::string format_number(double value);

/// First line of every line-delimited exchange file: {"schema":"<name>","version":1}.
std::string schema_header(std::string_view schema);
bool is_schema_header(std::string_view line, std::string_view schema);

}  // namespace streetgaze::text_io
