#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string_view>

namespace streetgaze {

inline constexpr std::size_t kNumClasses = 150;
inline constexpr std::string_view kClassTableVersion = "ade20k_classes_v1";

std::string_view class_name(std::size_t index);
std::span<const std::string_view, kNumClasses> class_names();

}  // namespace streetgaze
