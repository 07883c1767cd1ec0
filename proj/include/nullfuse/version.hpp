#pragma once

#include <string_view>

namespace nullfuse {

inline constexpr std::string_view kToolName = "nullfuse";
inline constexpr std::string_view kVersion = "0.1.0";

}  // namespace nullfuse
