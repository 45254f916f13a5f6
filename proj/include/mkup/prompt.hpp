#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace mkup {

// Closed prompt vocabulary. Prompts name the made-up region(s) of a face.
enum class Prompt { no_makeup, full_makeup, eye_makeup, lip_makeup, face_makeup };

inline constexpr std::array<std::string_view, 5> kPromptStrings = {
    "no makeup", "full makeup", "eye makeup", "lip makeup", "face makeup"};

inline std::string_view to_string(Prompt p) { return kPromptStrings[static_cast<std::size_t>(p)]; }

inline std::optional<Prompt> parse_prompt(std::string_view s) {
  for (std::size_t i = 0; i < kPromptStrings.size(); ++i)
    if (kPromptStrings[i] == s) return static_cast<Prompt>(i);
  return std::nullopt;
}

}  // namespace mkup
