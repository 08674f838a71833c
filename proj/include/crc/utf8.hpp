#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace crc::utf8 {

// Byte offset of the first invalid sequence, or nullopt when the whole input
// is well-formed UTF-8 (overlongs and surrogates count as invalid).
std::optional<std::size_t> find_invalid(std::string_view text);

inline bool is_valid(std::string_view text) { return !find_invalid(text); }

// Decodes well-formed input; invalid bytes decode to U+FFFD.
std::vector<char32_t> decode(std::string_view text);

void append(std::string& out, char32_t cp);
std::string encode(const std::vector<char32_t>& cps);

// Number of code points.
std::size_t length(std::string_view text);

}  // namespace crc::utf8
