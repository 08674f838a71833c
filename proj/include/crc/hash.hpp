#pragma once

#include <string>
#include <string_view>

namespace crc {

// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

// Digest of a file's bytes; throws IoError when unreadable.
std::string sha256_file(const std::string& path);

}  // namespace crc
