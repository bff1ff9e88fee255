#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace attrgen {

// Invalid user-supplied configuration or type invariant violation.
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failure while producing synthetic data (e.g. an attribute whose phenomenon
// mix cannot be realized).
class GenerationError : public std::runtime_error {
public:
  explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// FNV-1a over raw bytes. Used for manifest digests, not security.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

std::string hex64(std::uint64_t v);

// Digest of a file's bytes as a 16-char hex string. Throws IoError if the
// file cannot be read.
std::string digest_file(const std::filesystem::path& path);
std::string digest_string(const std::string& s);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& content);

// Shortest round-trip decimal form of a double, locale independent.
std::string format_double(double v);

}  // namespace attrgen
