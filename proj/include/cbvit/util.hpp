#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cbvit {

// FNV-1a 64-bit; used for artifact checksums in run manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0);
  std::vector<char> bytes(static_cast<std::size_t>(size));
  in.read(bytes.data(), size);
  if (!in) throw std::runtime_error("failed reading " + path.string());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, const void* data, std::size_t len) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, text.data(), text.size());
}

inline std::string file_checksum(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return to_hex(fnv1a64(bytes.data(), bytes.size()));
}

// Shortest-round-trip decimal formatting, locale independent; keeps CSV output
// byte-identical across runs.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace cbvit
