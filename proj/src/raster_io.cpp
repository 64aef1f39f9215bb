#include "mimo/raster_io.hpp"
#include "mimo/error.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <string>

namespace mimo::io {

namespace fs = std::filesystem;

namespace {

template <typename T>
std::vector<std::byte> to_le_bytes(std::span<const T> values) {
  static_assert(sizeof(T) == 4);
  std::vector<std::byte> bytes(values.size() * 4);
  std::memcpy(bytes.data(), values.data(), bytes.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += 4) {
      std::swap(bytes[i], bytes[i + 3]);
      std::swap(bytes[i + 1], bytes[i + 2]);
    }
  }
  return bytes;
}

template <typename T>
std::vector<T> from_le_bytes(std::vector<std::byte> bytes) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += 4) {
      std::swap(bytes[i], bytes[i + 3]);
      std::swap(bytes[i + 1], bytes[i + 2]);
    }
  }
  std::vector<T> out(bytes.size() / 4);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

std::uint32_t write_blob(const fs::path& path, const std::vector<std::byte>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
  return crc32(bytes);
}

std::vector<std::byte> read_checked(const fs::path& path, std::size_t count,
                                    std::optional<std::uint32_t> expected_crc) {
  if (!fs::exists(path)) throw IoError("missing file: " + path.string());
  auto bytes = read_bytes(path);
  if (bytes.size() != count * 4)
    throw IoError("size mismatch in " + path.string() + ": expected " + std::to_string(count * 4) +
                  " bytes, found " + std::to_string(bytes.size()));
  if (expected_crc && crc32(bytes) != *expected_crc)
    throw IoError("checksum mismatch in " + path.string());
  return bytes;
}

}  // namespace

std::uint32_t crc32(std::span<const std::byte> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + offset),
                  static_cast<uInt>(chunk));
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t crc32_of(std::span<const float> values) { return crc32(to_le_bytes(values)); }

std::uint32_t write_f32(const fs::path& path, std::span<const float> values) {
  return write_blob(path, to_le_bytes(values));
}

std::uint32_t write_i32(const fs::path& path, std::span<const std::int32_t> values) {
  return write_blob(path, to_le_bytes(values));
}

std::vector<float> read_f32(const fs::path& path, std::size_t count,
                            std::optional<std::uint32_t> expected_crc) {
  return from_le_bytes<float>(read_checked(path, count, expected_crc));
}

std::vector<std::int32_t> read_i32(const fs::path& path, std::size_t count,
                                   std::optional<std::uint32_t> expected_crc) {
  return from_le_bytes<std::int32_t>(read_checked(path, count, expected_crc));
}

std::vector<std::byte> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace mimo::io
