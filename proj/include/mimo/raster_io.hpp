#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace mimo::io {

std::uint32_t crc32(std::span<const std::byte> bytes);
std::uint32_t crc32_of(std::span<const float> values);

// Headerless little-endian IEEE-754 float32 / int32 blobs. Writers return the
// CRC32 of the bytes written.
std::uint32_t write_f32(const std::filesystem::path& path, std::span<const float> values);
std::uint32_t write_i32(const std::filesystem::path& path, std::span<const std::int32_t> values);

// Reads exactly `count` values; throws IoError naming the file on a missing
// file, a size mismatch or a CRC mismatch.
std::vector<float> read_f32(const std::filesystem::path& path, std::size_t count,
                            std::optional<std::uint32_t> expected_crc = std::nullopt);
std::vector<std::int32_t> read_i32(const std::filesystem::path& path, std::size_t count,
                                   std::optional<std::uint32_t> expected_crc = std::nullopt);

std::vector<std::byte> read_bytes(const std::filesystem::path& path);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace mimo::io
