#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

namespace mtl {

// Throws MissingInputError if the file does not exist.
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames it over the target, so readers
// never observe a partially written artifact.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

// 64-bit FNV-1a, hex encoded; used for artifact checksums in manifests.
std::string checksum_hex(std::span<const std::uint8_t> bytes);

}  // namespace mtl
