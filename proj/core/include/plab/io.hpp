#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "plab/metrics.hpp"
#include "plab/nn.hpp"

namespace plab {

// FNV-1a, 64 bit.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
inline std::uint64_t fnv1a64(std::string_view text) {
  return fnv1a64({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}
std::uint64_t file_checksum(const std::filesystem::path& path);
std::string hex64(std::uint64_t x);

// Checkpoint layout (all integers little-endian):
//   "PLAB1" | u32 text length | arch text | f32 params[param_count] | u64 FNV-1a of all preceding bytes
inline constexpr std::string_view kCheckpointMagic = "PLAB1";

std::vector<std::uint8_t> encode_checkpoint(const ModelState& model);
ModelState decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const ModelState& model);
ModelState load_checkpoint(const std::filesystem::path& path);

// Writes to a sibling temp file and renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

std::string metrics_to_json_line(const MetricsRecord& r);
MetricsRecord metrics_from_json_line(std::string_view line);
MetricsStream read_metrics(const std::filesystem::path& path);

}  // namespace plab

namespace plab {

// manifest.json: every regular file under dir (except the manifest) with its
// size and FNV-1a checksum, sorted by relative path.
void write_manifest(const std::filesystem::path& dir);
// Lists artifacts whose checksum no longer matches; empty when intact.
std::vector<std::string> verify_manifest(const std::filesystem::path& dir);

}  // namespace plab
