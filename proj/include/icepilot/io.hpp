#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "icepilot/dataset.hpp"
#include "icepilot/network.hpp"

namespace icepilot {

namespace fs = std::filesystem;

std::string sha256_hex(std::string_view data);
std::string base64_encode(std::span<const std::uint8_t> data);
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// 8-bit grayscale PNG of the intensities (clamped to [0, 1]).
std::vector<std::uint8_t> encode_png(const SliceImage& image);
/// Decodes an 8-bit grayscale PNG; throws FormatError otherwise.
std::vector<std::uint8_t> decode_png_gray(std::span<const std::uint8_t> png, int& width, int& height);

std::string read_file(const fs::path& path);
void write_file(const fs::path& path, std::string_view data);

/// Scenes are stored as <dir>/<sha256 of the JSON text>.json. Returns the path.
fs::path write_scene(const fs::path& dir, const AnatomyScene& scene);
/// Verifies the content hash when the file name is one.
AnatomyScene read_scene(const fs::path& path);

/// Slice files: <base>.slc holds the 8-byte magic "ICESLC1\0", u32 width,
/// u32 height and float32 row-major intensities, all little-endian;
/// <base>.json is the sidecar with pose, seeds and pixel labels, merged with `extra`.
void write_slice(const fs::path& base, const SliceImage& image, const nlohmann::json& extra = {});
SliceImage read_slice(const fs::path& base, nlohmann::json* sidecar = nullptr);

/// Dataset directory: manifest.json, scenes/ and shards/shard-NNNN/ with one
/// slice file pair per record.
void write_dataset(const fs::path& dir, const Dataset& data, const DatasetSpec& spec, int shard_size = 256);
/// Rebuilds scene bundles (targets included) and records in shard order.
Dataset read_dataset(const fs::path& dir, const CatheterModel& catheter, DatasetSpec* spec = nullptr);
/// Hash of the manifest, identifying a dataset in reports.
std::string dataset_hash(const fs::path& dir);

/// Checkpoint: magic "ICECKPT\0", u32 version, u32 length + JSON header
/// (model config and metadata), u32 blob count, then per blob u32 name
/// length, name, u32 rank, u32 dims, u64 count and float32 values.
void save_checkpoint(const fs::path& path, const Network<float>& net, const nlohmann::json& meta = {});

struct Checkpoint {
  std::shared_ptr<Network<float>> network;
  nlohmann::json meta;
};

Checkpoint load_checkpoint(const fs::path& path);

}  // namespace icepilot
