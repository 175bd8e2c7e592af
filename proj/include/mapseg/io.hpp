#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mapseg/scene.hpp"

namespace mapseg {

/// 8-bit PNG: 3-channel rasters as RGB, 1-channel masks as gray with 0/1
/// stored as 0/255. Throws IoError on write failure, FormatError on decode.
void write_png(const std::filesystem::path& path, const Raster& raster, bool mask);
Raster read_png(const std::filesystem::path& path, bool mask);

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

/// Writes `manifest.json` plus frame_{i:05d}/{cam_k,uv_mask_k,bev_mask}.png.
void save_dataset(const std::vector<SurroundFrame>& frames, const SceneConfig& config,
                  const std::filesystem::path& directory);

struct Dataset {
    SceneConfig config;
    std::vector<SurroundFrame> frames;
};

/// Verifies every file checksum; FormatError names the offending file.
Dataset load_dataset(const std::filesystem::path& directory);

}  // namespace mapseg
