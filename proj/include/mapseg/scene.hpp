#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mapseg/config.hpp"
#include "mapseg/geometry.hpp"
#include "mapseg/tensor.hpp"

namespace mapseg {

/// 8-bit raster, channel-major [C, H, W]. Camera images have 3 channels with
/// intensity v/255; masks have 1 channel holding 0 (background) or 1.
struct Raster {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    Raster() = default;
    Raster(int c, int h, int w) : channels(c), height(h), width(w), data(std::size_t(c) * h * w) {}

    std::uint8_t& at(int c, int i, int j) { return data[(std::size_t(c) * height + i) * width + j]; }
    std::uint8_t at(int c, int i, int j) const {
        return data[(std::size_t(c) * height + i) * width + j];
    }
    std::span<const std::uint8_t> plane(int c) const {
        return {data.data() + std::size_t(c) * height * width, std::size_t(height) * width};
    }
    std::size_t count_nonzero() const;
    bool operator==(const Raster&) const = default;
};

/// One synthetic scene as seen by the whole rig.
struct SurroundFrame {
    std::vector<Raster> images;    // [3, H_img, W_img] each
    std::vector<Raster> uv_masks;  // [1, H_img, W_img] each
    Raster bev_mask;               // [1, H_bev, W_bev]
    std::vector<MapElement> elements;
    CameraRig rig;
    BevRange bev_range;
    std::uint64_t seed = 0;
    bool operator==(const SurroundFrame&) const = default;
};

/// Standard rig: cameras evenly spaced in yaw, ordered front, left, right,
/// then further pairs, rear last for even counts (front/left/right/rear at 4).
CameraRig make_rig(const SceneConfig& config);

/// Foreground predicate shared by the BEV rasterizer and the UV masks:
/// within `half_width` of an open polyline, or inside a closed polygon.
bool is_foreground(Vec2 p, std::span<const MapElement> elements, double half_width);

/// Binary BEV mask on the (height x width) grid over `range`; see BevGrid for
/// the cell layout. Throws OutOfRangeError for points outside `range` and
/// ConfigError for a non-positive grid.
Raster rasterize_bev(std::span<const MapElement> elements, const BevRange& range, int height,
                     int width, double half_width);

/// Deterministic scene in (seed, config).
SurroundFrame generate_scene(std::uint64_t seed, const SceneConfig& config);

/// Per-frame seed used by generate_dataset.
std::uint64_t frame_seed(std::uint64_t dataset_seed, int frame_index);

/// config.n_frames frames; frame i uses frame_seed(config.seed, i).
std::vector<SurroundFrame> generate_dataset(const SceneConfig& config);

/// Mirror y -> -y: flips every image/mask horizontally, swaps mirror-partner
/// cameras and negates element y. Requires a rig symmetric about the x axis
/// with centered principal points and y_min = -y_max (ConfigError otherwise).
SurroundFrame mirror_frame(const SurroundFrame& frame);

/// Image as floats in [0, 1], [3, H, W].
template <typename T>
Tensor<T> image_to_tensor(const Raster& image);

}  // namespace mapseg
