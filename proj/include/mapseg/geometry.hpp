#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mapseg {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
    bool operator==(const Vec2&) const = default;
};

struct Vec3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
};

enum class ElementClass : int { ped_crossing = 0, divider = 1, boundary = 2 };
inline constexpr int kNumClasses = 3;

/// "ped_crossing" / "divider" / "boundary"
const char* class_key(ElementClass cls) noexcept;
/// Column heading: "ped crossing" / "divider" / "boundary"
const char* class_label(ElementClass cls) noexcept;
ElementClass class_from_key(const std::string& key);

/// Vectorized map primitive in BEV meters. Crossings are closed polygons
/// (vertices listed once); dividers and boundaries are open polylines.
struct MapElement {
    ElementClass cls = ElementClass::divider;
    std::vector<Vec2> points;
    bool closed = false;
    bool operator==(const MapElement&) const = default;
};

struct BevRange {
    double x_min = -15.0;
    double x_max = 15.0;
    double y_min = -7.5;
    double y_max = 7.5;

    double span_x() const { return x_max - x_min; }
    double span_y() const { return y_max - y_min; }
    bool contains(Vec2 p) const {
        return p.x >= x_min && p.x <= x_max && p.y >= y_min && p.y <= y_max;
    }
    bool operator==(const BevRange&) const = default;
};

/// Metric BEV raster. Rows run along x (row 0 at x_max, i.e. forward is up),
/// columns along y (column 0 at y_max, i.e. left is left). Cells are square.
struct BevGrid {
    BevRange range;
    int height = 100;
    int width = 50;

    double cell_size() const { return range.span_x() / height; }
    Vec2 cell_center(int row, int col) const {
        return {range.x_max - (row + 0.5) * range.span_x() / height,
                range.y_max - (col + 0.5) * range.span_y() / width};
    }
    /// Throws ConfigError unless the range is ordered, sizes are positive and
    /// cells are square to 1e-9 relative.
    void validate() const;
};

/// Pinhole camera. `intrinsics` is row-major 3x3 in pixels with integer pixel
/// coordinates at pixel centers; `extrinsics` is row-major 4x4 camera<-world
/// (camera frame: x right, y down, z forward).
struct Camera {
    std::array<double, 9> intrinsics{};
    std::array<double, 16> extrinsics{};
    int image_height = 0;
    int image_width = 0;

    double fx() const { return intrinsics[0]; }
    double fy() const { return intrinsics[4]; }
    double cx() const { return intrinsics[2]; }
    double cy() const { return intrinsics[5]; }
    Vec3 to_camera(Vec3 world) const;
    /// Camera center in world coordinates.
    Vec3 center() const;
    /// World direction of the ray through pixel (u, v), not normalized; its
    /// camera-frame z component is 1.
    Vec3 ray_direction(double u, double v) const;
    bool operator==(const Camera&) const = default;
};

struct CameraRig {
    std::vector<Camera> cameras;
    /// Throws ConfigError on empty rigs, non-positive focal lengths,
    /// principal points outside the image or non-orthonormal rotations.
    void validate() const;
    bool operator==(const CameraRig&) const = default;
};

inline constexpr double kDefaultDepthEps = 1e-3;

struct PixelCoord {
    double u = 0.0;
    double v = 0.0;
};

/// Pinhole projection; nullopt when the camera-frame depth is <= depth_eps.
std::optional<PixelCoord> project_to_uv(Vec3 world, const Camera& camera,
                                        double depth_eps = kDefaultDepthEps);
std::vector<std::optional<PixelCoord>> project_to_uv(std::span<const Vec3> world,
                                                     const Camera& camera,
                                                     double depth_eps = kDefaultDepthEps);

/// Camera looking along `yaw` (radians, world z-up, x forward, y left),
/// pitched down by `pitch` radians, mounted at `position`.
Camera make_camera(Vec3 position, double yaw, double pitch, double hfov, int image_height,
                   int image_width);

double point_segment_distance(Vec2 p, Vec2 a, Vec2 b);
/// Even-odd rule; the closing edge is implicit.
bool point_in_polygon(Vec2 p, std::span<const Vec2> polygon);
double polyline_length(std::span<const Vec2> points, bool closed);

}  // namespace mapseg
