#include "mapseg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mapseg/error.hpp"

namespace mapseg {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::shape: return "shape";
        case ErrorKind::frame_mismatch: return "frame_mismatch";
        case ErrorKind::domain: return "domain";
        case ErrorKind::format: return "format";
        case ErrorKind::out_of_range: return "out_of_range";
        case ErrorKind::degenerate_geometry: return "degenerate_geometry";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::checkpoint_incompatible: return "checkpoint_incompatible";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

const char* class_key(ElementClass cls) noexcept {
    switch (cls) {
        case ElementClass::ped_crossing: return "ped_crossing";
        case ElementClass::divider: return "divider";
        case ElementClass::boundary: return "boundary";
    }
    return "unknown";
}

const char* class_label(ElementClass cls) noexcept {
    switch (cls) {
        case ElementClass::ped_crossing: return "ped crossing";
        case ElementClass::divider: return "divider";
        case ElementClass::boundary: return "boundary";
    }
    return "unknown";
}

ElementClass class_from_key(const std::string& key) {
    if (key == "ped_crossing") return ElementClass::ped_crossing;
    if (key == "divider") return ElementClass::divider;
    if (key == "boundary") return ElementClass::boundary;
    throw FormatError("unknown map element class '" + key + "'");
}

void BevGrid::validate() const {
    if (!(range.x_min < range.x_max) || !(range.y_min < range.y_max)) {
        throw ConfigError("BEV range must satisfy x_min < x_max and y_min < y_max");
    }
    if (height <= 0 || width <= 0) {
        throw ConfigError("BEV grid size must be positive, got " + std::to_string(height) + "x" +
                          std::to_string(width));
    }
    const double cx = range.span_x() / height;
    const double cy = range.span_y() / width;
    if (std::abs(cx - cy) > 1e-9 * std::max(cx, cy)) {
        throw ConfigError("BEV cells must be square: " + std::to_string(cx) + " m along x vs " +
                          std::to_string(cy) + " m along y");
    }
}

Vec3 Camera::to_camera(Vec3 p) const {
    const auto& e = extrinsics;
    return {e[0] * p.x + e[1] * p.y + e[2] * p.z + e[3],
            e[4] * p.x + e[5] * p.y + e[6] * p.z + e[7],
            e[8] * p.x + e[9] * p.y + e[10] * p.z + e[11]};
}

Vec3 Camera::center() const {
    const auto& e = extrinsics;
    // -R^T t
    return {-(e[0] * e[3] + e[4] * e[7] + e[8] * e[11]),
            -(e[1] * e[3] + e[5] * e[7] + e[9] * e[11]),
            -(e[2] * e[3] + e[6] * e[7] + e[10] * e[11])};
}

Vec3 Camera::ray_direction(double u, double v) const {
    const double dx = (u - cx()) / fx();
    const double dy = (v - cy()) / fy();
    const auto& e = extrinsics;
    return {e[0] * dx + e[4] * dy + e[8], e[1] * dx + e[5] * dy + e[9],
            e[2] * dx + e[6] * dy + e[10]};
}

void CameraRig::validate() const {
    if (cameras.empty()) throw ConfigError("camera rig has no cameras");
    for (std::size_t k = 0; k < cameras.size(); ++k) {
        const Camera& c = cameras[k];
        const std::string tag = "camera " + std::to_string(k);
        if (c.image_height <= 0 || c.image_width <= 0) {
            throw ConfigError(tag + ": image size must be positive");
        }
        if (!(c.fx() > 0.0) || !(c.fy() > 0.0)) {
            throw ConfigError(tag + ": focal lengths must be positive");
        }
        if (c.cx() < 0.0 || c.cx() > c.image_width - 1 || c.cy() < 0.0 ||
            c.cy() > c.image_height - 1) {
            throw ConfigError(tag + ": principal point outside the image");
        }
        const auto& e = c.extrinsics;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                double dot = 0.0;
                for (int r = 0; r < 3; ++r) dot += e[r * 4 + i] * e[r * 4 + j];
                if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-6) {
                    throw ConfigError(tag + ": extrinsic rotation is not orthonormal");
                }
            }
        }
        if (e[12] != 0.0 || e[13] != 0.0 || e[14] != 0.0 || e[15] != 1.0) {
            throw ConfigError(tag + ": extrinsics last row must be (0, 0, 0, 1)");
        }
    }
}

std::optional<PixelCoord> project_to_uv(Vec3 world, const Camera& camera, double depth_eps) {
    const Vec3 pc = camera.to_camera(world);
    if (pc.z <= depth_eps) return std::nullopt;
    const auto& k = camera.intrinsics;
    const double u = (k[0] * pc.x + k[1] * pc.y + k[2] * pc.z) / pc.z;
    const double v = (k[3] * pc.x + k[4] * pc.y + k[5] * pc.z) / pc.z;
    return PixelCoord{u, v};
}

std::vector<std::optional<PixelCoord>> project_to_uv(std::span<const Vec3> world,
                                                     const Camera& camera, double depth_eps) {
    std::vector<std::optional<PixelCoord>> out;
    out.reserve(world.size());
    for (const Vec3& p : world) out.push_back(project_to_uv(p, camera, depth_eps));
    return out;
}

Camera make_camera(Vec3 position, double yaw, double pitch, double hfov, int image_height,
                   int image_width) {
    const double f = 0.5 * image_width / std::tan(0.5 * hfov);
    Camera cam;
    cam.image_height = image_height;
    cam.image_width = image_width;
    cam.intrinsics = {f, 0.0, 0.5 * (image_width - 1), 0.0, f, 0.5 * (image_height - 1),
                      0.0, 0.0, 1.0};
    const double cp = std::cos(pitch);
    const double sp = std::sin(pitch);
    const double cyaw = std::cos(yaw);
    const double syaw = std::sin(yaw);
    const Vec3 fwd{cyaw * cp, syaw * cp, -sp};
    const Vec3 right{syaw, -cyaw, 0.0};
    // down = forward x right
    const Vec3 down{fwd.y * right.z - fwd.z * right.y, fwd.z * right.x - fwd.x * right.z,
                    fwd.x * right.y - fwd.y * right.x};
    const Vec3 rows[3] = {right, down, fwd};
    for (int r = 0; r < 3; ++r) {
        cam.extrinsics[r * 4 + 0] = rows[r].x;
        cam.extrinsics[r * 4 + 1] = rows[r].y;
        cam.extrinsics[r * 4 + 2] = rows[r].z;
        cam.extrinsics[r * 4 + 3] =
            -(rows[r].x * position.x + rows[r].y * position.y + rows[r].z * position.z);
    }
    cam.extrinsics[15] = 1.0;
    return cam;
}

double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
    const double dx = b.x - a.x;
    const double dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = 0.0;
    if (len2 > 0.0) {
        t = ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2;
        t = std::clamp(t, 0.0, 1.0);
    }
    const double qx = a.x + t * dx - p.x;
    const double qy = a.y + t * dy - p.y;
    return std::sqrt(qx * qx + qy * qy);
}

bool point_in_polygon(Vec2 p, std::span<const Vec2> poly) {
    bool inside = false;
    const std::size_t n = poly.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const Vec2 a = poly[i];
        const Vec2 b = poly[j];
        if ((a.y > p.y) != (b.y > p.y)) {
            const double x_cross = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
            if (p.x < x_cross) inside = !inside;
        }
    }
    return inside;
}

double polyline_length(std::span<const Vec2> pts, bool closed) {
    double len = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        len += std::hypot(pts[i].x - pts[i - 1].x, pts[i].y - pts[i - 1].y);
    }
    if (closed && pts.size() > 1) {
        len += std::hypot(pts.front().x - pts.back().x, pts.front().y - pts.back().y);
    }
    return len;
}

}  // namespace mapseg
