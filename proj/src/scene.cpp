#include "mapseg/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mapseg/error.hpp"
#include "mapseg/rng.hpp"

namespace mapseg {
namespace {

struct Rgb {
    double r, g, b;
};

constexpr Rgb kSky{0.55, 0.70, 0.90};
constexpr Rgb kDividerPaint{0.95, 0.95, 0.95};
constexpr Rgb kBoundaryPaint{0.85, 0.72, 0.18};
constexpr Rgb kCrossingPaint{0.92, 0.92, 0.92};
constexpr double kDividerPaintFraction = 0.6;  // of the mask half-width
constexpr double kStripePeriod = 0.9;          // meters, crossing stripes along y
constexpr double kTextureCell = 0.25;          // meters

std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

struct Bounds {
    double x0, x1, y0, y1;
};

Bounds bounds_of(const MapElement& e, double pad) {
    Bounds b{e.points[0].x, e.points[0].x, e.points[0].y, e.points[0].y};
    for (const Vec2& p : e.points) {
        b.x0 = std::min(b.x0, p.x);
        b.x1 = std::max(b.x1, p.x);
        b.y0 = std::min(b.y0, p.y);
        b.y1 = std::max(b.y1, p.y);
    }
    return {b.x0 - pad, b.x1 + pad, b.y0 - pad, b.y1 + pad};
}

bool in_bounds(Vec2 p, const Bounds& b) {
    return p.x >= b.x0 && p.x <= b.x1 && p.y >= b.y0 && p.y <= b.y1;
}

double polyline_distance(Vec2 p, const MapElement& e) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < e.points.size(); ++i) {
        best = std::min(best, point_segment_distance(p, e.points[i - 1], e.points[i]));
    }
    return best;
}

double ground_gray(Vec2 q, std::uint64_t texture_seed) {
    const auto cx = static_cast<std::int64_t>(std::floor(q.x / kTextureCell));
    const auto cy = static_cast<std::int64_t>(std::floor(q.y / kTextureCell));
    const std::uint64_t h =
        mix_seed(mix_seed(texture_seed, static_cast<std::uint64_t>(cx)), static_cast<std::uint64_t>(cy));
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    return 0.28 + 0.08 * (u - 0.5);
}

struct PreparedElement {
    const MapElement* element;
    Bounds box;
    double stripe_origin;
};

Rgb shade(Vec2 q, std::span<const PreparedElement> prepared, double half_width,
          std::uint64_t texture_seed) {
    const double g = ground_gray(q, texture_seed);
    Rgb color{g, g, g * 1.02};
    // crossings first, then boundaries, dividers on top
    for (const auto& pe : prepared) {
        const MapElement& e = *pe.element;
        if (!in_bounds(q, pe.box)) continue;
        if (e.closed) {
            if (point_in_polygon(q, e.points)) {
                const double phase = (q.y - pe.stripe_origin) / kStripePeriod;
                if (phase - std::floor(phase) < 0.5) color = kCrossingPaint;
            }
        } else if (e.cls == ElementClass::boundary) {
            if (polyline_distance(q, e) <= half_width) color = kBoundaryPaint;
        }
    }
    for (const auto& pe : prepared) {
        const MapElement& e = *pe.element;
        if (e.closed || e.cls != ElementClass::divider || !in_bounds(q, pe.box)) continue;
        if (polyline_distance(q, e) <= kDividerPaintFraction * half_width) color = kDividerPaint;
    }
    return color;
}

std::vector<double> camera_yaws(int n) {
    const double step = 2.0 * std::numbers::pi / n;
    std::vector<double> yaws{0.0};
    for (int i = 1; static_cast<int>(yaws.size()) < n; ++i) {
        const double a = i * step;
        yaws.push_back(a);
        if (static_cast<int>(yaws.size()) < n && std::abs(a - std::numbers::pi) > 1e-12) {
            yaws.push_back(-a);
        }
    }
    return yaws;
}

std::vector<Vec2> sample_curve(double x0, double x1, double step, auto&& lateral) {
    const int n = std::max(2, static_cast<int>(std::ceil((x1 - x0) / step)) + 1);
    std::vector<Vec2> pts(n);
    for (int k = 0; k < n; ++k) {
        const double x = x0 + (x1 - x0) * k / (n - 1);
        pts[k] = {x, lateral(x)};
    }
    return pts;
}

std::vector<MapElement> synthesize_elements(Rng& rng, const SceneConfig& cfg) {
    const BevRange r = cfg.range();
    const double xc = 0.5 * (r.x_min + r.x_max);
    const double yc = 0.5 * (r.y_min + r.y_max);
    const double hx = 0.5 * r.span_x();
    const double hy = 0.5 * r.span_y();
    const double margin = 0.02 * std::min(r.span_x(), r.span_y());
    const double x_lo = r.x_min + margin;
    const double x_hi = r.x_max - margin;
    const double step = std::max(1.0, r.span_x() / 40.0);

    const double bend = rng.bernoulli(0.5) ? rng.uniform(-0.1, 0.1) * hy : 0.0;
    auto lateral = [&](double x, double y0) {
        const double t = (x - xc) / hx;
        return y0 + bend * t * t;
    };
    const double left_y0 = yc + rng.uniform(0.55, 0.75) * hy;
    const double right_y0 = yc - rng.uniform(0.55, 0.75) * hy;

    std::vector<MapElement> out;
    const int nb = rng.uniform_int(cfg.n_boundaries.min, cfg.n_boundaries.max);
    bool has_left = nb >= 1;
    bool has_right = nb >= 2;
    if (nb == 1 && rng.bernoulli(0.5)) std::swap(has_left, has_right);
    for (const auto& [present, y0] : {std::pair{has_left, left_y0}, std::pair{has_right, right_y0}}) {
        if (!present) continue;
        out.push_back({ElementClass::boundary,
                       sample_curve(x_lo, x_hi, step, [&](double x) { return lateral(x, y0); }),
                       false});
    }

    const int nd = rng.uniform_int(cfg.n_dividers.min, cfg.n_dividers.max);
    const double lane = (left_y0 - right_y0) / (nd + 1);
    for (int k = 0; k < nd; ++k) {
        const double y0 = right_y0 + (k + 1) * lane + rng.uniform(-0.15, 0.15) * lane;
        double a = x_lo;
        double b = x_hi;
        if (rng.bernoulli(0.3)) {
            const double len = x_hi - x_lo;
            a = rng.uniform(x_lo, x_hi - 0.4 * len);
            b = rng.uniform(a + 0.4 * len, x_hi);
        }
        out.push_back({ElementClass::divider,
                       sample_curve(a, b, step, [&](double x) { return lateral(x, y0); }), false});
    }

    const int nc = rng.uniform_int(cfg.n_crossings.min, cfg.n_crossings.max);
    if (nc > 0) {
        const double usable_lo = x_lo + 0.1 * r.span_x();
        const double usable_hi = x_hi - 0.1 * r.span_x();
        const double slot = (usable_hi - usable_lo) / nc;
        for (int k = 0; k < nc; ++k) {
            const double width = std::min(rng.uniform(2.5, 4.0), 0.6 * slot);
            const double s_lo = usable_lo + k * slot + 0.5 * width;
            const double s_hi = usable_lo + (k + 1) * slot - 0.5 * width;
            const double xm = rng.uniform(s_lo, std::max(s_lo, s_hi));
            const double y_top = (has_left ? lateral(xm, left_y0) : yc + 0.7 * hy) - 0.3;
            const double y_bot = (has_right ? lateral(xm, right_y0) : yc - 0.7 * hy) + 0.3;
            const double x0 = xm - 0.5 * width;
            const double x1 = xm + 0.5 * width;
            out.push_back({ElementClass::ped_crossing,
                           {{x0, y_bot}, {x1, y_bot}, {x1, y_top}, {x0, y_top}},
                           true});
        }
    }
    return out;
}

void render_camera(std::span<const PreparedElement> prepared, std::span<const MapElement> elements,
                   const Camera& cam, double half_width, std::uint64_t texture_seed,
                   double depth_eps, Raster& image, Raster& mask) {
    image = Raster(3, cam.image_height, cam.image_width);
    mask = Raster(1, cam.image_height, cam.image_width);
    const Vec3 c = cam.center();
    for (int v = 0; v < cam.image_height; ++v) {
        for (int u = 0; u < cam.image_width; ++u) {
            const Vec3 d = cam.ray_direction(u, v);
            Rgb color = kSky;
            std::uint8_t fg = 0;
            if (d.z < 0.0) {
                const double s = -c.z / d.z;  // equals camera-frame depth
                if (s > depth_eps) {
                    const Vec2 q{c.x + s * d.x, c.y + s * d.y};
                    color = shade(q, prepared, half_width, texture_seed);
                    fg = is_foreground(q, elements, half_width) ? 1 : 0;
                }
            }
            image.at(0, v, u) = quantize(color.r);
            image.at(1, v, u) = quantize(color.g);
            image.at(2, v, u) = quantize(color.b);
            mask.at(0, v, u) = fg;
        }
    }
}

Raster flip_horizontal(const Raster& in) {
    Raster out(in.channels, in.height, in.width);
    for (int c = 0; c < in.channels; ++c) {
        for (int i = 0; i < in.height; ++i) {
            for (int j = 0; j < in.width; ++j) out.at(c, i, j) = in.at(c, i, in.width - 1 - j);
        }
    }
    return out;
}

Camera mirrored_camera(const Camera& cam) {
    // R' = F R M with F = diag(-1, 1, 1) (image flip), M = diag(1, -1, 1) (world mirror); t' = F t
    Camera out = cam;
    auto& e = out.extrinsics;
    for (int r = 0; r < 3; ++r) e[r * 4 + 1] = -e[r * 4 + 1];
    for (int j = 0; j < 4; ++j) e[j] = -e[j];
    for (auto& v : e) v = v == 0.0 ? 0.0 : v;  // drop negative zeros
    return out;
}

bool same_camera(const Camera& a, const Camera& b) {
    if (a.image_height != b.image_height || a.image_width != b.image_width) return false;
    for (int i = 0; i < 9; ++i) {
        if (std::abs(a.intrinsics[i] - b.intrinsics[i]) > 1e-9) return false;
    }
    for (int i = 0; i < 16; ++i) {
        if (std::abs(a.extrinsics[i] - b.extrinsics[i]) > 1e-9) return false;
    }
    return true;
}

}  // namespace

std::size_t Raster::count_nonzero() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
}

CameraRig make_rig(const SceneConfig& cfg) {
    CameraRig rig;
    const double pitch = cfg.camera_pitch_deg * std::numbers::pi / 180.0;
    const double hfov = cfg.hfov_deg * std::numbers::pi / 180.0;
    for (double yaw : camera_yaws(cfg.n_cameras)) {
        const Vec3 pos{1.5 * std::cos(yaw), 0.8 * std::sin(yaw), cfg.camera_height};
        rig.cameras.push_back(
            make_camera(pos, yaw, pitch, hfov, cfg.image_height, cfg.image_width));
    }
    return rig;
}

bool is_foreground(Vec2 p, std::span<const MapElement> elements, double half_width) {
    for (const MapElement& e : elements) {
        if (e.points.size() < 2) continue;
        if (e.closed) {
            if (point_in_polygon(p, e.points)) return true;
        } else if (polyline_distance(p, e) <= half_width) {
            return true;
        }
    }
    return false;
}

Raster rasterize_bev(std::span<const MapElement> elements, const BevRange& range, int height,
                     int width, double half_width) {
    if (height <= 0 || width <= 0) {
        throw ConfigError("BEV grid must be positive, got " + std::to_string(height) + "x" +
                          std::to_string(width));
    }
    for (std::size_t k = 0; k < elements.size(); ++k) {
        for (const Vec2& p : elements[k].points) {
            if (!range.contains(p)) {
                throw OutOfRangeError("element " + std::to_string(k) + " point (" +
                                      std::to_string(p.x) + ", " + std::to_string(p.y) +
                                      ") outside the BEV range");
            }
        }
    }
    const BevGrid grid{range, height, width};
    Raster mask(1, height, width);
    for (int i = 0; i < height; ++i) {
        for (int j = 0; j < width; ++j) {
            mask.at(0, i, j) = is_foreground(grid.cell_center(i, j), elements, half_width) ? 1 : 0;
        }
    }
    return mask;
}

SurroundFrame generate_scene(std::uint64_t seed, const SceneConfig& config) {
    validate(config);
    Rng rng(mix_seed(seed, 1));
    SurroundFrame frame;
    frame.seed = seed;
    frame.bev_range = config.range();
    frame.rig = make_rig(config);
    frame.elements = synthesize_elements(rng, config);

    std::vector<PreparedElement> prepared;
    for (const MapElement& e : frame.elements) {
        double y_min = e.points[0].y;
        for (const Vec2& p : e.points) y_min = std::min(y_min, p.y);
        prepared.push_back({&e, bounds_of(e, config.half_width), y_min});
    }
    std::stable_sort(prepared.begin(), prepared.end(), [](const auto& a, const auto& b) {
        return a.element->closed && !b.element->closed;
    });
    const std::uint64_t texture_seed = mix_seed(seed, 2);
    for (const Camera& cam : frame.rig.cameras) {
        Raster image;
        Raster mask;
        render_camera(prepared, frame.elements, cam, config.half_width, texture_seed,
                      config.depth_eps, image, mask);
        frame.images.push_back(std::move(image));
        frame.uv_masks.push_back(std::move(mask));
    }
    frame.bev_mask = rasterize_bev(frame.elements, frame.bev_range, config.grid_height,
                                   config.grid_width, config.half_width);
    return frame;
}

std::uint64_t frame_seed(std::uint64_t dataset_seed, int frame_index) {
    return mix_seed(dataset_seed, static_cast<std::uint64_t>(frame_index) + 0x100);
}

std::vector<SurroundFrame> generate_dataset(const SceneConfig& config) {
    validate(config);
    std::vector<SurroundFrame> frames;
    frames.reserve(static_cast<std::size_t>(config.n_frames));
    for (int i = 0; i < config.n_frames; ++i) {
        frames.push_back(generate_scene(frame_seed(config.seed, i), config));
    }
    return frames;
}

SurroundFrame mirror_frame(const SurroundFrame& frame) {
    if (std::abs(frame.bev_range.y_min + frame.bev_range.y_max) > 1e-12) {
        throw ConfigError("mirroring needs a BEV range symmetric in y");
    }
    const auto& cams = frame.rig.cameras;
    std::vector<int> partner(cams.size(), -1);
    for (std::size_t k = 0; k < cams.size(); ++k) {
        if (std::abs(cams[k].cx() - 0.5 * (cams[k].image_width - 1)) > 1e-9) {
            throw ConfigError("mirroring needs horizontally centered principal points");
        }
        const Camera m = mirrored_camera(cams[k]);
        for (std::size_t p = 0; p < cams.size(); ++p) {
            if (same_camera(m, cams[p])) {
                partner[k] = static_cast<int>(p);
                break;
            }
        }
        if (partner[k] < 0) {
            throw ConfigError("camera " + std::to_string(k) + " has no mirror partner in the rig");
        }
    }
    SurroundFrame out = frame;
    for (std::size_t k = 0; k < cams.size(); ++k) {
        out.images[partner[k]] = flip_horizontal(frame.images[k]);
        out.uv_masks[partner[k]] = flip_horizontal(frame.uv_masks[k]);
    }
    out.bev_mask = flip_horizontal(frame.bev_mask);
    for (auto& e : out.elements) {
        for (auto& p : e.points) p.y = p.y == 0.0 ? 0.0 : -p.y;
    }
    return out;
}

template <typename T>
Tensor<T> image_to_tensor(const Raster& image) {
    Tensor<T> t({image.channels, image.height, image.width});
    for (std::size_t i = 0; i < image.data.size(); ++i) {
        t[i] = static_cast<T>(image.data[i]) / static_cast<T>(255);
    }
    return t;
}

template Tensor<float> image_to_tensor<float>(const Raster&);
template Tensor<double> image_to_tensor<double>(const Raster&);

}  // namespace mapseg
