#include "mapseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "mapseg/error.hpp"
#include "mapseg/io.hpp"
#include "mapseg/matching.hpp"

namespace mapseg {
namespace {

/// Resampling that tolerates collapsed predictions (all points equal).
std::vector<Vec2> sample_shape(const MapElement& e, int n) {
    if (e.points.empty()) throw DomainError("cannot evaluate an element without points");
    if (e.points.size() < 2 || polyline_length(e.points, e.closed) <= 0.0) {
        return std::vector<Vec2>(static_cast<std::size_t>(n), e.points.front());
    }
    return resample_element(e, n);
}

struct Candidate {
    int frame;
    int index;
    double score;
};

}  // namespace

double chamfer_distance(std::span<const Vec2> a, std::span<const Vec2> b) {
    if (a.empty() || b.empty()) throw DomainError("chamfer distance of an empty point set");
    auto directed = [](std::span<const Vec2> from, std::span<const Vec2> to) {
        double total = 0.0;
        for (const Vec2& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const Vec2& q : to) best = std::min(best, std::hypot(p.x - q.x, p.y - q.y));
            total += best;
        }
        return total / static_cast<double>(from.size());
    };
    return 0.5 * (directed(a, b) + directed(b, a));
}

std::vector<ScoredElement> detections_from(const MapPrediction& pred, double score_min) {
    std::vector<ScoredElement> out;
    const int k = pred.scores.dim(1);
    const int pn = pred.n_points();
    for (int q = 0; q < pred.n_instances(); ++q) {
        const double* z = pred.scores.data() + static_cast<std::size_t>(q) * k;
        const double mx = *std::max_element(z, z + k);
        double s = 0.0;
        for (int c = 0; c < k; ++c) s += std::exp(z[c] - mx);
        int best = 0;
        for (int c = 1; c < kNumClasses; ++c) {
            if (z[c] > z[best]) best = c;
        }
        const double score = std::exp(z[best] - mx) / s;
        if (score < score_min) continue;
        ScoredElement d;
        d.score = score;
        d.element.cls = static_cast<ElementClass>(best);
        d.element.closed = d.element.cls == ElementClass::ped_crossing;
        const double* p = pred.points.data() + static_cast<std::size_t>(q) * pn * 2;
        for (int j = 0; j < pn; ++j) d.element.points.push_back({p[2 * j], p[2 * j + 1]});
        out.push_back(std::move(d));
    }
    return out;
}

double average_precision(std::span<const char> is_tp, int n_gt, const std::string& interpolation) {
    if (n_gt <= 0) return 0.0;
    const std::size_t n = is_tp.size();
    std::vector<double> precision(n);
    std::vector<double> recall(n);
    int tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
        tp += is_tp[i] ? 1 : 0;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / n_gt;
    }
    // interpolated precision: best precision at this recall or beyond
    for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    if (interpolation == "11_point") {
        double total = 0.0;
        for (int r = 0; r <= 10; ++r) {
            const double level = r / 10.0;
            double best = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (recall[i] >= level - 1e-12) {
                    best = precision[i];
                    break;
                }
            }
            total += best;
        }
        return total / 11.0;
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (is_tp[i]) total += precision[i];
    }
    return total / n_gt;
}

EvalResult evaluate(const std::vector<std::vector<ScoredElement>>& detections,
                    const std::vector<std::vector<MapElement>>& gts, const EvalConfig& cfg) {
    if (detections.size() != gts.size()) {
        throw ShapeError("evaluate: " + std::to_string(detections.size()) +
                         " prediction frames for " + std::to_string(gts.size()) + " ground truth frames");
    }
    if (cfg.thresholds.empty()) throw ConfigError("eval thresholds must not be empty");
    for (std::size_t t = 0; t < cfg.thresholds.size(); ++t) {
        if (!(cfg.thresholds[t] > 0.0) || (t > 0 && !(cfg.thresholds[t] > cfg.thresholds[t - 1]))) {
            throw ConfigError("eval thresholds must be positive and strictly increasing");
        }
    }
    const int n = cfg.n_sample_points;
    const std::size_t frames = gts.size();
    std::vector<std::vector<std::vector<Vec2>>> gt_pts(frames);
    std::vector<std::vector<std::vector<Vec2>>> det_pts(frames);
    for (std::size_t f = 0; f < frames; ++f) {
        for (const auto& e : gts[f]) gt_pts[f].push_back(sample_shape(e, n));
        for (const auto& d : detections[f]) det_pts[f].push_back(sample_shape(d.element, n));
    }

    EvalResult res;
    for (int c = 0; c < kNumClasses; ++c) {
        const auto cls = static_cast<ElementClass>(c);
        std::vector<Candidate> cands;
        int n_gt = 0;
        for (std::size_t f = 0; f < frames; ++f) {
            for (const auto& e : gts[f]) n_gt += e.cls == cls ? 1 : 0;
            for (std::size_t i = 0; i < detections[f].size(); ++i) {
                if (detections[f][i].element.cls == cls) {
                    cands.push_back({static_cast<int>(f), static_cast<int>(i), detections[f][i].score});
                }
            }
        }
        res.n_gt[c] = n_gt;
        res.n_pred[c] = static_cast<int>(cands.size());
        if (n_gt == 0 && cands.empty()) {
            res.per_class_ap[c] = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
        // distances are threshold independent
        std::vector<std::vector<double>> dist(cands.size());
        for (std::size_t r = 0; r < cands.size(); ++r) {
            const auto& cd = cands[r];
            const auto& frame_gt = gts[cd.frame];
            dist[r].assign(frame_gt.size(), std::numeric_limits<double>::infinity());
            for (std::size_t g = 0; g < frame_gt.size(); ++g) {
                if (frame_gt[g].cls != cls) continue;
                dist[r][g] = chamfer_distance(det_pts[cd.frame][cd.index], gt_pts[cd.frame][g]);
            }
        }
        double sum = 0.0;
        for (double thr : cfg.thresholds) {
            std::vector<std::vector<char>> used(frames);
            for (std::size_t f = 0; f < frames; ++f) used[f].assign(gts[f].size(), 0);
            std::vector<char> is_tp(cands.size(), 0);
            for (std::size_t r = 0; r < cands.size(); ++r) {
                const int f = cands[r].frame;
                int best = -1;
                for (std::size_t g = 0; g < dist[r].size(); ++g) {
                    if (used[f][g] || dist[r][g] > thr) continue;
                    if (best < 0 || dist[r][g] < dist[r][best]) best = static_cast<int>(g);
                }
                if (best >= 0) {
                    used[f][best] = 1;
                    is_tp[r] = 1;
                }
            }
            const double ap = average_precision(is_tp, n_gt, cfg.interpolation);
            res.per_threshold_ap[c].push_back(ap);
            sum += ap;
        }
        res.per_class_ap[c] = sum / static_cast<double>(cfg.thresholds.size());
    }
    double total = 0.0;
    int counted = 0;
    for (double ap : res.per_class_ap) {
        if (std::isnan(ap)) continue;
        total += ap;
        ++counted;
    }
    res.map = counted ? total / counted : std::numeric_limits<double>::quiet_NaN();
    return res;
}

EvalResult evaluate(const std::vector<MapPrediction>& preds,
                    const std::vector<std::vector<MapElement>>& gts, const EvalConfig& cfg) {
    std::vector<std::vector<ScoredElement>> dets;
    dets.reserve(preds.size());
    for (const auto& p : preds) dets.push_back(detections_from(p, cfg.score_min));
    return evaluate(dets, gts, cfg);
}

AblationRow make_row(const std::string& label, const Config& config, const EvalResult& result) {
    AblationRow row;
    row.label = label;
    row.height = config.scene.image_height;
    row.width = config.scene.image_width;
    row.backbone = config.model.backbone_name;
    row.per_class_ap = result.per_class_ap;
    row.map = result.map;
    return row;
}

namespace {

std::string fmt4(double v) {
    if (std::isnan(v)) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

std::string pad(const std::string& s, std::size_t w) {
    return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

}  // namespace

std::string render_table(const std::string& title, const std::string& first_column,
                         const std::vector<AblationRow>& rows) {
    const std::vector<std::string> heads = {first_column, "size", class_label(ElementClass::ped_crossing),
                                            class_label(ElementClass::divider),
                                            class_label(ElementClass::boundary), "map"};
    std::vector<std::vector<std::string>> cells;
    for (const auto& r : rows) {
        std::vector<std::string> line = {r.label,
                                         std::to_string(r.height) + "x" + std::to_string(r.width)};
        if (r.failed) {
            for (int i = 0; i < 4; ++i) line.push_back("failed");
        } else {
            for (double ap : r.per_class_ap) line.push_back(fmt4(ap));
            line.push_back(fmt4(r.map));
        }
        cells.push_back(std::move(line));
    }
    std::vector<std::size_t> width(heads.size());
    for (std::size_t c = 0; c < heads.size(); ++c) {
        width[c] = heads[c].size();
        for (const auto& line : cells) width[c] = std::max(width[c], line[c].size());
    }
    auto join = [&](const std::vector<std::string>& line) {
        std::string s;
        for (std::size_t c = 0; c < line.size(); ++c) {
            s += (c ? " | " : "") + pad(line[c], width[c]);
        }
        while (!s.empty() && s.back() == ' ') s.pop_back();
        return s + "\n";
    };
    std::string out = title + "\n";
    const std::string header = join(heads);
    out += header;
    out += std::string(header.size() - 1, '-') + "\n";
    for (const auto& line : cells) out += join(line);
    for (const auto& r : rows) {
        if (r.failed) out += "# " + r.label + " failed: " + r.error + "\n";
    }
    return out;
}

json rows_to_json(const std::vector<AblationRow>& rows) {
    json out = json::array();
    for (const auto& r : rows) {
        json j;
        j["label"] = r.label;
        j["size"] = {r.height, r.width};
        j["backbone"] = r.backbone;
        j["failed"] = r.failed;
        if (r.failed) {
            j["error"] = r.error;
        } else {
            json ap = json::object();
            for (int c = 0; c < kNumClasses; ++c) {
                const double v = r.per_class_ap[c];
                ap[class_key(static_cast<ElementClass>(c))] = std::isnan(v) ? json(nullptr) : json(v);
            }
            j["per_class_ap"] = ap;
            j["map"] = std::isnan(r.map) ? json(nullptr) : json(r.map);
        }
        out.push_back(j);
    }
    return out;
}

void write_overlay(const std::filesystem::path& path, const BevRange& range,
                   std::span<const MapElement> gt, std::span<const ScoredElement> detections,
                   double pixels_per_meter) {
    const int h = std::max(1, static_cast<int>(std::lround(range.span_x() * pixels_per_meter)));
    const int w = std::max(1, static_cast<int>(std::lround(range.span_y() * pixels_per_meter)));
    Raster img(3, h, w);
    std::fill(img.data.begin(), img.data.end(), std::uint8_t{24});
    auto plot = [&](Vec2 p, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        const int row = static_cast<int>(std::floor((range.x_max - p.x) * pixels_per_meter));
        const int col = static_cast<int>(std::floor((range.y_max - p.y) * pixels_per_meter));
        if (row < 0 || row >= h || col < 0 || col >= w) return;
        img.at(0, row, col) = r;
        img.at(1, row, col) = g;
        img.at(2, row, col) = b;
    };
    auto draw = [&](const MapElement& e, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        const std::size_t n = e.points.size();
        const std::size_t segs = e.closed ? n : n - 1;
        for (std::size_t i = 0; i < segs && n > 1; ++i) {
            const Vec2 a = e.points[i];
            const Vec2 c = e.points[(i + 1) % n];
            const double len = std::hypot(c.x - a.x, c.y - a.y) * pixels_per_meter;
            const int steps = std::max(1, static_cast<int>(std::ceil(2.0 * len)));
            for (int s = 0; s <= steps; ++s) {
                const double t = static_cast<double>(s) / steps;
                plot({a.x + t * (c.x - a.x), a.y + t * (c.y - a.y)}, r, g, b);
            }
        }
    };
    for (const auto& e : gt) draw(e, 40, 200, 60);
    for (const auto& d : detections) {
        const auto v = static_cast<std::uint8_t>(std::lround(80 + 175 * std::clamp(d.score, 0.0, 1.0)));
        draw(d.element, v, 30, 30);
    }
    write_png(path, img, false);
}

}  // namespace mapseg
