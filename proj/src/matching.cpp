#include "mapseg/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mapseg/error.hpp"

namespace mapseg {
namespace {

bool lex_less(Vec2 a, Vec2 b) { return a.x < b.x || (a.x == b.x && a.y < b.y); }

double signed_area(std::span<const Vec2> pts) {
    double a = 0.0;
    for (std::size_t i = 0, j = pts.size() - 1; i < pts.size(); j = i++) {
        a += pts[j].x * pts[i].y - pts[i].x * pts[j].y;
    }
    return 0.5 * a;
}

std::vector<double> flatten(const std::vector<Vec2>& pts) {
    std::vector<double> out;
    out.reserve(pts.size() * 2);
    for (const Vec2& p : pts) {
        out.push_back(p.x);
        out.push_back(p.y);
    }
    return out;
}

std::vector<double> softmax_row(const Tensor<double>& scores, int row) {
    const int k = scores.dim(1);
    const double* z = scores.data() + static_cast<std::size_t>(row) * k;
    const double mx = *std::max_element(z, z + k);
    std::vector<double> p(k);
    double s = 0.0;
    for (int c = 0; c < k; ++c) s += p[c] = std::exp(z[c] - mx);
    for (double& v : p) v /= s;
    return p;
}

}  // namespace

std::vector<Vec2> resample_element(const MapElement& element, int n_points) {
    const auto& pts = element.points;
    if (pts.size() < 2) {
        throw DegenerateGeometryError("cannot resample an element with " +
                                      std::to_string(pts.size()) + " point(s)");
    }
    if (n_points < 2) throw ConfigError("resampling needs at least 2 points");
    std::vector<Vec2> ring(pts.begin(), pts.end());
    if (element.closed) ring.push_back(pts.front());
    std::vector<double> cum(ring.size(), 0.0);
    for (std::size_t i = 1; i < ring.size(); ++i) {
        cum[i] = cum[i - 1] + std::hypot(ring[i].x - ring[i - 1].x, ring[i].y - ring[i - 1].y);
    }
    const double total = cum.back();
    if (!(total > 0.0)) throw DegenerateGeometryError("cannot resample a zero-length element");

    std::vector<Vec2> out(static_cast<std::size_t>(n_points));
    const int denom = element.closed ? n_points : n_points - 1;
    std::size_t seg = 1;
    for (int j = 0; j < n_points; ++j) {
        if (j == 0) {
            out[0] = ring.front();
            continue;
        }
        if (!element.closed && j == n_points - 1) {
            out[j] = ring.back();
            continue;
        }
        const double t = total * j / denom;
        while (seg + 1 < ring.size() && cum[seg] < t) ++seg;
        const double len = cum[seg] - cum[seg - 1];
        const double a = len > 0.0 ? (t - cum[seg - 1]) / len : 0.0;
        const Vec2 p0 = ring[seg - 1];
        const Vec2 p1 = ring[seg];
        out[j] = {p0.x + a * (p1.x - p0.x), p0.y + a * (p1.y - p0.y)};
    }
    return out;
}

MapElement canonicalize(const MapElement& element) {
    MapElement out = element;
    auto& pts = out.points;
    if (pts.size() < 2) return out;
    if (!element.closed) {
        if (lex_less(pts.back(), pts.front())) std::reverse(pts.begin(), pts.end());
        return out;
    }
    if (signed_area(pts) < 0.0) std::reverse(pts.begin(), pts.end());
    auto first = std::min_element(pts.begin(), pts.end(), lex_less);
    std::rotate(pts.begin(), first, pts.end());
    return out;
}

std::vector<std::vector<Vec2>> equivalent_orderings(std::span<const Vec2> points, bool closed) {
    const std::size_t n = points.size();
    std::vector<std::vector<Vec2>> out;
    if (!closed) {
        out.emplace_back(points.begin(), points.end());
        out.emplace_back(points.rbegin(), points.rend());
        return out;
    }
    out.reserve(2 * n);
    for (std::size_t s = 0; s < n; ++s) {
        std::vector<Vec2> fwd(n);
        std::vector<Vec2> rev(n);
        for (std::size_t j = 0; j < n; ++j) {
            fwd[j] = points[(s + j) % n];
            rev[j] = points[(s + n - j) % n];
        }
        out.push_back(std::move(fwd));
        out.push_back(std::move(rev));
    }
    return out;
}

std::vector<std::vector<Vec2>> equivalent_orderings(const MapElement& element, int n_points) {
    return equivalent_orderings(resample_element(canonicalize(element), n_points), element.closed);
}

std::vector<GtTarget> prepare_targets(std::span<const MapElement> gt, int n_points) {
    std::vector<GtTarget> out;
    out.reserve(gt.size());
    for (const MapElement& e : gt) {
        GtTarget t{e.cls, {}};
        for (const auto& o : equivalent_orderings(e, n_points)) t.orderings.push_back(flatten(o));
        out.push_back(std::move(t));
    }
    return out;
}

double point_cost(const MapPrediction& pred, int pred_index, const GtTarget& target,
                  const BevRange& range) {
    const int pn = pred.n_points();
    const double* p = pred.points.data() + static_cast<std::size_t>(pred_index) * pn * 2;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& o : target.orderings) {
        if (o.size() != static_cast<std::size_t>(pn) * 2) {
            throw ShapeError("ground truth ordering has " + std::to_string(o.size() / 2) +
                             " points, predictions have " + std::to_string(pn));
        }
        double c = 0.0;
        for (int j = 0; j < pn; ++j) {
            c += std::abs(p[2 * j] - o[2 * j]) / range.span_x() +
                 std::abs(p[2 * j + 1] - o[2 * j + 1]) / range.span_y();
        }
        best = std::min(best, c / pn);
    }
    return best;
}

std::vector<std::vector<double>> match_cost_matrix(const MapPrediction& pred,
                                                   std::span<const GtTarget> targets,
                                                   const MatchWeights& weights,
                                                   const BevRange& range) {
    const int nq = pred.n_instances();
    std::vector<std::vector<double>> probs(static_cast<std::size_t>(nq));
    for (int q = 0; q < nq; ++q) probs[q] = softmax_row(pred.scores, q);
    std::vector<std::vector<double>> cost(targets.size(), std::vector<double>(nq));
    for (std::size_t g = 0; g < targets.size(); ++g) {
        const int cls = static_cast<int>(targets[g].cls);
        for (int q = 0; q < nq; ++q) {
            cost[g][q] = weights.w_cls * -probs[q][cls] +
                         weights.w_pts * point_cost(pred, q, targets[g], range);
        }
    }
    return cost;
}

std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    if (n == 0) return {};
    const int m = static_cast<int>(cost[0].size());
    if (n > m) throw ShapeError("solve_assignment needs rows <= columns");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0);
    std::vector<double> v(m + 1, 0.0);
    std::vector<int> owner(m + 1, 0);  // row assigned to column j (1-based, 0 = free)
    std::vector<int> way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        owner[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = owner[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (owner[j0] != 0);
        do {
            const int j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> assign(n, -1);
    for (int j = 1; j <= m; ++j) {
        if (owner[j] != 0) assign[owner[j] - 1] = j - 1;
    }
    return assign;
}

MatchResult hungarian_match(const MapPrediction& pred, std::span<const GtTarget> targets,
                            const MatchWeights& weights, const BevRange& range) {
    MatchResult r;
    const int nq = pred.n_instances();
    const int ng = static_cast<int>(targets.size());
    std::vector<char> matched(nq, 0);
    if (ng > 0 && nq > 0) {
        const auto cost = match_cost_matrix(pred, targets, weights, range);
        if (ng <= nq) {
            const auto assign = solve_assignment(cost);
            for (int g = 0; g < ng; ++g) {
                r.pairs.emplace_back(assign[g], g);
                r.total_cost += cost[g][assign[g]];
                matched[assign[g]] = 1;
            }
        } else {
            std::vector<std::vector<double>> t(nq, std::vector<double>(ng));
            for (int g = 0; g < ng; ++g) {
                for (int q = 0; q < nq; ++q) t[q][g] = cost[g][q];
            }
            const auto assign = solve_assignment(t);
            std::vector<int> pred_of(ng, -1);
            for (int q = 0; q < nq; ++q) pred_of[assign[q]] = q;
            for (int g = 0; g < ng; ++g) {
                if (pred_of[g] < 0) continue;
                r.pairs.emplace_back(pred_of[g], g);
                r.total_cost += cost[g][pred_of[g]];
                matched[pred_of[g]] = 1;
            }
        }
    }
    for (int q = 0; q < nq; ++q) {
        if (!matched[q]) r.unmatched_preds.push_back(q);
    }
    return r;
}

MatchResult hungarian_match(const MapPrediction& pred, std::span<const MapElement> gt,
                            const MatchWeights& weights, const BevRange& range) {
    const auto targets = prepare_targets(gt, pred.n_points());
    return hungarian_match(pred, std::span<const GtTarget>(targets), weights, range);
}

MaptrLossOptions MaptrLossOptions::from_config(const Config& config) {
    MaptrLossOptions o;
    o.weights = {config.loss.w_cls, config.loss.w_pts};
    o.focal = config.loss.cls_loss == "focal";
    o.focal_gamma = config.loss.focal_gamma;
    o.bg_weight = config.loss.bg_weight;
    o.range = config.scene.range();
    return o;
}

template <typename T>
MaptrTerms<T> maptr_loss(const MapPredictionVar<T>& pred, std::span<const GtTarget> targets,
                         const MatchResult& match, const MaptrLossOptions& options) {
    const int nq = pred.scores.dim(0);
    std::vector<int> labels(nq, kNumClasses);
    ad::PointTargets pt;
    pt.scale_x = options.range.span_x();
    pt.scale_y = options.range.span_y();
    for (const auto& [q, g] : match.pairs) {
        labels[q] = static_cast<int>(targets[g].cls);
        pt.pred_index.push_back(q);
        pt.candidates.push_back(targets[g].orderings);
    }
    std::vector<double> class_weight(kNumClasses + 1, 1.0);
    class_weight[kNumClasses] = options.bg_weight;
    MaptrTerms<T> out;
    out.cls = ad::scale(ad::class_cross_entropy(pred.scores, labels, class_weight,
                                                options.focal ? options.focal_gamma : 0.0),
                        static_cast<T>(options.weights.w_cls));
    out.pts = ad::scale(ad::matched_point_l1(pred.points, pt), static_cast<T>(options.weights.w_pts));
    out.total = ad::add(out.cls, out.pts);
    return out;
}

template <typename T>
MaptrTerms<T> maptr_loss_layers(const std::vector<MapPredictionVar<T>>& layers,
                                std::span<const MapElement> gt, const MaptrLossOptions& options,
                                std::vector<MatchResult>* matches) {
    if (layers.empty()) throw ShapeError("maptr_loss_layers: no decoder outputs");
    const auto targets = prepare_targets(gt, layers.front().points.dim(1));
    MaptrTerms<T> sum;
    for (const auto& layer : layers) {
        const MatchResult m = hungarian_match(layer.values(), std::span<const GtTarget>(targets),
                                              options.weights, options.range);
        const MaptrTerms<T> t = maptr_loss(layer, std::span<const GtTarget>(targets), m, options);
        sum.cls = sum.cls.defined() ? ad::add(sum.cls, t.cls) : t.cls;
        sum.pts = sum.pts.defined() ? ad::add(sum.pts, t.pts) : t.pts;
        if (matches) matches->push_back(m);
    }
    sum.total = ad::add(sum.cls, sum.pts);
    return sum;
}

#define MAPSEG_INSTANTIATE_MATCH(T)                                                            \
    template MaptrTerms<T> maptr_loss<T>(const MapPredictionVar<T>&, std::span<const GtTarget>, \
                                         const MatchResult&, const MaptrLossOptions&);         \
    template MaptrTerms<T> maptr_loss_layers<T>(const std::vector<MapPredictionVar<T>>&,        \
                                                std::span<const MapElement>,                   \
                                                const MaptrLossOptions&,                       \
                                                std::vector<MatchResult>*);

MAPSEG_INSTANTIATE_MATCH(float)
MAPSEG_INSTANTIATE_MATCH(double)

}  // namespace mapseg
