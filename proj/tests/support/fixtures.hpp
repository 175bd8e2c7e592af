#pragma once

// Shared helpers for the unit and acceptance tests.

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "mapseg/config.hpp"
#include "mapseg/geometry.hpp"
#include "mapseg/model.hpp"
#include "mapseg/rng.hpp"

namespace mapseg::fixtures {

/// Default model on a 40x20 BEV grid (0.75 m cells): the full 100x50 grid
/// costs ~25x more per step, too slow for the test budget on one core.
inline Config desk_config(int n_frames) {
    Config c;
    c.scene.n_frames = n_frames;
    c.scene.grid_height = 40;
    c.scene.grid_width = 20;
    return c;
}

/// Minimum of sum_g cost[g][perm[g]] over all injective maps, by brute force.
inline double brute_force_min(const std::vector<std::vector<double>>& cost) {
    const int rows = static_cast<int>(cost.size());
    const int cols = rows ? static_cast<int>(cost[0].size()) : 0;
    std::vector<int> cols_idx(static_cast<std::size_t>(cols));
    std::iota(cols_idx.begin(), cols_idx.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0.0;
        for (int g = 0; g < rows; ++g) s += cost[g][cols_idx[g]];
        best = std::min(best, s);
    } while (std::next_permutation(cols_idx.begin(), cols_idx.end()));
    return best;
}

inline MapPrediction random_prediction(Rng& rng, int n, int p, const BevRange& r) {
    MapPrediction pred;
    pred.scores = Tensor<double>({n, kNumClasses + 1});
    pred.points = Tensor<double>({n, p, 2});
    for (auto& v : pred.scores.storage()) v = rng.uniform(-3.0, 3.0);
    for (int i = 0; i < n * p; ++i) {
        pred.points[2 * i] = rng.uniform(r.x_min, r.x_max);
        pred.points[2 * i + 1] = rng.uniform(r.y_min, r.y_max);
    }
    return pred;
}

/// Random open polylines and (convex, CCW) quadrilateral crossings.
inline std::vector<MapElement> random_gt(Rng& rng, int count, const BevRange& r) {
    std::vector<MapElement> gt;
    for (int i = 0; i < count; ++i) {
        MapElement e;
        e.cls = static_cast<ElementClass>(rng.uniform_int(0, kNumClasses - 1));
        e.closed = e.cls == ElementClass::ped_crossing;
        if (e.closed) {
            const double x0 = rng.uniform(r.x_min + 1.0, r.x_max - 5.0);
            const double y0 = rng.uniform(r.y_min + 1.0, r.y_max - 4.0);
            const double w = rng.uniform(2.0, 4.0);
            const double h = rng.uniform(1.5, 3.0);
            e.points = {{x0, y0}, {x0 + w, y0}, {x0 + w, y0 + h}, {x0, y0 + h}};
        } else {
            const int n = rng.uniform_int(2, 6);
            for (int k = 0; k < n; ++k) {
                e.points.push_back({r.x_min + (k + rng.uniform(0.1, 0.9)) * r.span_x() / n,
                                    rng.uniform(r.y_min, r.y_max)});
            }
        }
        gt.push_back(std::move(e));
    }
    return gt;
}

}  // namespace mapseg::fixtures
