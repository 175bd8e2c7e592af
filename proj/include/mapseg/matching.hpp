#pragma once

#include <span>
#include <utility>
#include <vector>

#include "mapseg/autodiff.hpp"
#include "mapseg/config.hpp"
#include "mapseg/geometry.hpp"
#include "mapseg/model.hpp"

namespace mapseg {

/// Arc-length-uniform resampling to `n_points` (>= 2). Open elements keep
/// both endpoints; closed rings are sampled over the full loop starting at
/// the first vertex (the closing edge is implicit). Throws
/// DegenerateGeometryError for fewer than two points or zero length.
std::vector<Vec2> resample_element(const MapElement& element, int n_points);

/// Picks a canonical representative of the element's equivalence class:
/// open polylines run from their lexicographically smaller endpoint; rings
/// start at the lexicographically smallest vertex and run counter-clockwise.
MapElement canonicalize(const MapElement& element);

/// Open: {forward, reversed}. Closed: every cyclic shift in both directions
/// (2 * n orderings). Input is an already resampled sequence.
std::vector<std::vector<Vec2>> equivalent_orderings(std::span<const Vec2> points, bool closed);
/// canonicalize, resample, then enumerate.
std::vector<std::vector<Vec2>> equivalent_orderings(const MapElement& element, int n_points);

struct MatchWeights {
    double w_cls = 2.0;
    double w_pts = 5.0;
};

struct MatchResult {
    std::vector<std::pair<int, int>> pairs;  // (pred_index, gt_index), sorted by gt
    std::vector<int> unmatched_preds;
    double total_cost = 0.0;
};

/// Ground truth prepared for matching: class plus every equivalent ordering
/// as flat [P*2] arrays.
struct GtTarget {
    ElementClass cls;
    std::vector<std::vector<double>> orderings;
};
std::vector<GtTarget> prepare_targets(std::span<const MapElement> gt, int n_points);

/// min over orderings of mean_p(|dx| / span_x + |dy| / span_y).
double point_cost(const MapPrediction& pred, int pred_index, const GtTarget& target,
                  const BevRange& range);

/// cost[g][q] = w_cls * (-softmax(scores[q])[cls_g]) + w_pts * point_cost.
std::vector<std::vector<double>> match_cost_matrix(const MapPrediction& pred,
                                                   std::span<const GtTarget> targets,
                                                   const MatchWeights& weights,
                                                   const BevRange& range);

/// Minimum-cost assignment of a rows x cols matrix (rows <= cols) by the
/// O(rows^2 cols) shortest augmenting path method; ties resolve to the
/// lowest column. Returns the column of each row.
std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost);

MatchResult hungarian_match(const MapPrediction& pred, std::span<const MapElement> gt,
                            const MatchWeights& weights, const BevRange& range);
MatchResult hungarian_match(const MapPrediction& pred, std::span<const GtTarget> targets,
                            const MatchWeights& weights, const BevRange& range);

struct MaptrLossOptions {
    MatchWeights weights;
    /// "ce" or "focal"
    bool focal = false;
    double focal_gamma = 2.0;
    double bg_weight = 1.0;
    BevRange range;

    static MaptrLossOptions from_config(const Config& config);
};

template <typename T>
struct MaptrTerms {
    ad::Var<T> cls;    // weighted: w_cls * CE
    ad::Var<T> pts;    // weighted: w_pts * point L1
    ad::Var<T> total;  // cls + pts
};

/// Loss of a single decoder output given its match.
template <typename T>
MaptrTerms<T> maptr_loss(const MapPredictionVar<T>& pred, std::span<const GtTarget> targets,
                         const MatchResult& match, const MaptrLossOptions& options);

/// Deep supervision: each layer is matched on its own and the terms are
/// summed over layers.
template <typename T>
MaptrTerms<T> maptr_loss_layers(const std::vector<MapPredictionVar<T>>& layers,
                                std::span<const MapElement> gt, const MaptrLossOptions& options,
                                std::vector<MatchResult>* matches = nullptr);

}  // namespace mapseg
