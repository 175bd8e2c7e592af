#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mapseg/config.hpp"
#include "mapseg/geometry.hpp"
#include "mapseg/model.hpp"
#include "mapseg/scene.hpp"

namespace mapseg {

/// (mean_a min_b |a - b| + mean_b min_a |a - b|) / 2. Throws DomainError on
/// an empty set.
double chamfer_distance(std::span<const Vec2> a, std::span<const Vec2> b);

struct ScoredElement {
    MapElement element;
    double score = 0.0;
};

/// One detection per query: its most probable foreground class, scored by
/// that class's softmax probability; queries scoring below `score_min` are
/// dropped. Crossing detections are closed rings.
std::vector<ScoredElement> detections_from(const MapPrediction& pred, double score_min);

/// Average precision of a ranked list. `is_tp` is in rank order; AP is the
/// sum over true positives of the interpolated precision, divided by n_gt
/// ("all_point"), or the 11-point mean ("11_point").
double average_precision(std::span<const char> is_tp, int n_gt, const std::string& interpolation);

struct EvalResult {
    /// NaN when a class has neither ground truth nor detections (skipped).
    std::array<double, kNumClasses> per_class_ap{};
    /// [class][threshold]
    std::array<std::vector<double>, kNumClasses> per_threshold_ap;
    std::array<int, kNumClasses> n_gt{};
    std::array<int, kNumClasses> n_pred{};
    double map = 0.0;  // mean over the classes that are not skipped
};

/// Per class and threshold: detections sorted by score (ties by frame, then
/// index) are greedily matched to the nearest unused same-class ground
/// truth of their frame within the chamfer threshold. Shapes are resampled
/// to cfg.n_sample_points before measuring.
EvalResult evaluate(const std::vector<std::vector<ScoredElement>>& detections,
                    const std::vector<std::vector<MapElement>>& gts, const EvalConfig& cfg);
EvalResult evaluate(const std::vector<MapPrediction>& preds,
                    const std::vector<std::vector<MapElement>>& gts, const EvalConfig& cfg);

struct AblationRow {
    std::string label;
    int height = 0;
    int width = 0;
    std::string backbone;
    std::array<double, kNumClasses> per_class_ap{};
    double map = 0.0;
    bool failed = false;
    std::string error;
};

AblationRow make_row(const std::string& label, const Config& config, const EvalResult& result);

/// Renders rows as a fixed-width text table. `first_column` names the row
/// label column ("Module" or "backbone").
std::string render_table(const std::string& title, const std::string& first_column,
                         const std::vector<AblationRow>& rows);
json rows_to_json(const std::vector<AblationRow>& rows);

/// BEV overlay: ground truth in green, detections in red (brightness by
/// score), written as an RGB PNG at `pixels_per_meter`.
void write_overlay(const std::filesystem::path& path, const BevRange& range,
                   std::span<const MapElement> gt, std::span<const ScoredElement> detections,
                   double pixels_per_meter = 8.0);

}  // namespace mapseg
