#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mapseg/config.hpp"
#include "mapseg/evaluation.hpp"
#include "mapseg/scene.hpp"

namespace mapseg {

/// A named set of "key=value" overrides applied on top of a base config.
struct Variant {
    std::string label;
    std::vector<std::string> overrides;
};

/// baseline / USM / BSM / USM + BSM / USM + BSM + SGM
std::vector<Variant> module_variants();
/// Full model at desk-scale input sizes and backbone widths.
std::vector<Variant> resolution_variants();

/// Held-out frames for ablation scoring: eval_frames frames drawn from a
/// seed stream disjoint from the training set's.
std::vector<SurroundFrame> ablation_eval_set(const SceneConfig& scene, int eval_frames);

/// Trains every variant from the base config's seed for ablate.epochs
/// epochs and evaluates it on ablation_eval_set. Variants that change the
/// scene (e.g. image size) get their own rendering of the same scenes.
/// A variant that throws is reported as a failed row.
std::vector<AblationRow> run_ablation(const Config& base, const std::vector<SurroundFrame>& train_frames,
                                      const std::vector<Variant>& variants,
                                      const std::function<void(const std::string&)>& log = {});

struct AblationReport {
    std::vector<AblationRow> modules;
    std::vector<AblationRow> resolution;
    std::string text;
    json data;
};

AblationReport make_ablation_report(std::vector<AblationRow> modules,
                                    std::vector<AblationRow> resolution);

/// Largest |map - mean(per_class_ap)| over rows that did not fail, with the
/// skipped (NaN) classes left out of the mean.
double max_mean_deviation(const std::vector<AblationRow>& rows);

}  // namespace mapseg
