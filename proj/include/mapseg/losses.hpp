#pragma once

#include <span>
#include <string>
#include <vector>

#include "mapseg/autodiff.hpp"
#include "mapseg/config.hpp"
#include "mapseg/model.hpp"
#include "mapseg/scene.hpp"

namespace mapseg {

struct LossWeights {
    double lambda1 = 15.0;  // Dice
    double lambda2 = 0.5;   // cross entropy
    double dice_eps = 1.0;
    ad::DiceMode mode = ad::DiceMode::dice;

    static LossWeights from_config(const Config& config);
};

/// Named scalar losses. seg == usm + bsm and total == maptr + seg hold
/// exactly for every report built by total_loss.
struct LossReport {
    double usm = 0.0;
    double bsm = 0.0;
    double seg = 0.0;
    double maptr_cls = 0.0;
    double maptr_pts = 0.0;
    double maptr = 0.0;
    double total = 0.0;
};

/// probs [H, W] in [0, 1] (DomainError otherwise); gt is a 1-channel mask of
/// the same size (ShapeError otherwise).
template <typename T>
ad::Var<T> dice_loss(const ad::Var<T>& probs, const Raster& gt, double eps = 1.0,
                     ad::DiceMode mode = ad::DiceMode::dice);

/// Mean per-pixel two-class cross entropy of [2, H, W] logits.
template <typename T>
ad::Var<T> seg_ce_loss(const SegLogits<T>& logits, const Raster& gt);

/// lambda1 * Dice(foreground probability) + lambda2 * CE.
template <typename T>
ad::Var<T> seg_loss(const SegLogits<T>& logits, const Raster& gt, const LossWeights& w);

/// Per-camera seg_loss averaged over cameras.
template <typename T>
ad::Var<T> usm_loss(const std::vector<SegLogits<T>>& logits, const std::vector<Raster>& uv_gt,
                    const LossWeights& w);

template <typename T>
ad::Var<T> bsm_loss(const SegLogits<T>& logits, const Raster& bev_gt, const LossWeights& w);

/// Throws NumericError naming the first non-finite term. The three-term form
/// leaves the maptr_cls / maptr_pts split at zero.
LossReport total_loss(double usm, double bsm, double maptr);
LossReport total_loss(double usm, double bsm, double maptr_cls, double maptr_pts);

}  // namespace mapseg
