#include "mapseg/losses.hpp"

#include <cmath>

#include "mapseg/error.hpp"

namespace mapseg {
namespace {

void check_mask(const Raster& gt, int height, int width, const char* op) {
    if (gt.channels != 1 || gt.height != height || gt.width != width) {
        throw ShapeError(std::string(op) + ": mask is " + std::to_string(gt.channels) + "x" +
                         std::to_string(gt.height) + "x" + std::to_string(gt.width) +
                         ", prediction is " + std::to_string(height) + "x" +
                         std::to_string(width));
    }
}

void check_finite(double v, const char* name) {
    if (!std::isfinite(v)) {
        throw NumericError(std::string("loss term '") + name + "' is not finite (" +
                           std::to_string(v) + ")");
    }
}

}  // namespace

LossWeights LossWeights::from_config(const Config& config) {
    LossWeights w;
    w.lambda1 = config.loss.lambda1;
    w.lambda2 = config.loss.lambda2;
    w.dice_eps = config.loss.dice_eps;
    w.mode = config.loss.dice_mode == "literal_union" ? ad::DiceMode::literal_union
                                                      : ad::DiceMode::dice;
    return w;
}

template <typename T>
ad::Var<T> dice_loss(const ad::Var<T>& probs, const Raster& gt, double eps, ad::DiceMode mode) {
    if (probs.value().ndim() != 2) {
        throw ShapeError("dice_loss expects [H, W] probabilities, got " + shape_str(probs.shape()));
    }
    check_mask(gt, probs.dim(0), probs.dim(1), "dice_loss");
    return ad::dice(probs, gt.plane(0), static_cast<T>(eps), mode);
}

template <typename T>
ad::Var<T> seg_ce_loss(const SegLogits<T>& logits, const Raster& gt) {
    if (logits.data.value().ndim() != 3 || logits.channels() != 2) {
        throw ShapeError("seg_ce_loss expects [2, H, W] logits, got " +
                         shape_str(logits.data.shape()));
    }
    check_mask(gt, logits.height(), logits.width(), "seg_ce_loss");
    return ad::binary_seg_cross_entropy(logits.data, gt.plane(0));
}

template <typename T>
ad::Var<T> seg_loss(const SegLogits<T>& logits, const Raster& gt, const LossWeights& w) {
    const ad::Var<T> ce = seg_ce_loss(logits, gt);
    const ad::Var<T> d =
        dice_loss(ad::foreground_probability(logits.data), gt, w.dice_eps, w.mode);
    return ad::add(ad::scale(d, static_cast<T>(w.lambda1)), ad::scale(ce, static_cast<T>(w.lambda2)));
}

template <typename T>
ad::Var<T> usm_loss(const std::vector<SegLogits<T>>& logits, const std::vector<Raster>& uv_gt,
                    const LossWeights& w) {
    if (logits.empty() || logits.size() != uv_gt.size()) {
        throw ShapeError("usm_loss: " + std::to_string(logits.size()) + " predictions for " +
                         std::to_string(uv_gt.size()) + " masks");
    }
    ad::Var<T> acc;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        const ad::Var<T> l = seg_loss(logits[k], uv_gt[k], w);
        acc = acc.defined() ? ad::add(acc, l) : l;
    }
    return ad::scale(acc, static_cast<T>(1.0 / static_cast<double>(logits.size())));
}

template <typename T>
ad::Var<T> bsm_loss(const SegLogits<T>& logits, const Raster& bev_gt, const LossWeights& w) {
    return seg_loss(logits, bev_gt, w);
}

LossReport total_loss(double usm, double bsm, double maptr_cls, double maptr_pts) {
    check_finite(usm, "usm");
    check_finite(bsm, "bsm");
    check_finite(maptr_cls, "maptr_cls");
    check_finite(maptr_pts, "maptr_pts");
    LossReport r;
    r.usm = usm;
    r.bsm = bsm;
    r.seg = usm + bsm;
    r.maptr_cls = maptr_cls;
    r.maptr_pts = maptr_pts;
    r.maptr = maptr_cls + maptr_pts;
    check_finite(r.maptr, "maptr");
    r.total = r.maptr + r.seg;
    check_finite(r.total, "total");
    return r;
}

LossReport total_loss(double usm, double bsm, double maptr) {
    check_finite(maptr, "maptr");
    LossReport r = total_loss(usm, bsm, 0.0, 0.0);
    r.maptr = maptr;
    r.total = r.maptr + r.seg;
    check_finite(r.total, "total");
    return r;
}

#define MAPSEG_INSTANTIATE_LOSSES(T)                                                          \
    template ad::Var<T> dice_loss<T>(const ad::Var<T>&, const Raster&, double, ad::DiceMode); \
    template ad::Var<T> seg_ce_loss<T>(const SegLogits<T>&, const Raster&);                   \
    template ad::Var<T> seg_loss<T>(const SegLogits<T>&, const Raster&, const LossWeights&);  \
    template ad::Var<T> usm_loss<T>(const std::vector<SegLogits<T>>&,                         \
                                    const std::vector<Raster>&, const LossWeights&);          \
    template ad::Var<T> bsm_loss<T>(const SegLogits<T>&, const Raster&, const LossWeights&);

MAPSEG_INSTANTIATE_LOSSES(float)
MAPSEG_INSTANTIATE_LOSSES(double)

}  // namespace mapseg
