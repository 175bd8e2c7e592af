#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mapseg/autodiff.hpp"

namespace mapseg {

struct GradcheckResult {
    std::string op;
    double max_rel_error = 0.0;
    int n_checked = 0;
    double tolerance = 1e-4;
    bool passed() const { return n_checked > 0 && max_rel_error <= tolerance; }
};

/// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-5);

/// Central differences of a scalar function against reverse-mode gradients,
/// for up to `per_leaf` entries of every leaf (all of them when smaller).
GradcheckResult check_gradients(const std::string& op, const std::vector<ad::Var<double>>& leaves,
                                const std::function<ad::Var<double>()>& f, std::uint64_t seed,
                                int per_leaf = 16, double h = 1e-5);

/// Every differentiable stage of the pipeline on small random inputs:
/// backbone_fpn, usm_head, bsm_head, sgm_attend, sgm_fuse, decode,
/// dice_loss, seg_ce_loss, maptr_loss.
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed = 0);

}  // namespace mapseg
