#pragma once

// Tape-free reverse-mode differentiation: every op result keeps shared
// pointers to its parents plus a closure that pushes its gradient back.
// Dropping the last handle to a result frees that part of the graph.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mapseg/tensor.hpp"

namespace mapseg::ad {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until something flows back
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor<T>& grad_buffer() {
        if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    bool defined() const noexcept { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad = Tensor<T>(); }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    int dim(int i) const { return node_->value.dim(i); }
    const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

    /// Scalar value of a one-element result.
    T item() const { return node_->value[0]; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// While alive, op results record no parents (inference mode).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

template <typename T>
Var<T> constant(Tensor<T> value);

template <typename T>
Var<T> parameter(Tensor<T> value);

/// Seeds d(root)/d(root) = 1 and runs every reachable backward closure once
/// in reverse topological order. Gradients accumulate into leaves.
template <typename T>
void backward(const Var<T>& root);

// ---- elementwise ----------------------------------------------------------
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> silu(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);

// ---- shape ----------------------------------------------------------------
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
/// [m, n] -> [n, m]
template <typename T> Var<T> transpose(const Var<T>& a);
/// Concatenate along axis 0; trailing dims must agree.
template <typename T> Var<T> concat0(const std::vector<Var<T>>& parts);
/// Rows [begin, begin + count) along axis 0.
template <typename T> Var<T> slice0(const Var<T>& a, int begin, int count);

// ---- reductions -----------------------------------------------------------
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
/// sum_i w_i * a_i for a constant weight tensor of the same size.
template <typename T> Var<T> weighted_sum(const Var<T>& a, const Tensor<T>& weights);

// ---- linear algebra -------------------------------------------------------
/// [m, k] x [k, n] -> [m, n]
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x [L, in] * W[out, in]^T + b[out]; `bias` may be undefined.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// ---- image ops on [C, H, W] -----------------------------------------------
struct Conv2dParams {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
};
/// weight [O, C, k, k], bias [O] or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, Conv2dParams p);
/// Per-sample group normalization; gamma/beta [C] or undefined.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups,
                  T eps = T(1e-5));
/// Row-wise layer norm on [L, d].
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));
template <typename T> Var<T> avg_pool2(const Var<T>& x);
/// [C, H, W] -> [C, 1, 1]
template <typename T> Var<T> global_avg_pool(const Var<T>& x);
/// [C, 1, 1] -> [C, H, W]
template <typename T> Var<T> broadcast_spatial(const Var<T>& x, int height, int width);
/// Bilinear resize, half-pixel centers, edge clamped.
template <typename T> Var<T> upsample_bilinear(const Var<T>& x, int height, int width);

// ---- attention ------------------------------------------------------------
/// Multi-head scaled dot-product attention on pre-projected inputs.
/// q [Lq, d], k [Lk, d], v [Lk, dv]; heads split d and dv evenly.
/// If `weights_out` is given it receives one [Lq, Lk] row-stochastic matrix
/// per head.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, T score_scale,
                 std::vector<Tensor<T>>* weights_out = nullptr);

// ---- sparse sampling ------------------------------------------------------
/// Output cell `i` is sum over entries in [offsets[i], offsets[i+1]) of
/// weight * source[source][channel, index].
struct GatherTable {
    int out_height = 0;
    int out_width = 0;
    std::vector<int> offsets;
    std::vector<int> source;
    std::vector<int> index;
    std::vector<double> weight;
};
/// Sources are [C, h_k, w_k]; output [C, out_height, out_width].
template <typename T>
Var<T> gather(const std::vector<Var<T>>& sources, std::shared_ptr<const GatherTable> table);

// ---- losses and heads -----------------------------------------------------
/// Mean per-pixel two-class cross entropy; logits [2, H, W], mask H*W of 0/1.
template <typename T>
Var<T> binary_seg_cross_entropy(const Var<T>& logits, std::span<const std::uint8_t> mask);
/// sigmoid(l_fg - l_bg): [2, H, W] -> [H, W]
template <typename T> Var<T> foreground_probability(const Var<T>& logits);

enum class DiceMode { dice, literal_union };
/// Smoothed soft overlap loss on probabilities [H, W].
template <typename T>
Var<T> dice(const Var<T>& probs, std::span<const std::uint8_t> mask, T eps, DiceMode mode);

/// Weighted mean of per-row softmax cross entropy (focal if gamma > 0).
/// logits [N, K]; labels in [0, K); class_weight size K.
template <typename T>
Var<T> class_cross_entropy(const Var<T>& logits, std::span<const int> labels,
                           std::span<const double> class_weight, double focal_gamma);

/// Points [N, P, 2]. For each matched prediction, the minimum over the
/// candidate target orderings of mean_p(|dx|/sx + |dy|/sy); result is the
/// mean over matched predictions (0 when there are none).
struct PointTargets {
    std::vector<int> pred_index;
    /// candidates[m] is a list of orderings, each P*2 values.
    std::vector<std::vector<std::vector<double>>> candidates;
    double scale_x = 1.0;
    double scale_y = 1.0;
};
template <typename T>
Var<T> matched_point_l1(const Var<T>& points, const PointTargets& targets);

/// raw [M, 2] -> lo + sigmoid(raw) * (hi - lo) per column.
template <typename T>
Var<T> bounded_points(const Var<T>& raw, double x_lo, double x_hi, double y_lo, double y_hi);

}  // namespace mapseg::ad
