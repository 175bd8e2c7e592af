#pragma once

// Camera images -> per-camera features (backbone + FPN, USM head) -> IPM lift
// and BEV encoder -> BSM head and semantic guidance -> vector map decoder.

#include <memory>
#include <vector>

#include "mapseg/autodiff.hpp"
#include "mapseg/config.hpp"
#include "mapseg/params.hpp"
#include "mapseg/scene.hpp"

namespace mapseg {

enum class FeatureFrame { uv, bev };
const char* to_string(FeatureFrame frame) noexcept;

/// [C, H, W] map tagged with its coordinate frame; `stride` is pixels (uv)
/// or grid cells (bev) per feature cell.
template <typename T>
struct FeatureMap {
    ad::Var<T> data;
    FeatureFrame frame = FeatureFrame::uv;
    int stride = 1;

    int channels() const { return data.dim(0); }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }
};

/// Two channels: background, foreground.
template <typename T>
using SegLogits = FeatureMap<T>;

/// Output of an ASPP-lite segmentation head: the logits and the
/// penultimate d_model-channel map they are computed from.
template <typename T>
struct SegHeadOutput {
    SegLogits<T> logits;
    FeatureMap<T> features;
};

template <typename T>
struct FusedBev {
    FeatureMap<T> concatenated;  // [2 d_model, H, W], channels (G, X)
    FeatureMap<T> projected;     // [d_model, H, W]
};

/// Plain values of one decoder output.
struct MapPrediction {
    Tensor<double> scores;  // [N, n_classes + 1] logits, background last
    Tensor<double> points;  // [N, P, 2] BEV meters
    int n_instances() const { return scores.dim(0); }
    int n_points() const { return points.dim(1); }
};

template <typename T>
struct MapPredictionVar {
    ad::Var<T> scores;
    ad::Var<T> points;
    MapPrediction values() const;
};

struct ForwardOptions {
    /// Evaluate the UV head (training only; it feeds nothing downstream).
    bool run_usm = true;
    /// Keep per-layer attention weights of the semantic guidance step.
    bool keep_sgm_attention = false;
};

template <typename T>
struct ForwardResult {
    std::vector<SegLogits<T>> usm_logits;  // per camera; empty if not run
    FeatureMap<T> x_bev;
    SegLogits<T> bsm_logits;  // undefined data when BSM is off
    FeatureMap<T> decoder_input;
    std::vector<MapPredictionVar<T>> layers;  // deep supervision, last = final
    std::vector<Tensor<T>> sgm_attention;
};

/// 2-D sinusoidal encoding, [H*W, d]; first half of the channels encodes the
/// row, second half the column. d must be divisible by 4.
template <typename T>
Tensor<T> positional_encoding_2d(int height, int width, int d);

/// Sampling table for the IPM lift: each grid cell centre (x, y, 0) is
/// projected into every camera, bilinearly sampled on its feature map
/// (stride `stride`, edge-clamped) where it lands inside the image with
/// positive depth, and averaged over the cameras that see it.
std::shared_ptr<const ad::GatherTable> build_ipm_table(const CameraRig& rig, const BevGrid& grid,
                                                       int feat_height, int feat_width,
                                                       int stride, double depth_eps);

/// Parameter-free IPM lift. Throws ConfigError when feature and camera
/// counts differ and FrameMismatchError for non-uv inputs.
template <typename T>
FeatureMap<T> ipm_lift(const std::vector<FeatureMap<T>>& uv_feats, const CameraRig& rig,
                       const BevGrid& grid, double depth_eps = kDefaultDepthEps);

template <typename T>
class MapSegModel {
public:
    /// Parameters are drawn from a stream seeded by config.train.seed.
    explicit MapSegModel(const Config& config);

    const Config& config() const noexcept { return config_; }
    ParamStore<T>& params() noexcept { return params_; }
    const ParamStore<T>& params() const noexcept { return params_; }

    /// image [3, H, W] -> [d_model, H/8, W/8]; H and W must be divisible by 8.
    FeatureMap<T> backbone_fpn(const ad::Var<T>& image) const;
    /// Logits upsampled to the image size (feature size times stride).
    SegHeadOutput<T> usm_head(const FeatureMap<T>& feat) const;
    FeatureMap<T> lift(const std::vector<FeatureMap<T>>& uv_feats, const CameraRig& rig) const;
    FeatureMap<T> bev_encoder(const FeatureMap<T>& bev,
                              std::vector<Tensor<T>>* attention = nullptr) const;
    SegHeadOutput<T> bsm_head(const FeatureMap<T>& x_bev) const;
    /// Single-head cross attention: queries from o_source, keys and values
    /// from x_bev, score scale 1/sqrt(d_k).
    FeatureMap<T> sgm_attend(const FeatureMap<T>& o_source, const FeatureMap<T>& x_bev,
                             std::vector<Tensor<T>>* attention = nullptr) const;
    FusedBev<T> sgm_fuse(const FeatureMap<T>& g_bev, const FeatureMap<T>& x_bev) const;
    /// Hierarchical query embeddings, [N * P, d_model]; row i*P + j is
    /// instance_embed[i] + point_embed[j].
    ad::Var<T> query_embeddings() const;
    /// One prediction per decoder layer.
    std::vector<MapPredictionVar<T>> decode(const FeatureMap<T>& y_bev) const;

    ForwardResult<T> forward(const SurroundFrame& frame, const ForwardOptions& options = {}) const;

private:
    void build(Rng& rng);
    ad::Var<T> p(const std::string& name) const { return params_.get(name); }
    /// Undefined when the parameter does not exist (bias-free configs).
    ad::Var<T> opt(const std::string& name) const;
    SegHeadOutput<T> aspp_head(const std::string& prefix, const FeatureMap<T>& x) const;
    ad::Var<T> conv(const std::string& name, const ad::Var<T>& x, ad::Conv2dParams cp) const;
    ad::Var<T> norm_act(const std::string& name, const ad::Var<T>& x) const;
    ad::Var<T> ln(const std::string& name, const ad::Var<T>& x) const;
    ad::Var<T> lin(const std::string& name, const ad::Var<T>& x) const;
    ad::Var<T> mha(const std::string& name, const ad::Var<T>& q, const ad::Var<T>& k,
                   const ad::Var<T>& v, int heads,
                   std::vector<Tensor<T>>* attention = nullptr) const;

    Config config_;
    ParamStore<T> params_;
};

/// [C, H, W] <-> [H*W, C]
template <typename T>
ad::Var<T> to_tokens(const ad::Var<T>& x);
template <typename T>
ad::Var<T> from_tokens(const ad::Var<T>& tokens, int height, int width);

}  // namespace mapseg
