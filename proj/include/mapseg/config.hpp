#pragma once

// Run configuration. Every tunable constant of the pipeline is reachable by a
// dotted key (e.g. "sgm.enabled", "loss.lambda1"); see docs/config.schema.json.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mapseg/geometry.hpp"

namespace mapseg {

using json = nlohmann::ordered_json;

struct CountRange {
    int min = 0;
    int max = 0;
    bool operator==(const CountRange&) const = default;
};

struct SceneConfig {
    std::uint64_t seed = 0;
    int n_frames = 64;
    int n_cameras = 4;
    int image_height = 64;
    int image_width = 96;
    double hfov_deg = 100.0;
    double camera_height = 1.6;
    double camera_pitch_deg = 25.0;
    double x_min = -15.0;
    double x_max = 15.0;
    double y_min = -7.5;
    double y_max = 7.5;
    int grid_height = 100;
    int grid_width = 50;
    double half_width = 0.5;
    double depth_eps = 1e-3;
    CountRange n_boundaries{2, 2};
    CountRange n_dividers{1, 3};
    CountRange n_crossings{0, 2};

    BevRange range() const { return {x_min, x_max, y_min, y_max}; }
    BevGrid grid() const { return {range(), grid_height, grid_width}; }
    bool operator==(const SceneConfig&) const = default;
};

struct ModelConfig {
    int d_model = 64;
    std::vector<int> backbone_widths{32, 48, 64};
    int norm_groups = 8;
    bool bias = true;
    std::vector<int> aspp_rates{1, 2, 4};
    int aspp_width = 32;
    /// Label used in the resolution/backbone report.
    std::string backbone_name = "tiny";
    bool operator==(const ModelConfig&) const = default;
};

struct EncoderConfig {
    int layers = 1;
    int heads = 4;
    int ffn = 128;
    bool operator==(const EncoderConfig&) const = default;
};

struct ToggleConfig {
    bool enabled = true;
    bool operator==(const ToggleConfig&) const = default;
};

struct SgmConfig {
    bool enabled = true;
    /// "features" (BSM penultimate map) or "logits" (2-channel BSM output)
    std::string query_source = "features";
    int d_k = 64;
    bool operator==(const SgmConfig&) const = default;
};

struct DecoderConfig {
    int n_instances = 25;
    int n_points = 10;
    int layers = 6;
    int heads = 4;
    int ffn = 128;
    bool operator==(const DecoderConfig&) const = default;
};

struct LossConfig {
    double lambda1 = 15.0;
    double lambda2 = 0.5;
    double dice_eps = 1.0;
    /// "dice" (sum-of-masses denominator) or "literal_union"
    std::string dice_mode = "dice";
    double w_cls = 2.0;
    double w_pts = 5.0;
    /// "ce" or "focal"
    std::string cls_loss = "ce";
    double focal_gamma = 2.0;
    double bg_weight = 1.0;
    bool operator==(const LossConfig&) const = default;
};

struct OptimConfig {
    double lr0 = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double lr_min_ratio = 0.01;
    double grad_clip = 35.0;
    bool operator==(const OptimConfig&) const = default;
};

struct TrainConfig {
    int batch_size = 2;
    int epochs = 300;
    std::uint64_t seed = 0;
    bool hflip = false;
    int checkpoint_every = 0;
    std::int64_t max_steps = 0;
    bool operator==(const TrainConfig&) const = default;
};

struct EvalConfig {
    std::vector<double> thresholds{0.5, 1.0, 1.5};
    double score_min = 0.0;
    int n_sample_points = 100;
    /// "all_point" or "11_point"
    std::string interpolation = "all_point";
    bool operator==(const EvalConfig&) const = default;
};

struct AblateConfig {
    int epochs = 4;
    int eval_frames = 16;
    bool operator==(const AblateConfig&) const = default;
};

struct Config {
    SceneConfig scene;
    ModelConfig model;
    EncoderConfig encoder;
    ToggleConfig usm;
    ToggleConfig bsm;
    SgmConfig sgm;
    DecoderConfig decoder;
    LossConfig loss;
    OptimConfig optim;
    TrainConfig train;
    EvalConfig eval;
    AblateConfig ablate;
    bool operator==(const Config&) const = default;
};

void to_json(json& j, const CountRange& r);
void from_json(const json& j, CountRange& r);
void to_json(json& j, const SceneConfig& c);
void from_json(const json& j, SceneConfig& c);
void to_json(json& j, const EvalConfig& c);
void from_json(const json& j, EvalConfig& c);
void to_json(json& j, const Config& c);

/// Merges `overrides` onto the defaults. Unknown keys, type mismatches and
/// invariant violations raise ConfigError.
Config config_from_json(const json& overrides);
SceneConfig scene_config_from_json(const json& overrides);

/// Applies "dotted.key=value" to a config tree. The value is parsed as JSON
/// when possible, otherwise taken as a string. Unknown keys are rejected when
/// the tree is turned into a Config.
void apply_override(json& tree, const std::string& assignment);

/// Reads a JSON config file (may be empty/partial) and applies overrides.
Config load_config(const std::string& path, const std::vector<std::string>& overrides);
Config load_config(const json& base, const std::vector<std::string>& overrides);

void validate(const SceneConfig& c);
void validate(const Config& c);

/// JSON Schema (draft 2020-12) describing every key and its default.
json config_schema();

}  // namespace mapseg
