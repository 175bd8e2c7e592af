#include "mapseg/config.hpp"

#include <fstream>
#include <sstream>

#include "mapseg/error.hpp"

namespace mapseg {

void to_json(json& j, const CountRange& r) { j = json::array({r.min, r.max}); }

void from_json(const json& j, CountRange& r) {
    if (!j.is_array() || j.size() != 2) {
        throw ConfigError("count ranges are written as [min, max]");
    }
    r.min = j.at(0).get<int>();
    r.max = j.at(1).get<int>();
}

#define MAPSEG_FIELDS_SCENE(X)                                                                 \
    X(seed) X(n_frames) X(n_cameras) X(image_height) X(image_width) X(hfov_deg)               \
    X(camera_height) X(camera_pitch_deg) X(x_min) X(x_max) X(y_min) X(y_max) X(grid_height)   \
    X(grid_width) X(half_width) X(depth_eps) X(n_boundaries) X(n_dividers) X(n_crossings)
#define MAPSEG_FIELDS_MODEL(X)                                                                 \
    X(d_model) X(backbone_widths) X(norm_groups) X(bias) X(aspp_rates) X(aspp_width)          \
    X(backbone_name)
#define MAPSEG_FIELDS_ENCODER(X) X(layers) X(heads) X(ffn)
#define MAPSEG_FIELDS_TOGGLE(X) X(enabled)
#define MAPSEG_FIELDS_SGM(X) X(enabled) X(query_source) X(d_k)
#define MAPSEG_FIELDS_DECODER(X) X(n_instances) X(n_points) X(layers) X(heads) X(ffn)
#define MAPSEG_FIELDS_LOSS(X)                                                                  \
    X(lambda1) X(lambda2) X(dice_eps) X(dice_mode) X(w_cls) X(w_pts) X(cls_loss)              \
    X(focal_gamma) X(bg_weight)
#define MAPSEG_FIELDS_OPTIM(X)                                                                 \
    X(lr0) X(beta1) X(beta2) X(eps) X(weight_decay) X(lr_min_ratio) X(grad_clip)
#define MAPSEG_FIELDS_TRAIN(X)                                                                 \
    X(batch_size) X(epochs) X(seed) X(hflip) X(checkpoint_every) X(max_steps)
#define MAPSEG_FIELDS_EVAL(X) X(thresholds) X(score_min) X(n_sample_points) X(interpolation)
#define MAPSEG_FIELDS_ABLATE(X) X(epochs) X(eval_frames)

#define MAPSEG_TO(field) j[#field] = c.field;
#define MAPSEG_FROM(field)                                                                     \
    if (j.contains(#field)) j.at(#field).get_to(c.field);

#define MAPSEG_JSON_IO(Type, FIELDS)                                                           \
    void to_json(json& j, const Type& c) {                                                     \
        j = json::object();                                                                    \
        FIELDS(MAPSEG_TO)                                                                      \
    }                                                                                          \
    void from_json(const json& j, Type& c) { FIELDS(MAPSEG_FROM) }

MAPSEG_JSON_IO(SceneConfig, MAPSEG_FIELDS_SCENE)
MAPSEG_JSON_IO(ModelConfig, MAPSEG_FIELDS_MODEL)
MAPSEG_JSON_IO(EncoderConfig, MAPSEG_FIELDS_ENCODER)
MAPSEG_JSON_IO(ToggleConfig, MAPSEG_FIELDS_TOGGLE)
MAPSEG_JSON_IO(SgmConfig, MAPSEG_FIELDS_SGM)
MAPSEG_JSON_IO(DecoderConfig, MAPSEG_FIELDS_DECODER)
MAPSEG_JSON_IO(LossConfig, MAPSEG_FIELDS_LOSS)
MAPSEG_JSON_IO(OptimConfig, MAPSEG_FIELDS_OPTIM)
MAPSEG_JSON_IO(TrainConfig, MAPSEG_FIELDS_TRAIN)
MAPSEG_JSON_IO(EvalConfig, MAPSEG_FIELDS_EVAL)
MAPSEG_JSON_IO(AblateConfig, MAPSEG_FIELDS_ABLATE)

#define MAPSEG_SECTIONS(X)                                                                     \
    X(scene) X(model) X(encoder) X(usm) X(bsm) X(sgm) X(decoder) X(loss) X(optim) X(train)    \
    X(eval) X(ablate)

void to_json(json& j, const Config& c) {
    j = json::object();
    MAPSEG_SECTIONS(MAPSEG_TO)
}

namespace {

void from_json_config(const json& j, Config& c) { MAPSEG_SECTIONS(MAPSEG_FROM) }

/// Every key of `user` must exist in `defaults` with a compatible JSON kind.
void check_keys(const json& user, const json& defaults, const std::string& prefix) {
    if (!user.is_object()) {
        throw ConfigError("config section '" + (prefix.empty() ? std::string("<root>") : prefix) +
                          "' must be an object");
    }
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!defaults.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
        const json& def = defaults.at(it.key());
        if (def.is_object()) {
            check_keys(it.value(), def, key);
            continue;
        }
        const bool ok = (def.is_number() && it.value().is_number()) ||
                        (def.is_boolean() && it.value().is_boolean()) ||
                        (def.is_string() && it.value().is_string()) ||
                        (def.is_array() && it.value().is_array());
        if (!ok) {
            throw ConfigError("config key '" + key + "' expects " + def.type_name() + ", got " +
                              it.value().type_name());
        }
        if (def.is_number_integer() && !it.value().is_number_integer()) {
            throw ConfigError("config key '" + key + "' expects an integer");
        }
        if (def.is_number_unsigned() && it.value().is_number_integer() &&
            it.value().get<std::int64_t>() < 0) {
            throw ConfigError("config key '" + key + "' must be non-negative");
        }
    }
}

void merge(json& base, const json& user) {
    for (auto it = user.begin(); it != user.end(); ++it) {
        if (it.value().is_object()) {
            merge(base[it.key()], it.value());
        } else {
            base[it.key()] = it.value();
        }
    }
}

void check(bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
}

}  // namespace

Config config_from_json(const json& overrides) {
    json tree;
    to_json(tree, Config{});
    if (!overrides.is_null()) {
        check_keys(overrides, tree, "");
        merge(tree, overrides);
    }
    Config c;
    try {
        from_json_config(tree, c);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config value: ") + e.what());
    }
    validate(c);
    return c;
}

SceneConfig scene_config_from_json(const json& overrides) {
    json tree = SceneConfig{};
    if (!overrides.is_null()) {
        check_keys(overrides, tree, "scene");
        merge(tree, overrides);
    }
    SceneConfig c;
    try {
        tree.get_to(c);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid scene config value: ") + e.what());
    }
    validate(c);
    return c;
}

void apply_override(json& tree, const std::string& assignment) {
    const auto eq = assignment.find('=');
    check(eq != std::string::npos && eq > 0,
          "override '" + assignment + "' must look like key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &tree;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    check(!parts.empty(), "empty override key");
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object()) *node = json::object();
        node = &(*node)[parts[i]];
    }
    if (!node->is_object()) *node = json::object();
    (*node)[parts.back()] = std::move(value);
}

Config load_config(const json& base, const std::vector<std::string>& overrides) {
    json tree = base.is_null() ? json::object() : base;
    for (const auto& o : overrides) apply_override(tree, o);
    return config_from_json(tree);
}

Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
    json tree = json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        check(static_cast<bool>(in), "cannot open config file '" + path + "'");
        tree = json::parse(in, nullptr, false);
        check(!tree.is_discarded(), "config file '" + path + "' is not valid JSON");
    }
    return load_config(tree, overrides);
}

void validate(const SceneConfig& c) {
    check(c.n_frames >= 0, "scene.n_frames must be >= 0");
    check(c.n_cameras >= 1 && c.n_cameras <= 8, "scene.n_cameras must be in [1, 8]");
    check(c.image_height > 0 && c.image_width > 0, "scene image size must be positive");
    check(c.hfov_deg > 0.0 && c.hfov_deg < 170.0, "scene.hfov_deg must be in (0, 170)");
    check(c.camera_height > 0.0, "scene.camera_height must be positive");
    check(c.half_width > 0.0, "scene.half_width must be positive");
    check(c.depth_eps > 0.0, "scene.depth_eps must be positive");
    c.grid().validate();
    for (const CountRange* r : {&c.n_boundaries, &c.n_dividers, &c.n_crossings}) {
        check(r->min >= 0 && r->min <= r->max, "element count ranges need 0 <= min <= max");
    }
    check(c.n_boundaries.max <= 2, "scene.n_boundaries allows at most 2 road edges");
    check(c.n_dividers.max <= 6, "scene.n_dividers allows at most 6 dividers");
    check(c.n_crossings.max <= 3, "scene.n_crossings allows at most 3 crossings");
}

void validate(const Config& c) {
    validate(c.scene);
    const auto& m = c.model;
    check(m.d_model > 0, "model.d_model must be positive");
    check(m.backbone_widths.size() == 3, "model.backbone_widths needs three stage widths");
    for (int w : m.backbone_widths) check(w > 0, "model.backbone_widths must be positive");
    check(m.norm_groups > 0, "model.norm_groups must be positive");
    for (int w : m.backbone_widths) {
        check(w % m.norm_groups == 0, "backbone widths must be divisible by model.norm_groups");
    }
    check(m.d_model % m.norm_groups == 0, "model.d_model must be divisible by model.norm_groups");
    check(m.aspp_width > 0 && m.aspp_width % m.norm_groups == 0,
          "model.aspp_width must be a positive multiple of model.norm_groups");
    check(!m.aspp_rates.empty(), "model.aspp_rates must not be empty");
    for (int r : m.aspp_rates) check(r >= 1, "model.aspp_rates must be >= 1");
    check(c.scene.image_height % 8 == 0 && c.scene.image_width % 8 == 0,
          "scene image size must be divisible by 8 (backbone stride)");
    check(c.encoder.layers >= 0 && c.encoder.heads > 0 && m.d_model % c.encoder.heads == 0,
          "encoder.heads must divide model.d_model");
    check(c.encoder.ffn > 0, "encoder.ffn must be positive");
    check(c.sgm.query_source == "features" || c.sgm.query_source == "logits",
          "sgm.query_source must be 'features' or 'logits'");
    check(c.sgm.d_k > 0, "sgm.d_k must be positive");
    check(!c.sgm.enabled || c.bsm.enabled, "sgm.enabled requires bsm.enabled (queries come from BSM)");
    const auto& d = c.decoder;
    check(d.n_instances > 0 && d.n_points >= 2, "decoder needs n_instances > 0 and n_points >= 2");
    check(d.layers >= 1 && d.heads > 0 && m.d_model % d.heads == 0 && d.ffn > 0,
          "decoder layers/heads/ffn invalid for model.d_model");
    const auto& l = c.loss;
    check(l.lambda1 >= 0.0 && l.lambda2 >= 0.0, "loss.lambda1 and loss.lambda2 must be >= 0");
    check(l.dice_eps > 0.0, "loss.dice_eps must be positive");
    check(l.dice_mode == "dice" || l.dice_mode == "literal_union",
          "loss.dice_mode must be 'dice' or 'literal_union'");
    check(l.cls_loss == "ce" || l.cls_loss == "focal", "loss.cls_loss must be 'ce' or 'focal'");
    check(l.w_cls >= 0.0 && l.w_pts >= 0.0 && l.bg_weight >= 0.0, "loss weights must be >= 0");
    const auto& o = c.optim;
    check(o.lr0 > 0.0, "optim.lr0 must be positive");
    check(o.beta1 >= 0.0 && o.beta1 < 1.0 && o.beta2 >= 0.0 && o.beta2 < 1.0,
          "optim betas must be in [0, 1)");
    check(o.eps > 0.0 && o.weight_decay >= 0.0 && o.grad_clip >= 0.0,
          "optim eps/weight_decay/grad_clip invalid");
    check(o.lr_min_ratio >= 0.0 && o.lr_min_ratio <= 1.0, "optim.lr_min_ratio must be in [0, 1]");
    check(c.train.batch_size >= 1, "train.batch_size must be >= 1");
    check(c.train.epochs >= 1, "train.epochs must be >= 1");
    check(c.train.checkpoint_every >= 0 && c.train.max_steps >= 0,
          "train.checkpoint_every and train.max_steps must be >= 0");
    const auto& e = c.eval;
    check(!e.thresholds.empty(), "eval.thresholds must not be empty");
    for (std::size_t i = 0; i < e.thresholds.size(); ++i) {
        check(e.thresholds[i] > 0.0 && (i == 0 || e.thresholds[i] > e.thresholds[i - 1]),
              "eval.thresholds must be positive and strictly increasing");
    }
    check(e.n_sample_points >= 2, "eval.n_sample_points must be >= 2");
    check(e.interpolation == "all_point" || e.interpolation == "11_point",
          "eval.interpolation must be 'all_point' or '11_point'");
    check(c.ablate.epochs >= 1 && c.ablate.eval_frames >= 0, "ablate settings invalid");
}

namespace {

json schema_of(const json& value) {
    json s;
    if (value.is_object()) {
        s["type"] = "object";
        s["additionalProperties"] = false;
        json props = json::object();
        for (auto it = value.begin(); it != value.end(); ++it) props[it.key()] = schema_of(it.value());
        s["properties"] = props;
    } else if (value.is_boolean()) {
        s["type"] = "boolean";
    } else if (value.is_number_integer()) {
        s["type"] = "integer";
        if (value.is_number_unsigned()) s["minimum"] = 0;
    } else if (value.is_number()) {
        s["type"] = "number";
    } else if (value.is_string()) {
        s["type"] = "string";
    } else if (value.is_array()) {
        s["type"] = "array";
        if (!value.empty()) s["items"] = schema_of(value.front());
    }
    if (!value.is_object()) s["default"] = value;
    return s;
}

}  // namespace

json config_schema() {
    json defaults;
    to_json(defaults, Config{});
    json s = schema_of(defaults);
    json out;
    out["$schema"] = "https://json-schema.org/draft/2020-12/schema";
    out["title"] = "mapseg run configuration";
    out["description"] =
        "Partial documents are allowed; omitted keys take the listed defaults. Unknown keys are "
        "rejected.";
    for (auto it = s.begin(); it != s.end(); ++it) out[it.key()] = it.value();
    out["properties"]["sgm"]["properties"]["query_source"]["enum"] = {"features", "logits"};
    out["properties"]["loss"]["properties"]["dice_mode"]["enum"] = {"dice", "literal_union"};
    out["properties"]["loss"]["properties"]["cls_loss"]["enum"] = {"ce", "focal"};
    out["properties"]["eval"]["properties"]["interpolation"]["enum"] = {"all_point", "11_point"};
    return out;
}

}  // namespace mapseg
