#include "mapseg/ablation.hpp"

#include <cmath>
#include <map>

#include "mapseg/error.hpp"
#include "mapseg/rng.hpp"
#include "mapseg/train.hpp"

namespace mapseg {

std::vector<Variant> module_variants() {
    auto toggles = [](bool usm, bool bsm, bool sgm) {
        auto b = [](bool v) { return std::string(v ? "true" : "false"); };
        return std::vector<std::string>{"usm.enabled=" + b(usm), "bsm.enabled=" + b(bsm),
                                        "sgm.enabled=" + b(sgm)};
    };
    return {
        {"baseline", toggles(false, false, false)},
        {"USM", toggles(true, false, false)},
        {"BSM", toggles(false, true, false)},
        {"USM + BSM", toggles(true, true, false)},
        {"USM + BSM + SGM", toggles(true, true, true)},
    };
}

std::vector<Variant> resolution_variants() {
    const std::vector<std::string> full = {"usm.enabled=true", "bsm.enabled=true", "sgm.enabled=true"};
    auto with = [&](std::vector<std::string> extra) {
        std::vector<std::string> v = full;
        v.insert(v.end(), extra.begin(), extra.end());
        return v;
    };
    return {
        {"tiny", with({"scene.image_height=32", "scene.image_width=48"})},
        {"tiny", with({"scene.image_height=64", "scene.image_width=96"})},
        {"wide", with({"scene.image_height=64", "scene.image_width=96",
                       "model.backbone_widths=[48,64,96]", "model.backbone_name=\"wide\""})},
    };
}

std::vector<SurroundFrame> ablation_eval_set(const SceneConfig& scene, int eval_frames) {
    SceneConfig s = scene;
    s.seed = mix_seed(scene.seed, 0xE7A1);
    s.n_frames = eval_frames;
    return eval_frames > 0 ? generate_dataset(s) : std::vector<SurroundFrame>{};
}

namespace {

AblationRow train_and_score(const Config& cfg, const std::vector<SurroundFrame>& train_frames,
                            const std::vector<SurroundFrame>& eval_frames) {
    Trainer trainer(cfg, train_frames);
    trainer.run();
    ad::NoGradGuard guard;
    std::vector<MapPrediction> preds;
    std::vector<std::vector<MapElement>> gts;
    for (const auto& f : eval_frames) {
        const auto out = trainer.model().forward(f, {.run_usm = false});
        preds.push_back(out.layers.back().values());
        gts.push_back(f.elements);
    }
    return make_row("", cfg, evaluate(preds, gts, cfg.eval));
}

}  // namespace

std::vector<AblationRow> run_ablation(const Config& base, const std::vector<SurroundFrame>& train_frames,
                                      const std::vector<Variant>& variants,
                                      const std::function<void(const std::string&)>& log) {
    json base_tree;
    to_json(base_tree, base);
    std::map<std::string, std::vector<SurroundFrame>> train_sets;
    std::map<std::string, std::vector<SurroundFrame>> eval_sets;
    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        AblationRow row;
        row.label = v.label;
        try {
            Config cfg = load_config(base_tree, v.overrides);
            cfg.train.epochs = cfg.ablate.epochs;
            validate(cfg);
            row.height = cfg.scene.image_height;
            row.width = cfg.scene.image_width;
            row.backbone = cfg.model.backbone_name;
            json scene_tree;
            to_json(scene_tree, cfg.scene);
            const std::string key = scene_tree.dump();
            const bool same_scene = cfg.scene == base.scene;
            if (!same_scene && !train_sets.count(key)) train_sets[key] = generate_dataset(cfg.scene);
            if (!eval_sets.count(key)) eval_sets[key] = ablation_eval_set(cfg.scene, cfg.ablate.eval_frames);
            if (log) log("ablate: training " + v.label + " (" + std::to_string(row.height) + "x" +
                         std::to_string(row.width) + ")");
            AblationRow scored = train_and_score(cfg, same_scene ? train_frames : train_sets[key],
                                                 eval_sets[key]);
            row.per_class_ap = scored.per_class_ap;
            row.map = scored.map;
        } catch (const std::exception& e) {
            row.failed = true;
            const auto* err = dynamic_cast<const Error*>(&e);
            row.error = std::string(err ? to_string(err->kind()) : "error") + ": " + e.what();
            if (log) log("ablate: " + v.label + " failed: " + row.error);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

AblationReport make_ablation_report(std::vector<AblationRow> modules,
                                    std::vector<AblationRow> resolution) {
    AblationReport r;
    r.modules = std::move(modules);
    r.resolution = std::move(resolution);
    if (!r.modules.empty()) r.text += render_table("Module ablation", "Module", r.modules);
    if (!r.modules.empty() && !r.resolution.empty()) r.text += "\n";
    if (!r.resolution.empty()) {
        r.text += render_table("Resolution and backbone", "backbone", r.resolution);
    }
    r.data = json::object();
    r.data["modules"] = rows_to_json(r.modules);
    r.data["resolution"] = rows_to_json(r.resolution);
    return r;
}

double max_mean_deviation(const std::vector<AblationRow>& rows) {
    double worst = 0.0;
    for (const auto& r : rows) {
        if (r.failed) continue;
        double sum = 0.0;
        int n = 0;
        for (double ap : r.per_class_ap) {
            if (std::isnan(ap)) continue;
            sum += ap;
            ++n;
        }
        if (n == 0) continue;
        worst = std::max(worst, std::abs(r.map - sum / n));
    }
    return worst;
}

}  // namespace mapseg
