// mapseg command line: synth, train, eval, ablate, gradcheck, config.
// Failures print one JSON line {"error": kind, "message": ...} on stderr and
// exit 1; usage errors exit 2.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mapseg/ablation.hpp"
#include "mapseg/config.hpp"
#include "mapseg/error.hpp"
#include "mapseg/evaluation.hpp"
#include "mapseg/gradcheck.hpp"
#include "mapseg/io.hpp"
#include "mapseg/train.hpp"

namespace fs = std::filesystem;
using namespace mapseg;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> sets;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "JSON config file");
        app->add_option("--set", sets, "override, key=value (repeatable)")->take_all();
    }
    Config load() const { return load_config(config_path, sets); }
};

void print_error(const std::string& kind, const std::string& message) {
    json j;
    j["error"] = kind;
    j["message"] = message;
    std::cerr << j.dump() << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file(path, text);
}

/// Frames from a dataset directory, or synthesized from the config. The
/// dataset's scene settings win over the config's.
std::vector<SurroundFrame> frames_for(Config& cfg, const std::string& data_dir) {
    if (data_dir.empty()) return generate_dataset(cfg.scene);
    Dataset ds = load_dataset(data_dir);
    if (!(ds.config == cfg.scene)) {
        std::cerr << "note: using scene settings from " << data_dir << "\n";
        cfg.scene = ds.config;
        validate(cfg);
    }
    return std::move(ds.frames);
}

std::string step_name(std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%06lld.ckpt", static_cast<long long>(step));
    return buf;
}

int cmd_synth(const Common& common, const std::string& out) {
    const Config cfg = common.load();
    const auto frames = generate_dataset(cfg.scene);
    save_dataset(frames, cfg.scene, out);
    std::cout << "wrote " << frames.size() << " frames to " << out << "\n";
    return 0;
}

struct TrainArgs {
    std::string data;
    std::string out;
    std::string resume;
    std::string init_weights;
    std::int64_t steps = -1;
    int log_every = 10;
};

int cmd_train(const Common& common, const TrainArgs& a) {
    fs::create_directories(a.out);
    std::unique_ptr<Trainer> trainer;
    if (!a.resume.empty()) {
        Checkpoint ckpt = load_checkpoint(a.resume);
        if (!common.config_path.empty() || !common.sets.empty()) {
            std::cerr << "note: --resume uses the checkpoint's config; --config/--set ignored\n";
        }
        Config cfg = ckpt.config;
        auto frames = frames_for(cfg, a.data);
        if (!(cfg == ckpt.config)) {
            throw ConfigError("dataset scene settings differ from the checkpoint's");
        }
        trainer = std::make_unique<Trainer>(ckpt, std::move(frames));
    } else {
        Config cfg = common.load();
        auto frames = frames_for(cfg, a.data);
        trainer = std::make_unique<Trainer>(cfg, std::move(frames));
        if (!a.init_weights.empty()) load_weights(trainer->model(), load_checkpoint(a.init_weights));
    }
    const Config& cfg = trainer->config();
    {
        json tree;
        to_json(tree, cfg);
        write_text(fs::path(a.out) / "config.json", tree.dump(2) + "\n");
    }
    std::ofstream metrics(fs::path(a.out) / "metrics.jsonl", std::ios::app);
    if (!metrics) throw IoError("cannot open " + (fs::path(a.out) / "metrics.jsonl").string());
    const int every = cfg.train.checkpoint_every;
    trainer->run(a.steps, [&](const StepRecord& r) {
        metrics << to_json(r).dump() << "\n";
        metrics.flush();
        if (a.log_every > 0 && (r.step % a.log_every == 0 || trainer->done())) {
            std::printf("step %lld/%lld epoch %d lr %.3e total %.4f seg %.4f maptr %.4f\n",
                        static_cast<long long>(r.step), static_cast<long long>(trainer->total_steps()),
                        r.epoch, r.lr, r.loss.total, r.loss.seg, r.loss.maptr);
            std::fflush(stdout);
        }
        if (every > 0 && trainer->step() % every == 0) {
            save_checkpoint(fs::path(a.out) / step_name(trainer->step()), trainer->checkpoint());
        }
    });
    save_checkpoint(fs::path(a.out) / "last.ckpt", trainer->checkpoint());
    std::cout << "checkpoint " << (fs::path(a.out) / "last.ckpt").string() << " at step "
              << trainer->step() << "\n";
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string out;
    int overlays = 4;
};

int cmd_eval(const Common& common, const EvalArgs& a) {
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    json base;
    to_json(base, ckpt.config);
    if (!common.config_path.empty()) {
        std::ifstream in(common.config_path);
        if (!in) throw ConfigError("cannot open config file '" + common.config_path + "'");
        json file = json::parse(in, nullptr, false);
        if (file.is_discarded()) throw ConfigError("config file '" + common.config_path + "' is not valid JSON");
        base.merge_patch(file);
    }
    Config cfg = load_config(base, common.sets);
    auto frames = frames_for(cfg, a.data);
    MapSegModel<float> model(cfg);
    load_weights(model, ckpt);

    ad::NoGradGuard guard;
    std::vector<std::vector<ScoredElement>> dets;
    std::vector<std::vector<MapElement>> gts;
    for (const auto& f : frames) {
        const auto out = model.forward(f, {.run_usm = false});
        dets.push_back(detections_from(out.layers.back().values(), cfg.eval.score_min));
        gts.push_back(f.elements);
    }
    const EvalResult res = evaluate(dets, gts, cfg.eval);
    const AblationRow row = make_row("checkpoint", cfg, res);
    const std::string table = render_table("Evaluation", "Module", {row});

    json report = rows_to_json({row}).at(0);
    report["step"] = ckpt.step;
    report["frames"] = frames.size();
    report["thresholds"] = cfg.eval.thresholds;
    json per = json::object();
    for (int c = 0; c < kNumClasses; ++c) {
        json cls;
        cls["n_gt"] = res.n_gt[c];
        cls["n_pred"] = res.n_pred[c];
        cls["ap_per_threshold"] = res.per_threshold_ap[c];
        per[class_key(static_cast<ElementClass>(c))] = cls;
    }
    report["classes"] = per;

    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "report.txt", table);
    write_text(fs::path(a.out) / "report.json", report.dump(2) + "\n");
    for (int i = 0; i < std::min<int>(a.overlays, static_cast<int>(frames.size())); ++i) {
        char name[48];
        std::snprintf(name, sizeof name, "overlays/frame_%05d.png", i);
        fs::create_directories(fs::path(a.out) / "overlays");
        write_overlay(fs::path(a.out) / name, frames[i].bev_range, gts[i], dets[i]);
    }
    std::cout << table;
    return 0;
}

int cmd_ablate(const Common& common, const std::string& data, const std::string& out,
               const std::string& which) {
    Config cfg = common.load();
    const auto frames = frames_for(cfg, data);
    auto log = [](const std::string& s) {
        std::cerr << s << "\n";
    };
    std::vector<AblationRow> modules;
    std::vector<AblationRow> resolution;
    if (which == "modules" || which == "both") modules = run_ablation(cfg, frames, module_variants(), log);
    if (which == "resolution" || which == "both") {
        resolution = run_ablation(cfg, frames, resolution_variants(), log);
    }
    const AblationReport report = make_ablation_report(std::move(modules), std::move(resolution));
    fs::create_directories(out);
    write_text(fs::path(out) / "ablation.txt", report.text);
    write_text(fs::path(out) / "ablation.json", report.data.dump(2) + "\n");
    std::cout << report.text;
    return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
    bool ok = true;
    for (const auto& r : run_gradcheck_suite(seed)) {
        std::printf("%-14s max_rel_error %.3e  checked %4d  %s\n", r.op.c_str(), r.max_rel_error,
                    r.n_checked, r.passed() ? "ok" : "FAIL");
        ok = ok && r.passed();
    }
    std::fflush(stdout);
    if (!ok) {
        print_error("numeric", "gradient check exceeded tolerance");
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MapSeg: vectorized map construction with segmentation guidance"};
    app.require_subcommand(1);
    Common common;

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string synth_out = "data";
    synth->add_option("--out", synth_out, "dataset directory")->capture_default_str();
    common.attach(synth);

    auto* train = app.add_subcommand("train", "train a model");
    TrainArgs targs;
    train->add_option("--data", targs.data, "dataset directory (default: synthesize from config)");
    train->add_option("--out", targs.out, "run directory")->required();
    train->add_option("--resume", targs.resume, "checkpoint to resume from");
    train->add_option("--init-weights", targs.init_weights, "warm-start parameters from a checkpoint");
    train->add_option("--steps", targs.steps, "stop after this many more steps");
    train->add_option("--log-every", targs.log_every, "print every N steps (0: quiet)");
    common.attach(train);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    EvalArgs eargs;
    eval->add_option("--checkpoint", eargs.checkpoint, "checkpoint file")->required();
    eval->add_option("--data", eargs.data, "dataset directory (default: synthesize from config)");
    eval->add_option("--out", eargs.out, "report directory")->required();
    eval->add_option("--overlays", eargs.overlays, "number of frames to render")->capture_default_str();
    common.attach(eval);

    auto* ablate = app.add_subcommand("ablate", "module and resolution ablation tables");
    std::string ablate_data;
    std::string ablate_out = "ablation";
    std::string which = "both";
    ablate->add_option("--data", ablate_data, "training dataset (default: synthesize from config)");
    ablate->add_option("--out", ablate_out, "report directory")->capture_default_str();
    ablate->add_option("--tables", which, "modules, resolution or both")
        ->check(CLI::IsMember({"modules", "resolution", "both"}))
        ->capture_default_str();
    common.attach(ablate);

    auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of every differentiable op");
    std::uint64_t grad_seed = 0;
    grad->add_option("--seed", grad_seed, "input seed")->capture_default_str();

    auto* cfgcmd = app.add_subcommand("config", "print the resolved config or its schema");
    bool schema = false;
    cfgcmd->add_flag("--schema", schema, "print the JSON schema instead");
    common.attach(cfgcmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return 2;
    }

    try {
        if (*synth) return cmd_synth(common, synth_out);
        if (*train) return cmd_train(common, targs);
        if (*eval) return cmd_eval(common, eargs);
        if (*ablate) return cmd_ablate(common, ablate_data, ablate_out, which);
        if (*grad) return cmd_gradcheck(grad_seed);
        if (*cfgcmd) {
            json out;
            if (schema) {
                out = config_schema();
            } else {
                to_json(out, common.load());
            }
            std::cout << out.dump(2) << "\n";
            return 0;
        }
    } catch (const Error& e) {
        print_error(to_string(e.kind()), e.what());
        return 1;
    } catch (const json::exception& e) {
        print_error("format", e.what());
        return 1;
    } catch (const fs::filesystem_error& e) {
        print_error("io", e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 1;
    }
    return 2;
}
