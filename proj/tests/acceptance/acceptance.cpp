// Acceptance checks. Prints one "PASS <id>: ..." or "FAIL <id>: ..." line per
// criterion; exit status is the number of failures. `--only <id>` runs one.

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "mapseg/ablation.hpp"
#include "mapseg/evaluation.hpp"
#include "mapseg/gradcheck.hpp"
#include "mapseg/losses.hpp"
#include "mapseg/matching.hpp"
#include "mapseg/train.hpp"

using namespace mapseg;
using mapseg::fixtures::desk_config;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    const char* id;
    std::function<Outcome()> run;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = run_gradcheck_suite(0);
    const double t = seconds_since(t0);
    double worst = 0.0;
    std::string worst_op;
    bool ok = results.size() == 9;
    for (const auto& r : results) {
        ok = ok && r.passed();
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            worst_op = r.op;
        }
    }
    ok = ok && t <= 120.0;
    return {ok, fmt("%zu ops, max rel err %.2e (%s), %.1f s", results.size(), worst,
                    worst_op.c_str(), t)};
}

Outcome loss_identities() {
    Config cfg = desk_config(4);
    cfg.train.max_steps = 50;
    cfg.train.epochs = 25;
    Trainer trainer(cfg, generate_dataset(cfg.scene));
    trainer.run();
    int bad = 0;
    for (const auto& r : trainer.history()) {
        const LossReport& l = r.loss;
        if (l.seg != l.usm + l.bsm || l.total != l.maptr + l.seg || l.maptr != l.maptr_cls + l.maptr_pts) ++bad;
    }
    const int n = static_cast<int>(trainer.history().size());
    return {n == 50 && bad == 0, fmt("%d reports, %d violating seg=usm+bsm / total=maptr+seg", n, bad)};
}

Outcome dice_closed_forms() {
    Raster gt(1, 20, 10);
    for (int i = 0; i < 100; ++i) gt.data[static_cast<std::size_t>(2 * i)] = 1;
    Tensor<double> same({20, 10});
    for (std::size_t i = 0; i < gt.data.size(); ++i) same[i] = gt.data[i];
    const double perfect = dice_loss(ad::constant(same), gt, 1.0).item();
    const double disjoint = dice_loss(ad::constant(Tensor<double>({20, 10})), gt, 1.0).item();
    const double want = 1.0 - 1.0 / 101.0;
    const bool ok = std::abs(perfect) <= 1e-12 && std::abs(disjoint - want) <= 1e-9;
    return {ok, fmt("perfect %.3e, disjoint %.15f (1 - 1/101 = %.15f)", perfect, disjoint, want)};
}

Outcome attention_contract() {
    Config cfg = desk_config(1);
    cfg.model.d_model = 16;
    cfg.model.norm_groups = 4;
    cfg.model.aspp_width = 8;
    cfg.sgm.d_k = 16;
    const MapSegModel<double> model(cfg);
    Rng rng(7);
    const int d = cfg.model.d_model;
    const int h = 6;
    const int w = 5;
    auto bev = [&](Tensor<double> t) { return FeatureMap<double>{ad::constant(std::move(t)), FeatureFrame::bev, 1}; };
    const auto o = bev(uniform_tensor<double>({d, h, w}, -2.0, 2.0, rng));
    const auto x = bev(uniform_tensor<double>({d, h, w}, -2.0, 2.0, rng));

    std::vector<Tensor<double>> attn;
    const auto g = model.sgm_attend(o, x, &attn);
    double row_err = 0.0;
    double min_w = 1.0;
    for (const auto& a : attn) {
        for (int i = 0; i < a.dim(0); ++i) {
            double s = 0.0;
            for (int j = 0; j < a.dim(1); ++j) {
                s += a.at(i, j);
                min_w = std::min(min_w, a.at(i, j));
            }
            row_err = std::max(row_err, std::abs(s - 1.0));
        }
    }

    // constant keys/values: every output cell is f_V(c)
    Tensor<double> cst({d, h, w});
    std::vector<double> c(static_cast<std::size_t>(d));
    for (auto& v : c) v = rng.uniform(-1.0, 1.0);
    for (int ch = 0; ch < d; ++ch) {
        for (int i = 0; i < h * w; ++i) cst[static_cast<std::size_t>(ch) * h * w + i] = c[ch];
    }
    const auto gc = model.sgm_attend(o, bev(cst)).data.value();
    const auto& wv = model.params().get("sgm.f_v.weight").value();
    const auto& bv = model.params().get("sgm.f_v.bias").value();
    double fixed_err = 0.0;
    for (int oc = 0; oc < gc.dim(0); ++oc) {
        double want = bv[oc];
        for (int ic = 0; ic < d; ++ic) want += wv.at(oc, ic) * c[ic];
        for (int i = 0; i < h * w; ++i) {
            fixed_err = std::max(fixed_err, std::abs(gc[static_cast<std::size_t>(oc) * h * w + i] - want));
        }
    }

    const auto fused = model.sgm_fuse(g, x).concatenated.data.value();
    const auto& gv = g.data.value();
    const auto& xv = x.data.value();
    const std::size_t half = gv.size();
    const bool slices = fused.dim(0) == 2 * d && std::equal(gv.values().begin(), gv.values().end(), fused.values().begin()) &&
                        std::equal(xv.values().begin(), xv.values().end(), fused.values().begin() + static_cast<std::ptrdiff_t>(half));
    const bool ok = !attn.empty() && row_err <= 1e-6 && min_w >= 0.0 && fixed_err <= 1e-6 && slices;
    return {ok, fmt("row-sum err %.1e, fixed-point err %.1e, slices %s", row_err, fixed_err,
                    slices ? "exact" : "differ")};
}

Outcome matching_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(2024);
    const BevRange range;
    const MatchWeights weights;
    int mismatches = 0;
    for (int inst = 0; inst < 200; ++inst) {
        const int n = rng.uniform_int(1, 6);
        const auto pred = fixtures::random_prediction(rng, n, 10, range);
        const auto gt = fixtures::random_gt(rng, n, range);
        const auto targets = prepare_targets(gt, 10);
        const auto cost = match_cost_matrix(pred, targets, weights, range);
        const MatchResult m = hungarian_match(pred, std::span<const GtTarget>(targets), weights, range);
        if (m.total_cost != fixtures::brute_force_min(cost)) ++mismatches;
    }
    const double t = seconds_since(t0);
    return {mismatches == 0 && t <= 30.0, fmt("200 instances, %d mismatches, %.1f s", mismatches, t)};
}

Outcome ordering_invariance() {
    Rng rng(99);
    Config cfg = desk_config(1);
    const auto opts = MaptrLossOptions::from_config(cfg);
    const BevRange range = cfg.scene.range();
    int changed = 0;
    for (int inst = 0; inst < 100; ++inst) {
        const int n = 6;
        const int p = 8;
        const auto pv = fixtures::random_prediction(rng, n, p, range);
        MapPredictionVar<double> pred{ad::constant(pv.scores), ad::constant(pv.points)};
        auto gt = fixtures::random_gt(rng, rng.uniform_int(1, 4), range);
        auto loss = [&](const std::vector<MapElement>& g) {
            return maptr_loss_layers(std::vector<MapPredictionVar<double>>{pred}, g, opts).total.item();
        };
        const double base = loss(gt);
        auto alt = gt;
        for (auto& e : alt) {
            if (e.closed) {
                std::rotate(e.points.begin(), e.points.begin() + rng.uniform_int(1, static_cast<int>(e.points.size()) - 1), e.points.end());
                if (rng.bernoulli(0.5)) std::reverse(e.points.begin(), e.points.end());
            } else {
                std::reverse(e.points.begin(), e.points.end());
            }
        }
        if (loss(alt) != base) ++changed;
    }
    return {changed == 0, fmt("100 instances, %d losses changed", changed)};
}

Outcome metric_sanity() {
    std::vector<std::string> notes;
    bool ok = true;

    const auto frames = generate_dataset(desk_config(8).scene);
    std::vector<std::vector<ScoredElement>> dets;
    std::vector<std::vector<MapElement>> gts;
    for (const auto& f : frames) {
        gts.push_back(f.elements);
        std::vector<ScoredElement> d;
        for (const auto& e : f.elements) d.push_back({e, 1.0});
        dets.push_back(std::move(d));
    }
    const EvalResult res = evaluate(dets, gts, EvalConfig{});
    ok = ok && res.map == 1.0;
    notes.push_back(fmt("map(pred=gt) %.6f", res.map));

    Rng rng(5);
    double chamfer_err = 0.0;
    for (int t = 0; t < 100; ++t) {
        std::vector<Vec2> a(static_cast<std::size_t>(rng.uniform_int(1, 40)));
        std::vector<Vec2> b(static_cast<std::size_t>(rng.uniform_int(1, 40)));
        for (auto& p : a) p = {rng.uniform(-10, 10), rng.uniform(-10, 10)};
        for (auto& p : b) p = {rng.uniform(-10, 10), rng.uniform(-10, 10)};
        double ab = 0.0;
        for (const auto& p : a) {
            double m = 1e300;
            for (const auto& q : b) m = std::min(m, std::sqrt((p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y)));
            ab += m;
        }
        double ba = 0.0;
        for (const auto& q : b) {
            double m = 1e300;
            for (const auto& p : a) m = std::min(m, std::sqrt((p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y)));
            ba += m;
        }
        const double want = 0.5 * (ab / a.size() + ba / b.size());
        chamfer_err = std::max(chamfer_err, std::abs(chamfer_distance(a, b) - want));
    }
    ok = ok && chamfer_err <= 1e-9;
    notes.push_back(fmt("chamfer err %.1e", chamfer_err));

    std::ifstream in(std::string(MAPSEG_FIXTURE_DIR) + "/published_tables.json");
    const json tables = json::parse(in);
    for (const auto& row : tables.at("module_ablation")) {
        const double mean = (row.at("ped_crossing").get<double>() + row.at("divider").get<double>() +
                             row.at("boundary").get<double>()) / 3.0;
        const double dev = std::abs(row.at("map").get<double>() - mean);
        if (dev > 5e-5) {
            ok = false;
            notes.push_back(fmt("table row '%s' map %.4f vs class mean %.6f (|dev| %.1e > 5e-5)",
                                row.at("label").get<std::string>().c_str(), row.at("map").get<double>(), mean, dev));
        }
    }
    if (ok) notes.push_back("table rows consistent");
    std::string detail;
    for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
    return {ok, detail};
}

Outcome overfit() {
    const auto t0 = std::chrono::steady_clock::now();
    Config cfg = desk_config(8);
    cfg.optim.lr0 = 1e-3;
    cfg.train.epochs = 100;  // 400 steps
    const auto frames = generate_dataset(cfg.scene);
    Trainer trainer(cfg, frames);
    trainer.run();
    const auto& hist = trainer.history();
    const double initial = hist.front().loss.total;
    double final = 0.0;
    const int per_epoch = trainer.steps_per_epoch();
    for (int i = 0; i < per_epoch; ++i) final += hist[hist.size() - 1 - i].loss.total;
    final /= per_epoch;

    ad::NoGradGuard guard;
    long inter = 0;
    long uni = 0;
    std::vector<MapPrediction> preds;
    std::vector<std::vector<MapElement>> gts;
    for (const auto& f : frames) {
        const auto out = trainer.model().forward(f, {.run_usm = false});
        const auto& l = out.bsm_logits.data.value();
        const std::size_t n = f.bev_mask.data.size();
        for (std::size_t i = 0; i < n; ++i) {
            const bool p = l[n + i] > l[i];
            const bool g = f.bev_mask.data[i] != 0;
            inter += p && g;
            uni += p || g;
        }
        preds.push_back(out.layers.back().values());
        gts.push_back(f.elements);
    }
    const double iou = uni ? static_cast<double>(inter) / uni : 0.0;
    EvalConfig ec;
    ec.thresholds = {1.5};
    const double map15 = evaluate(preds, gts, ec).map;
    const double t = seconds_since(t0);
    const bool ok = final < 0.25 * initial && iou >= 0.90 && map15 >= 0.5 && t <= 600.0;
    return {ok, fmt("%zu steps, loss %.3f -> %.3f (%.1f%%), BEV IoU %.4f, mAP@1.5 %.4f, %.0f s",
                    hist.size(), initial, final, 100.0 * final / initial, iou, map15, t)};
}

Outcome ablation() {
    Config cfg = desk_config(64);
    cfg.ablate.epochs = 2;
    const auto frames = generate_dataset(cfg.scene);
    const auto t0 = std::chrono::steady_clock::now();
    auto modules = run_ablation(cfg, frames, module_variants());
    auto resolution = run_ablation(cfg, frames, resolution_variants());
    const AblationReport report = make_ablation_report(modules, resolution);
    std::fputs(report.text.c_str(), stdout);

    const std::vector<std::string> want = {"baseline", "USM", "BSM", "USM + BSM", "USM + BSM + SGM"};
    bool ok = modules.size() == 5 && resolution.size() == 3;
    int failed = 0;
    for (std::size_t i = 0; i < modules.size(); ++i) ok = ok && modules[i].label == want[i];
    for (const auto* rows : {&modules, &resolution}) {
        for (const auto& r : *rows) {
            failed += r.failed ? 1 : 0;
            for (double ap : r.per_class_ap) ok = ok && (std::isnan(ap) || (ap >= 0.0 && ap <= 1.0));
        }
    }
    const double dev = std::max(max_mean_deviation(modules), max_mean_deviation(resolution));
    ok = ok && failed == 0 && dev <= 5e-5;
    return {ok, fmt("5 + 3 rows, %d failed, max |map - class mean| %.1e, %.0f s", failed, dev,
                    seconds_since(t0))};
}

Outcome determinism_resume() {
    Config cfg = desk_config(4);
    cfg.train.epochs = 3;  // 6 steps
    const auto frames = generate_dataset(cfg.scene);
    Trainer a(cfg, frames);
    a.run();
    Trainer b(cfg, frames);
    b.run();
    auto same_history = [](const std::vector<StepRecord>& x, const std::vector<StepRecord>& y) {
        if (x.size() != y.size()) return false;
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (to_json(x[i]).dump() != to_json(y[i]).dump()) return false;
        }
        return true;
    };
    auto same_params = [](const Trainer& x, const Trainer& y) {
        for (const auto& n : x.model().params().names()) {
            if (!(x.model().params().get(n).value() == y.model().params().get(n).value())) return false;
        }
        return true;
    };
    const bool repeat = same_history(a.history(), b.history()) && same_params(a, b);

    const auto path = std::filesystem::temp_directory_path() / "mapseg_acceptance_resume.ckpt";
    Trainer first(cfg, frames);
    first.run(3);
    save_checkpoint(path, first.checkpoint());
    Trainer resumed(load_checkpoint(path), frames);
    resumed.run();
    std::filesystem::remove(path);
    const bool resume = same_history(a.history(), resumed.history()) && same_params(a, resumed);
    return {repeat && resume, fmt("repeat run %s, resume after 3 of 6 steps %s", repeat ? "identical" : "differs",
                                  resume ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all = {
        {"gradients", gradients},
        {"loss_identities", loss_identities},
        {"dice_closed_forms", dice_closed_forms},
        {"attention_contract", attention_contract},
        {"matching_oracle", matching_oracle},
        {"ordering_invariance", ordering_invariance},
        {"metric_sanity", metric_sanity},
        {"overfit", overfit},
        {"ablation", ablation},
        {"determinism_resume", determinism_resume},
    };
    std::string only;
    for (int i = 1; i < argc; ++i) {
        if (!std::strcmp(argv[i], "--only") && i + 1 < argc) {
            only = argv[++i];
        } else if (!std::strcmp(argv[i], "--list")) {
            for (const auto& c : all) std::printf("%s\n", c.id);
            return 0;
        } else {
            std::fprintf(stderr, "usage: %s [--list] [--only <id>]\n", argv[0]);
            return 2;
        }
    }
    int failures = 0;
    int ran = 0;
    for (const auto& c : all) {
        if (!only.empty() && only != c.id) continue;
        ++ran;
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, o.detail.c_str());
        std::fflush(stdout);
        failures += o.pass ? 0 : 1;
    }
    if (ran == 0) {
        std::fprintf(stderr, "unknown criterion '%s'\n", only.c_str());
        return 2;
    }
    return failures;
}
