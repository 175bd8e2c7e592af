#include "mapseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mapseg/config.hpp"
#include "mapseg/losses.hpp"
#include "mapseg/matching.hpp"
#include "mapseg/model.hpp"
#include "mapseg/rng.hpp"

namespace mapseg {

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

GradcheckResult check_gradients(const std::string& op, const std::vector<ad::Var<double>>& leaves,
                                const std::function<ad::Var<double>()>& f, std::uint64_t seed,
                                int per_leaf, double h) {
    GradcheckResult res;
    res.op = op;
    for (auto leaf : leaves) leaf.zero_grad();
    ad::backward(f());
    std::vector<Tensor<double>> analytic;
    for (const auto& leaf : leaves) {
        analytic.push_back(leaf.grad().empty() ? Tensor<double>(leaf.shape()) : leaf.grad());
    }
    Rng rng(seed);
    for (std::size_t l = 0; l < leaves.size(); ++l) {
        auto leaf = leaves[l];
        const std::size_t n = leaf.value().size();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        if (n > static_cast<std::size_t>(per_leaf)) {
            for (int i = 0; i < per_leaf; ++i) {
                const int j = rng.uniform_int(i, static_cast<int>(n) - 1);
                std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
            }
            idx.resize(static_cast<std::size_t>(per_leaf));
        }
        for (std::size_t i : idx) {
            double& x = leaf.mutable_value()[i];
            const double x0 = x;
            double fp = 0.0;
            double fm = 0.0;
            {
                ad::NoGradGuard g;
                x = x0 + h;
                fp = f().item();
                x = x0 - h;
                fm = f().item();
            }
            x = x0;
            const double numeric = (fp - fm) / (2.0 * h);
            res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[l][i], numeric));
            ++res.n_checked;
        }
    }
    return res;
}

namespace {

Config tiny_config() {
    Config c;
    c.scene.image_height = 16;
    c.scene.image_width = 16;
    c.scene.n_cameras = 4;
    c.scene.grid_height = 8;
    c.scene.grid_width = 4;
    c.model.d_model = 8;
    c.model.backbone_widths = {4, 6, 8};
    c.model.norm_groups = 2;
    c.model.aspp_width = 4;
    c.model.aspp_rates = {1, 2};
    c.encoder.heads = 2;
    c.encoder.ffn = 16;
    c.sgm.d_k = 8;
    c.decoder.n_instances = 4;
    c.decoder.n_points = 4;
    c.decoder.layers = 2;
    c.decoder.heads = 2;
    c.decoder.ffn = 16;
    return c;
}

ad::Var<double> random_leaf(Shape shape, double lo, double hi, Rng& rng) {
    return ad::parameter(uniform_tensor<double>(std::move(shape), lo, hi, rng));
}

/// Scalar probe: sum of the output against fixed random weights.
struct Probe {
    Tensor<double> w;
    ad::Var<double> operator()(const ad::Var<double>& out, Rng& rng) {
        if (w.empty()) w = uniform_tensor<double>(out.shape(), -1.0, 1.0, rng);
        return ad::weighted_sum(out, w);
    }
};

std::vector<ad::Var<double>> with_params(std::vector<ad::Var<double>> inputs,
                                         const ParamStore<double>& params,
                                         const std::string& prefix) {
    for (const auto& name : params.names()) {
        if (name.rfind(prefix, 0) == 0) inputs.push_back(params.get(name));
    }
    return inputs;
}

Raster random_mask(int h, int w, Rng& rng) {
    Raster m(1, h, w);
    for (auto& v : m.data) v = rng.bernoulli(0.4) ? 1 : 0;
    return m;
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed) {
    std::vector<GradcheckResult> out;
    const Config cfg = tiny_config();
    const MapSegModel<double> model(cfg);
    const auto& params = model.params();
    Rng rng(mix_seed(seed, 0x6C4E));
    const int d = cfg.model.d_model;
    const int bh = cfg.scene.grid_height;
    const int bw = cfg.scene.grid_width;
    auto bev_map = [](const ad::Var<double>& v) { return FeatureMap<double>{v, FeatureFrame::bev, 1}; };

    {
        auto image = random_leaf({3, cfg.scene.image_height, cfg.scene.image_width}, 0.0, 1.0, rng);
        Probe probe;
        out.push_back(check_gradients(
            "backbone_fpn", with_params(with_params({image}, params, "backbone."), params, "fpn."),
            [&] { return probe(model.backbone_fpn(image).data, rng); }, mix_seed(seed, 1)));
    }
    {
        auto feat = random_leaf({d, 2, 2}, -1.0, 1.0, rng);
        Probe probe;
        out.push_back(check_gradients(
            "usm_head", with_params({feat}, params, "usm."),
            [&] { return probe(model.usm_head({feat, FeatureFrame::uv, 8}).logits.data, rng); },
            mix_seed(seed, 2)));
    }
    {
        auto xb = random_leaf({d, bh, bw}, -1.0, 1.0, rng);
        Probe probe;
        out.push_back(check_gradients(
            "bsm_head", with_params({xb}, params, "bsm."),
            [&] { return probe(model.bsm_head(bev_map(xb)).logits.data, rng); }, mix_seed(seed, 3)));
    }
    {
        auto os = random_leaf({d, bh, bw}, -1.0, 1.0, rng);
        auto xb = random_leaf({d, bh, bw}, -1.0, 1.0, rng);
        std::vector<ad::Var<double>> leaves = {os, xb};
        for (const char* n : {"sgm.f_q.", "sgm.f_k.", "sgm.f_v."}) leaves = with_params(leaves, params, n);
        Probe probe;
        out.push_back(check_gradients(
            "sgm_attend", leaves,
            [&] { return probe(model.sgm_attend(bev_map(os), bev_map(xb)).data, rng); },
            mix_seed(seed, 4)));
    }
    {
        auto g = random_leaf({d, bh, bw}, -1.0, 1.0, rng);
        auto xb = random_leaf({d, bh, bw}, -1.0, 1.0, rng);
        Probe probe;
        out.push_back(check_gradients(
            "sgm_fuse", with_params({g, xb}, params, "sgm.fuse"),
            [&] { return probe(model.sgm_fuse(bev_map(g), bev_map(xb)).projected.data, rng); },
            mix_seed(seed, 5)));
    }
    {
        auto yb = random_leaf({d, bh, bw}, -1.0, 1.0, rng);
        Probe ps;
        Probe pp;
        out.push_back(check_gradients(
            "decode", with_params({yb}, params, "decoder."),
            [&] {
                const auto layers = model.decode(bev_map(yb));
                return ad::add(ps(layers.back().scores, rng), pp(layers.back().points, rng));
            },
            mix_seed(seed, 6), 8));
    }
    {
        auto probs = random_leaf({6, 5}, 0.05, 0.95, rng);
        const Raster gt = random_mask(6, 5, rng);
        out.push_back(check_gradients(
            "dice_loss", {probs}, [&] { return dice_loss(probs, gt, 1.0); }, mix_seed(seed, 7), 30));
    }
    {
        auto logits = random_leaf({2, 6, 5}, -2.0, 2.0, rng);
        const Raster gt = random_mask(6, 5, rng);
        out.push_back(check_gradients(
            "seg_ce_loss", {logits},
            [&] { return seg_ce_loss(SegLogits<double>{logits, FeatureFrame::bev, 1}, gt); },
            mix_seed(seed, 8), 60));
    }
    {
        const int n = cfg.decoder.n_instances;
        const int p = cfg.decoder.n_points;
        const BevRange range = cfg.scene.range();
        auto scores = random_leaf({n, kNumClasses + 1}, -2.0, 2.0, rng);
        auto points = random_leaf({n, p, 2}, -5.0, 5.0, rng);
        std::vector<MapElement> gt;
        for (int i = 0; i < 3; ++i) {
            MapElement e;
            e.cls = static_cast<ElementClass>(i);
            e.closed = e.cls == ElementClass::ped_crossing;
            if (e.closed) {
                const double x0 = rng.uniform(-8.0, 4.0);
                const double y0 = rng.uniform(-5.0, 2.0);
                e.points = {{x0, y0}, {x0 + 3.0, y0}, {x0 + 3.0, y0 + 2.5}, {x0, y0 + 2.5}};
            } else {
                for (int k = 0; k < 5; ++k) {
                    e.points.push_back({-12.0 + 6.0 * k + rng.uniform(-1.0, 1.0), rng.uniform(-6.0, 6.0)});
                }
            }
            gt.push_back(std::move(e));
        }
        const auto opts = MaptrLossOptions::from_config(cfg);
        const auto targets = prepare_targets(gt, p);
        MapPredictionVar<double> pred{scores, points};
        const MatchResult match = hungarian_match(pred.values(), std::span<const GtTarget>(targets),
                                                  opts.weights, range);
        out.push_back(check_gradients(
            "maptr_loss", {scores, points},
            [&] { return maptr_loss(pred, std::span<const GtTarget>(targets), match, opts).total; },
            mix_seed(seed, 9), 64));
    }
    return out;
}

}  // namespace mapseg
