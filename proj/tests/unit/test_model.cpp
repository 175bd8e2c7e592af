#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "mapseg/error.hpp"
#include "mapseg/gradcheck.hpp"
#include "mapseg/model.hpp"

using namespace mapseg;

namespace {

/// Narrow model so double-precision forward passes stay fast.
Config narrow_config() {
    Config c = fixtures::desk_config(1);
    c.model.d_model = 16;
    c.model.backbone_widths = {8, 12, 16};
    c.model.norm_groups = 4;
    c.model.aspp_width = 8;
    c.encoder.heads = 2;
    c.encoder.ffn = 32;
    c.sgm.d_k = 16;
    c.decoder.heads = 2;
    c.decoder.ffn = 32;
    return c;
}

FeatureMap<double> bev_of(Tensor<double> t) {
    return {ad::constant(std::move(t)), FeatureFrame::bev, 1};
}

void zero_param(MapSegModel<double>& m, const std::string& name) {
    auto v = m.params().get(name);
    v.mutable_value().fill(0.0);
}

}  // namespace

TEST(Backbone, ShapeAtDefaultSize) {
    const Config cfg;
    const MapSegModel<float> model(cfg);
    Rng rng(1);
    const auto img = ad::constant(uniform_tensor<float>({3, 64, 96}, 0.0, 1.0, rng));
    ad::NoGradGuard g;
    const auto f = model.backbone_fpn(img);
    EXPECT_EQ(f.data.shape(), (Shape{64, 8, 12}));
    EXPECT_EQ(f.frame, FeatureFrame::uv);
    EXPECT_EQ(f.stride, 8);
    const auto usm = model.usm_head(f);
    EXPECT_EQ(usm.logits.data.shape(), (Shape{2, 64, 96}));
}

TEST(Backbone, IndivisibleSizeIsShapeError) {
    const MapSegModel<float> model(Config{});
    const auto img = ad::constant(Tensor<float>({3, 60, 90}));
    try {
        model.backbone_fpn(img);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("8"), std::string::npos);
    }
}

TEST(Backbone, ZeroImageBiasFreeGivesZeroFeatures) {
    Config cfg = narrow_config();
    cfg.model.bias = false;
    const MapSegModel<double> model(cfg);
    const auto f = model.backbone_fpn(ad::constant(Tensor<double>({3, 32, 48})));
    for (double v : f.data.value().values()) ASSERT_EQ(v, 0.0);
}

TEST(Backbone, SharedWeightsAcrossCameras) {
    const Config cfg = narrow_config();
    const MapSegModel<double> model(cfg);
    const auto frame = generate_scene(3, cfg.scene);
    // per-camera features do not depend on the camera slot
    const auto a = model.backbone_fpn(ad::constant(image_to_tensor<double>(frame.images[0]))).data.value();
    const auto b = model.backbone_fpn(ad::constant(image_to_tensor<double>(frame.images[2]))).data.value();
    SurroundFrame swapped = frame;
    std::swap(swapped.images[0], swapped.images[2]);
    EXPECT_EQ(model.backbone_fpn(ad::constant(image_to_tensor<double>(swapped.images[2]))).data.value(), a);
    EXPECT_EQ(model.backbone_fpn(ad::constant(image_to_tensor<double>(swapped.images[0]))).data.value(), b);
}

TEST(UsmHead, WrongFrameRejected) {
    const MapSegModel<double> model(narrow_config());
    const auto bev = bev_of(Tensor<double>({16, 4, 4}));
    EXPECT_THROW(model.usm_head(bev), FrameMismatchError);
    const FeatureMap<double> uv{ad::constant(Tensor<double>({16, 4, 4})), FeatureFrame::uv, 8};
    EXPECT_THROW(model.bsm_head(uv), FrameMismatchError);
}

TEST(UsmHead, InferenceInert) {
    Config cfg = narrow_config();
    MapSegModel<double> model(cfg);
    const auto frame = generate_scene(1, cfg.scene);
    const auto with = model.forward(frame, {.run_usm = true});
    const auto without = model.forward(frame, {.run_usm = false});
    EXPECT_FALSE(with.usm_logits.empty());
    EXPECT_TRUE(without.usm_logits.empty());
    EXPECT_EQ(with.layers.back().values().scores, without.layers.back().values().scores);
    EXPECT_EQ(with.layers.back().values().points, without.layers.back().values().points);
    for (const auto& n : model.params().names()) {
        if (n.rfind("usm.", 0) == 0) zero_param(model, n);
    }
    const auto zeroed = model.forward(frame, {.run_usm = false});
    EXPECT_EQ(zeroed.layers.back().values().points, without.layers.back().values().points);
}

TEST(BsmHead, ShapesAtDefaultGrid) {
    const Config cfg;
    const MapSegModel<float> model(cfg);
    ad::NoGradGuard g;
    Rng rng(2);
    const FeatureMap<float> x{ad::constant(uniform_tensor<float>({64, 100, 50}, -1, 1, rng)), FeatureFrame::bev, 1};
    const auto out = model.bsm_head(x);
    EXPECT_EQ(out.logits.data.shape(), (Shape{2, 100, 50}));
    EXPECT_EQ(out.features.data.shape(), (Shape{64, 100, 50}));
    const auto fused = model.sgm_fuse(x, x);
    EXPECT_EQ(fused.concatenated.data.shape(), (Shape{128, 100, 50}));
    EXPECT_EQ(fused.projected.data.shape(), (Shape{64, 100, 50}));
}

TEST(BsmHead, Deterministic) {
    const MapSegModel<double> model(narrow_config());
    Rng rng(4);
    const auto x = bev_of(uniform_tensor<double>({16, 6, 4}, -1, 1, rng));
    EXPECT_EQ(model.bsm_head(x).logits.data.value(), model.bsm_head(x).logits.data.value());
}

TEST(Ipm, InvisibleCellsAreZeroAndConstantsPropagate) {
    const Config cfg = narrow_config();
    SceneConfig sc = cfg.scene;
    sc.n_cameras = 1;
    const CameraRig rig = make_rig(sc);
    const BevGrid grid = sc.grid();
    std::vector<FeatureMap<double>> feats = {
        {ad::constant(Tensor<double>({3, 8, 12}, 2.5)), FeatureFrame::uv, 8}};
    const auto out = ipm_lift(feats, rig, grid).data.value();
    int seen = 0;
    int unseen = 0;
    const Camera& cam = rig.cameras[0];
    for (int i = 0; i < grid.height; ++i) {
        for (int j = 0; j < grid.width; ++j) {
            const Vec2 c = grid.cell_center(i, j);
            const auto uv = project_to_uv(Vec3{c.x, c.y, 0.0}, cam);
            const bool vis = uv && uv->u >= -0.5 && uv->u <= cam.image_width - 0.5 && uv->v >= -0.5 &&
                             uv->v <= cam.image_height - 0.5;
            for (int ch = 0; ch < 3; ++ch) {
                const double v = out.at(ch, i, j);
                if (vis) {
                    EXPECT_NEAR(v, 2.5, 1e-12);
                } else {
                    EXPECT_EQ(v, 0.0);
                }
            }
            (vis ? seen : unseen) += 1;
        }
    }
    EXPECT_GT(seen, 0);
    EXPECT_GT(unseen, 0);
}

TEST(Ipm, BilinearOracleOneCamera) {
    Rng rng(8);
    const BevGrid grid{{-15, 15, -7.5, 7.5}, 40, 20};
    int visible = 0;
    for (int trial = 0; trial < 5; ++trial) {
        const Camera cam = make_camera({rng.uniform(-2, 2), rng.uniform(-2, 2), 1.6}, rng.uniform(-3.1, 3.1),
                                       rng.uniform(0.2, 0.6), 1.7, 64, 96);
        const CameraRig rig{{cam}};
        const int fh = 8;
        const int fw = 12;
        const int stride = 8;
        Tensor<double> f = uniform_tensor<double>({2, fh, fw}, -1, 1, rng);
        const auto out = ipm_lift(std::vector<FeatureMap<double>>{{ad::constant(f), FeatureFrame::uv, stride}}, rig, grid)
                             .data.value();
        for (int i = 0; i < grid.height; ++i) {
            for (int j = 0; j < grid.width; ++j) {
                const Vec2 c = grid.cell_center(i, j);
                const auto uv = project_to_uv(Vec3{c.x, c.y, 0.0}, cam);
                const bool vis = uv && uv->u >= -0.5 && uv->u <= 95.5 && uv->v >= -0.5 && uv->v <= 63.5;
                visible += vis;
                for (int ch = 0; ch < 2; ++ch) {
                    double want = 0.0;
                    if (vis) {
                        // feature cell k covers pixels [8k, 8k+8), centre at 8k + 3.5
                        const double x = std::clamp((uv->u - 3.5) / 8.0, 0.0, fw - 1.0);
                        const double y = std::clamp((uv->v - 3.5) / 8.0, 0.0, fh - 1.0);
                        const int x0 = static_cast<int>(x);
                        const int y0 = static_cast<int>(y);
                        const int x1 = std::min(x0 + 1, fw - 1);
                        const int y1 = std::min(y0 + 1, fh - 1);
                        const double ax = x - x0;
                        const double ay = y - y0;
                        want = (1 - ay) * ((1 - ax) * f.at(ch, y0, x0) + ax * f.at(ch, y0, x1)) +
                               ay * ((1 - ax) * f.at(ch, y1, x0) + ax * f.at(ch, y1, x1));
                    }
                    EXPECT_NEAR(out.at(ch, i, j), want, 1e-6);
                }
            }
        }
    }
    EXPECT_GT(visible, 200);
}

TEST(Ipm, CameraCountMismatchIsConfigError) {
    const CameraRig rig = make_rig(SceneConfig{});
    std::vector<FeatureMap<double>> feats = {{ad::constant(Tensor<double>({3, 8, 12})), FeatureFrame::uv, 8}};
    EXPECT_THROW(ipm_lift(feats, rig, SceneConfig{}.grid()), ConfigError);
}

TEST(Encoder, ShapeAndRowStochastic) {
    const Config cfg = narrow_config();
    const MapSegModel<double> model(cfg);
    Rng rng(5);
    const auto x = bev_of(uniform_tensor<double>({16, 6, 4}, -1, 1, rng));
    std::vector<Tensor<double>> attn;
    const auto y = model.bev_encoder(x, &attn);
    EXPECT_EQ(y.data.shape(), x.data.shape());
    ASSERT_EQ(attn.size(), static_cast<std::size_t>(cfg.encoder.heads));
    for (const auto& a : attn) {
        ASSERT_EQ(a.dim(0), 24);
        for (int i = 0; i < a.dim(0); ++i) {
            double s = 0.0;
            for (int j = 0; j < a.dim(1); ++j) s += a.at(i, j);
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Encoder, ZeroResidualBranchesIsIdentity) {
    MapSegModel<double> model(narrow_config());
    for (const char* n : {"encoder.layer0.attn.out.weight", "encoder.layer0.attn.out.bias",
                          "encoder.layer0.ffn.fc2.weight", "encoder.layer0.ffn.fc2.bias"}) {
        zero_param(model, n);
    }
    Rng rng(6);
    const auto x = bev_of(uniform_tensor<double>({16, 6, 4}, -1, 1, rng));
    EXPECT_EQ(model.bev_encoder(x).data.value(), x.data.value());
}

TEST(Sgm, TwoCellHandComputation) {
    Config cfg = narrow_config();
    cfg.model.d_model = 4;
    cfg.model.backbone_widths = {4, 4, 4};
    cfg.model.norm_groups = 1;
    cfg.model.aspp_width = 4;
    cfg.encoder.heads = 1;
    cfg.decoder.heads = 1;
    cfg.sgm.d_k = 1;
    MapSegModel<double> model(cfg);
    auto set = [&](const std::string& name, std::vector<double> v) {
        auto p = model.params().get(name);
        ASSERT_EQ(p.value().size(), v.size()) << name;
        std::copy(v.begin(), v.end(), p.mutable_value().values().begin());
    };
    set("sgm.f_q.weight", {1.0, 0.0, 0.0, 0.0});
    set("sgm.f_q.bias", {0.0});
    set("sgm.f_k.weight", {0.0, 1.0, 0.0, 0.0});
    set("sgm.f_k.bias", {0.5});
    set("sgm.f_v.weight", std::vector<double>{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
    set("sgm.f_v.bias", {0.0, 0.0, 0.0, 1.0});
    // [C=4, H=1, W=2]
    Tensor<double> o({4, 1, 2}, std::vector<double>{1.0, -2.0, 0, 0, 0, 0, 0, 0});
    Tensor<double> x({4, 1, 2}, std::vector<double>{3.0, 4.0, 1.0, -1.0, 0.5, 0.25, -1.0, 2.0});
    const auto g = model.sgm_attend(bev_of(o), bev_of(x)).data.value();
    // q = (1, -2); k = (1.5, -0.5); v_j = x_j + (0,0,0,1)
    const double q[2] = {1.0, -2.0};
    const double k[2] = {1.5, -0.5};
    const double v[2][4] = {{3.0, 1.0, 0.5, 0.0}, {4.0, -1.0, 0.25, 3.0}};
    for (int i = 0; i < 2; ++i) {
        const double s0 = std::exp(q[i] * k[0]);
        const double s1 = std::exp(q[i] * k[1]);
        for (int c = 0; c < 4; ++c) {
            const double want = (s0 * v[0][c] + s1 * v[1][c]) / (s0 + s1);
            EXPECT_NEAR(g.at(c, 0, i), want, 1e-12);
        }
    }
}

TEST(Sgm, CellPermutationEquivariance) {
    const MapSegModel<double> model(narrow_config());
    Rng rng(12);
    const int h = 3;
    const int w = 4;
    const auto o = uniform_tensor<double>({16, h, w}, -1, 1, rng);
    const auto x = uniform_tensor<double>({16, h, w}, -1, 1, rng);
    std::vector<int> perm(h * w);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[1], perm[5]);
    auto permute = [&](const Tensor<double>& t) {
        Tensor<double> out(t.shape());
        for (int c = 0; c < t.dim(0); ++c) {
            for (int i = 0; i < h * w; ++i) out[c * h * w + i] = t[c * h * w + perm[i]];
        }
        return out;
    };
    const auto g = model.sgm_attend(bev_of(o), bev_of(x)).data.value();
    const auto gp = model.sgm_attend(bev_of(permute(o)), bev_of(permute(x))).data.value();
    const auto want = permute(g);
    for (std::size_t i = 0; i < gp.size(); ++i) EXPECT_NEAR(gp[i], want[i], 1e-12);
}

TEST(Sgm, SpatialMismatchIsShapeError) {
    const MapSegModel<double> model(narrow_config());
    EXPECT_THROW(model.sgm_attend(bev_of(Tensor<double>({16, 3, 4})), bev_of(Tensor<double>({16, 4, 3}))), ShapeError);
    EXPECT_THROW(model.sgm_fuse(bev_of(Tensor<double>({16, 3, 4})), bev_of(Tensor<double>({16, 4, 3}))), ShapeError);
}

TEST(Sgm, FuseGradientReachesBothInputs) {
    const MapSegModel<double> model(narrow_config());
    Rng rng(13);
    auto g = ad::parameter(uniform_tensor<double>({16, 3, 2}, -1, 1, rng));
    auto x = ad::parameter(uniform_tensor<double>({16, 3, 2}, -1, 1, rng));
    const auto w = uniform_tensor<double>({16, 3, 2}, -1, 1, rng);
    const auto loss = [&] {
        const FeatureMap<double> gm{g, FeatureFrame::bev, 1};
        const FeatureMap<double> xm{x, FeatureFrame::bev, 1};
        return ad::weighted_sum(model.sgm_fuse(gm, xm).projected.data, w);
    };
    const auto r = check_gradients("sgm_fuse", {g, x}, loss, 1, 96);
    EXPECT_TRUE(r.passed()) << r.max_rel_error;
    double ng = 0.0;
    double nx = 0.0;
    for (double v : g.grad().values()) ng += v * v;
    for (double v : x.grad().values()) nx += v * v;
    EXPECT_GT(ng, 0.0);
    EXPECT_GT(nx, 0.0);
}

TEST(Decoder, ShapesLayersAndRange) {
    const Config cfg = narrow_config();
    const MapSegModel<double> model(cfg);
    Rng rng(14);
    const auto y = bev_of(uniform_tensor<double>({16, 8, 4}, -3, 3, rng));
    const auto layers = model.decode(y);
    ASSERT_EQ(layers.size(), 6u);
    const BevRange r = cfg.scene.range();
    for (const auto& l : layers) {
        const MapPrediction p = l.values();
        EXPECT_EQ(p.scores.shape(), (Shape{25, 4}));
        EXPECT_EQ(p.points.shape(), (Shape{25, 10, 2}));
        for (int i = 0; i < 250; ++i) {
            EXPECT_TRUE(r.contains({p.points[2 * i], p.points[2 * i + 1]}));
        }
    }
}

TEST(Decoder, ChannelMismatchIsShapeError) {
    const MapSegModel<double> model(narrow_config());
    EXPECT_THROW(model.decode(bev_of(Tensor<double>({8, 4, 4}))), ShapeError);
}

TEST(Decoder, HierarchicalQueries) {
    const Config cfg = narrow_config();
    const MapSegModel<double> model(cfg);
    const auto q = model.query_embeddings().value();
    const auto& inst = model.params().get("decoder.instance_embed").value();
    const auto& pt = model.params().get("decoder.point_embed").value();
    const int d = cfg.model.d_model;
    const int pn = cfg.decoder.n_points;
    ASSERT_EQ(q.shape(), (Shape{cfg.decoder.n_instances * pn, d}));
    for (int i = 0; i < cfg.decoder.n_instances; ++i) {
        for (int j = 0; j < pn; ++j) {
            for (int c = 0; c < d; ++c) EXPECT_DOUBLE_EQ(q.at(i * pn + j, c), inst.at(i, c) + pt.at(j, c));
        }
    }
}

TEST(Model, TogglesControlParameters) {
    Config cfg = narrow_config();
    cfg.usm.enabled = false;
    cfg.bsm.enabled = false;
    cfg.sgm.enabled = false;
    const MapSegModel<double> base(cfg);
    for (const auto& n : base.params().names()) {
        EXPECT_NE(n.rfind("usm.", 0), 0u) << n;
        EXPECT_NE(n.rfind("bsm.", 0), 0u) << n;
        EXPECT_NE(n.rfind("sgm.", 0), 0u) << n;
    }
    const auto out = base.forward(generate_scene(2, cfg.scene));
    EXPECT_TRUE(out.usm_logits.empty());
    EXPECT_FALSE(out.bsm_logits.data.defined());
    // without guidance the decoder reads X_bev directly
    EXPECT_EQ(out.decoder_input.data.value(), out.x_bev.data.value());

    cfg.bsm.enabled = true;
    cfg.sgm.enabled = true;
    cfg.sgm.query_source = "logits";
    const MapSegModel<double> logits_q(cfg);
    EXPECT_EQ(logits_q.params().get("sgm.f_q.weight").shape(), (Shape{cfg.sgm.d_k, 2}));
}

TEST(Model, PositionalEncodingLayout) {
    const auto pe = positional_encoding_2d<double>(3, 5, 8);
    ASSERT_EQ(pe.shape(), (Shape{15, 8}));
    // row index in the first half, column index in the second
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 5; ++c) {
            EXPECT_DOUBLE_EQ(pe.at(r * 5 + c, 0), std::sin(static_cast<double>(r)));
            EXPECT_DOUBLE_EQ(pe.at(r * 5 + c, 4), std::sin(static_cast<double>(c)));
            EXPECT_DOUBLE_EQ(pe.at(r * 5 + c, 1), std::cos(static_cast<double>(r)));
            EXPECT_DOUBLE_EQ(pe.at(r * 5 + c, 5), std::cos(static_cast<double>(c)));
        }
    }
}
