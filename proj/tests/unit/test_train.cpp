#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "fixtures.hpp"
#include "mapseg/error.hpp"
#include "mapseg/io.hpp"
#include "mapseg/train.hpp"

using namespace mapseg;

namespace {

Config small_config(int frames) {
    Config c = fixtures::desk_config(frames);
    c.scene.image_height = 32;
    c.scene.image_width = 48;
    c.scene.grid_height = 16;
    c.scene.grid_width = 8;
    c.model.d_model = 16;
    c.model.backbone_widths = {8, 12, 16};
    c.model.norm_groups = 4;
    c.model.aspp_width = 8;
    c.encoder.heads = 2;
    c.encoder.ffn = 32;
    c.sgm.d_k = 16;
    c.decoder.heads = 2;
    c.decoder.ffn = 32;
    c.decoder.layers = 2;
    c.decoder.n_instances = 6;
    c.decoder.n_points = 5;
    c.train.epochs = 2;
    return c;
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("mapseg_" + name);
}

}  // namespace

TEST(CosineLr, Endpoints) {
    OptimConfig o;
    EXPECT_DOUBLE_EQ(cosine_lr(o, 0, 300), 3e-4);
    EXPECT_DOUBLE_EQ(cosine_lr(o, 299, 300), 3e-6);
    EXPECT_NEAR(cosine_lr(o, 1, 3), (3e-4 + 3e-6) / 2.0, 1e-18);
    EXPECT_DOUBLE_EQ(cosine_lr(o, 0, 1), 3e-4);
    double prev = 1.0;
    for (int e = 0; e < 50; ++e) {
        const double lr = cosine_lr(o, e, 50);
        EXPECT_LE(lr, prev);
        prev = lr;
    }
}

TEST(AdamW, TwoStepOracle) {
    OptimConfig o;
    o.grad_clip = 0.0;
    ParamStore<double> ps;
    ps.create("w", Tensor<double>({2, 2}, std::vector<double>{0.5, -1.0, 2.0, 0.0}));
    ps.create("b", Tensor<double>({2}, std::vector<double>{0.25, -0.75}));
    const std::vector<std::vector<double>> grads = {{0.1, -0.2, 0.0, 3.0}, {1.0, -1.0}};
    const std::vector<std::vector<double>> grads2 = {{-0.3, 0.2, 0.5, 1.0}, {0.5, 0.0}};
    AdamW<double> opt(o);
    const double lr = 1e-2;

    std::vector<std::vector<double>> w = {{0.5, -1.0, 2.0, 0.0}, {0.25, -0.75}};
    std::vector<std::vector<double>> m = {{0, 0, 0, 0}, {0, 0}};
    std::vector<std::vector<double>> v = m;
    for (int t = 1; t <= 2; ++t) {
        const auto& g = t == 1 ? grads : grads2;
        ps.zero_grad();
        for (int k = 0; k < 2; ++k) {
            auto p = ps.get(k == 0 ? "w" : "b");
            auto& gb = p.mutable_grad();
            for (std::size_t i = 0; i < g[k].size(); ++i) gb[i] = g[k][i];
        }
        opt.step(ps, lr);
        for (int k = 0; k < 2; ++k) {
            for (std::size_t i = 0; i < w[k].size(); ++i) {
                // decoupled decay on the matrix only
                if (k == 0) w[k][i] *= 1.0 - lr * 0.01;
                m[k][i] = 0.9 * m[k][i] + 0.1 * g[k][i];
                v[k][i] = 0.999 * v[k][i] + 0.001 * g[k][i] * g[k][i];
                const double mh = m[k][i] / (1.0 - std::pow(0.9, t));
                const double vh = v[k][i] / (1.0 - std::pow(0.999, t));
                w[k][i] -= lr * mh / (std::sqrt(vh) + 1e-8);
            }
        }
        const auto& wv = ps.get("w").value();
        const auto& bv = ps.get("b").value();
        for (int i = 0; i < 4; ++i) EXPECT_NEAR(wv[i], w[0][i], 1e-15) << "step " << t;
        for (int i = 0; i < 2; ++i) EXPECT_NEAR(bv[i], w[1][i], 1e-15) << "step " << t;
    }
    EXPECT_EQ(opt.steps(), 2);
}

TEST(AdamW, ClipsToGlobalNorm) {
    OptimConfig o;
    o.grad_clip = 1.0;
    o.weight_decay = 0.0;
    ParamStore<double> ps;
    ps.create("a", Tensor<double>({2}));
    auto p = ps.get("a");
    auto& g = p.mutable_grad();
    g[0] = 3.0;
    g[1] = 4.0;
    AdamW<double> opt(o);
    EXPECT_DOUBLE_EQ(opt.step(ps, 0.1), 5.0);
    // scaled gradients (0.6, 0.8) feed the moments
    EXPECT_NEAR(opt.first_moments()[0][0], 0.06, 1e-15);
    EXPECT_NEAR(opt.first_moments()[0][1], 0.08, 1e-15);
    EXPECT_NEAR(opt.second_moments()[0][1], 0.001 * 0.64, 1e-15);
}

TEST(Trainer, StepCounts) {
    Config c = small_config(5);
    c.train.epochs = 4;
    const auto frames = generate_dataset(c.scene);
    const Trainer t(c, frames);
    EXPECT_EQ(t.steps_per_epoch(), 3);
    EXPECT_EQ(t.total_steps(), 12);
    c.train.max_steps = 5;
    EXPECT_EQ(Trainer(c, frames).total_steps(), 5);
    EXPECT_THROW(Trainer(c, {}), ConfigError);
}

TEST(Trainer, LossRecordIdentities) {
    const Config c = small_config(2);
    Trainer t(c, generate_dataset(c.scene));
    const StepRecord r = t.train_step();
    EXPECT_EQ(r.step, 0);
    EXPECT_EQ(r.lr, 3e-4);
    EXPECT_GT(r.loss.usm, 0.0);
    EXPECT_GT(r.loss.bsm, 0.0);
    EXPECT_EQ(r.loss.seg, r.loss.usm + r.loss.bsm);
    EXPECT_EQ(r.loss.maptr, r.loss.maptr_cls + r.loss.maptr_pts);
    EXPECT_EQ(r.loss.total, r.loss.maptr + r.loss.seg);
    EXPECT_GT(r.grad_norm, 0.0);
    EXPECT_EQ(t.step(), 1);
}

TEST(Trainer, UsmDisabledHasNoTermOrParameters) {
    Config c = small_config(2);
    c.usm.enabled = false;
    Trainer t(c, generate_dataset(c.scene));
    for (const auto& n : t.model().params().names()) EXPECT_NE(n.rfind("usm.", 0), 0u) << n;
    const StepRecord r = t.train_step();
    EXPECT_EQ(r.loss.usm, 0.0);
    const auto fl = frame_loss(t.model(), generate_scene(1, c.scene));
    EXPECT_FALSE(fl.usm.defined());
    EXPECT_TRUE(fl.bsm.defined());
}

TEST(Trainer, FrameLossMatchesParts) {
    const Config c = small_config(1);
    const MapSegModel<double> model(c);
    const auto frame = generate_scene(4, c.scene);
    const auto fl = frame_loss(model, frame);
    const double want = fl.maptr.total.item() + (fl.usm.item() + fl.bsm.item());
    EXPECT_EQ(fl.total.item(), want);
    EXPECT_EQ(fl.forward.layers.size(), 2u);
}

TEST(Checkpoint, RoundTripAndResume) {
    Config c = small_config(3);
    c.train.epochs = 2;
    c.train.seed = 11;
    const auto frames = generate_dataset(c.scene);
    Trainer straight(c, frames);
    straight.run();

    Trainer first(c, frames);
    first.run(2);
    const auto path = temp_file("ckpt_roundtrip.ckpt");
    save_checkpoint(path, first.checkpoint());
    const Checkpoint loaded = load_checkpoint(path);
    const Checkpoint orig = first.checkpoint();
    EXPECT_EQ(loaded.config, orig.config);
    EXPECT_EQ(loaded.step, 2);
    EXPECT_EQ(loaded.epoch, orig.epoch);
    ASSERT_EQ(loaded.arrays.size(), orig.arrays.size());
    for (std::size_t i = 0; i < orig.arrays.size(); ++i) {
        EXPECT_EQ(loaded.arrays[i].name, orig.arrays[i].name);
        EXPECT_EQ(loaded.arrays[i].shape, orig.arrays[i].shape);
        EXPECT_EQ(loaded.arrays[i].data, orig.arrays[i].data);
    }
    ASSERT_EQ(loaded.history.size(), 2u);
    EXPECT_EQ(loaded.history[1].loss.total, orig.history[1].loss.total);

    Trainer resumed(loaded, frames);
    resumed.run();
    EXPECT_EQ(resumed.step(), straight.step());
    const auto& a = straight.model().params();
    const auto& b = resumed.model().params();
    for (const auto& n : a.names()) EXPECT_EQ(a.get(n).value(), b.get(n).value()) << n;
    EXPECT_EQ(resumed.history().back().loss.total, straight.history().back().loss.total);
    std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFileRejected) {
    const auto path = temp_file("ckpt_corrupt.ckpt");
    write_file(path, "not a checkpoint");
    EXPECT_THROW(load_checkpoint(path), FormatError);
    EXPECT_THROW(load_checkpoint(temp_file("does_not_exist.ckpt")), IoError);
    std::filesystem::remove(path);
}

TEST(Checkpoint, LoadWeightsListsMismatches) {
    const Config with = small_config(1);
    Config without = with;
    without.sgm.enabled = false;
    const Trainer t(with, generate_dataset(with.scene));
    MapSegModel<float> target(without);
    try {
        load_weights(target, t.checkpoint());
        FAIL() << "expected CheckpointIncompatibleError";
    } catch (const CheckpointIncompatibleError& e) {
        EXPECT_NE(std::string(e.what()).find("sgm.f_q.weight"), std::string::npos) << e.what();
    }
    MapSegModel<float> same(with);
    EXPECT_NO_THROW(load_weights(same, t.checkpoint()));
    for (const auto& n : same.params().names()) {
        EXPECT_EQ(same.params().get(n).value(), t.model().params().get(n).value());
    }
}

TEST(Checkpoint, OverridesSurviveInConfig) {
    Config c = load_config(json::object(), {"loss.lambda1=3.5", "train.seed=9"});
    c.scene = small_config(1).scene;
    c.model = small_config(1).model;
    const Trainer t(c, generate_dataset(c.scene));
    const auto path = temp_file("ckpt_overrides.ckpt");
    save_checkpoint(path, t.checkpoint());
    const Checkpoint back = load_checkpoint(path);
    EXPECT_EQ(back.config.loss.lambda1, 3.5);
    EXPECT_EQ(back.config.train.seed, 9u);
    std::filesystem::remove(path);
}

TEST(StepRecord, JsonRoundTrip) {
    StepRecord r;
    r.step = 17;
    r.epoch = 3;
    r.lr = 1.25e-4;
    r.grad_norm = 2.5;
    r.loss = total_loss(1.0, 2.0, 0.5, 0.25);
    const StepRecord back = step_record_from_json(to_json(r));
    EXPECT_EQ(back.step, 17);
    EXPECT_EQ(back.epoch, 3);
    EXPECT_EQ(back.lr, 1.25e-4);
    EXPECT_EQ(back.loss.total, r.loss.total);
    EXPECT_EQ(back.loss.maptr_pts, 0.25);
}

TEST(Trainer, ShortRunHalvesLoss) {
    // eight frames, 200 steps at the default learning rate
    Config c = fixtures::desk_config(8);
    c.train.epochs = 50;
    const auto frames = generate_dataset(c.scene);
    Trainer t(c, frames);
    t.run();
    ASSERT_EQ(t.step(), 200);
    const auto& h = t.history();
    double last = 0.0;
    for (std::size_t i = h.size() - 4; i < h.size(); ++i) last += h[i].loss.total / 4.0;
    EXPECT_LT(last, 0.5 * h.front().loss.total) << "first " << h.front().loss.total << " last epoch " << last;
}
