#include "mapseg/model.hpp"

#include <algorithm>
#include <cmath>

#include "mapseg/error.hpp"

namespace mapseg {

using ad::Var;

const char* to_string(FeatureFrame frame) noexcept {
    return frame == FeatureFrame::uv ? "uv" : "bev";
}

namespace {

template <typename T>
void expect_frame(const FeatureMap<T>& f, FeatureFrame want, const char* op) {
    if (!f.data.defined()) throw ShapeError(std::string(op) + ": input is undefined");
    if (f.frame != want) {
        throw FrameMismatchError(std::string(op) + " expects a " + to_string(want) +
                                 " feature map, got " + to_string(f.frame));
    }
}

template <typename T>
void expect_same_size(const FeatureMap<T>& a, const FeatureMap<T>& b, const char* op) {
    if (a.height() != b.height() || a.width() != b.width()) {
        throw ShapeError(std::string(op) + ": spatial sizes differ, " + shape_str(a.data.shape()) +
                         " vs " + shape_str(b.data.shape()));
    }
}

}  // namespace

template <typename T>
ad::Var<T> to_tokens(const ad::Var<T>& x) {
    const int c = x.dim(0);
    return ad::transpose(ad::reshape(x, {c, x.dim(1) * x.dim(2)}));
}

template <typename T>
ad::Var<T> from_tokens(const ad::Var<T>& tokens, int height, int width) {
    return ad::reshape(ad::transpose(tokens), {tokens.dim(1), height, width});
}

template <typename T>
Tensor<T> positional_encoding_2d(int height, int width, int d) {
    if (d % 4 != 0) throw ConfigError("positional encoding width must be divisible by 4");
    const int quarter = d / 4;
    Tensor<T> pe({height * width, d});
    for (int i = 0; i < height; ++i) {
        for (int j = 0; j < width; ++j) {
            T* row = pe.data() + static_cast<std::size_t>(i * width + j) * d;
            for (int k = 0; k < quarter; ++k) {
                // one radian per cell at k = 0, down to a 628-cell period
                const double freq = std::pow(100.0, -static_cast<double>(k) / quarter);
                row[2 * k] = static_cast<T>(std::sin(i * freq));
                row[2 * k + 1] = static_cast<T>(std::cos(i * freq));
                row[2 * quarter + 2 * k] = static_cast<T>(std::sin(j * freq));
                row[2 * quarter + 2 * k + 1] = static_cast<T>(std::cos(j * freq));
            }
        }
    }
    return pe;
}

std::shared_ptr<const ad::GatherTable> build_ipm_table(const CameraRig& rig, const BevGrid& grid,
                                                       int feat_height, int feat_width,
                                                       int stride, double depth_eps) {
    auto table = std::make_shared<ad::GatherTable>();
    table->out_height = grid.height;
    table->out_width = grid.width;
    table->offsets.reserve(static_cast<std::size_t>(grid.height) * grid.width + 1);
    table->offsets.push_back(0);
    struct Tap {
        int source;
        int index;
        double weight;
    };
    std::vector<Tap> taps;
    const double half = 0.5 * (stride - 1);
    for (int i = 0; i < grid.height; ++i) {
        for (int j = 0; j < grid.width; ++j) {
            const Vec2 c = grid.cell_center(i, j);
            taps.clear();
            int visible = 0;
            for (std::size_t k = 0; k < rig.cameras.size(); ++k) {
                const Camera& cam = rig.cameras[k];
                const auto uv = project_to_uv(Vec3{c.x, c.y, 0.0}, cam, depth_eps);
                if (!uv) continue;
                if (uv->u < -0.5 || uv->u > cam.image_width - 0.5 || uv->v < -0.5 ||
                    uv->v > cam.image_height - 0.5) {
                    continue;
                }
                ++visible;
                const double fx = std::clamp((uv->u - half) / stride, 0.0, feat_width - 1.0);
                const double fy = std::clamp((uv->v - half) / stride, 0.0, feat_height - 1.0);
                const int x0 = static_cast<int>(std::floor(fx));
                const int y0 = static_cast<int>(std::floor(fy));
                const int x1 = std::min(x0 + 1, feat_width - 1);
                const int y1 = std::min(y0 + 1, feat_height - 1);
                const double ax = fx - x0;
                const double ay = fy - y0;
                const int src = static_cast<int>(k);
                taps.push_back({src, y0 * feat_width + x0, (1 - ay) * (1 - ax)});
                taps.push_back({src, y0 * feat_width + x1, (1 - ay) * ax});
                taps.push_back({src, y1 * feat_width + x0, ay * (1 - ax)});
                taps.push_back({src, y1 * feat_width + x1, ay * ax});
            }
            for (const Tap& t : taps) {
                if (t.weight == 0.0) continue;
                table->source.push_back(t.source);
                table->index.push_back(t.index);
                table->weight.push_back(t.weight / visible);
            }
            table->offsets.push_back(static_cast<int>(table->source.size()));
        }
    }
    return table;
}

template <typename T>
FeatureMap<T> ipm_lift(const std::vector<FeatureMap<T>>& uv_feats, const CameraRig& rig,
                       const BevGrid& grid, double depth_eps) {
    if (uv_feats.size() != rig.cameras.size()) {
        throw ConfigError("ipm_lift: " + std::to_string(uv_feats.size()) + " feature maps for " +
                          std::to_string(rig.cameras.size()) + " cameras");
    }
    if (uv_feats.empty()) throw ConfigError("ipm_lift: no cameras");
    std::vector<Var<T>> sources;
    const FeatureMap<T>& first = uv_feats.front();
    for (std::size_t k = 0; k < uv_feats.size(); ++k) {
        const auto& f = uv_feats[k];
        expect_frame(f, FeatureFrame::uv, "ipm_lift");
        if (f.height() != first.height() || f.width() != first.width() ||
            f.stride != first.stride || f.channels() != first.channels()) {
            throw ShapeError("ipm_lift: camera feature maps differ in shape or stride");
        }
        const Camera& cam = rig.cameras[k];
        if (f.height() * f.stride != cam.image_height || f.width() * f.stride != cam.image_width) {
            throw ShapeError("ipm_lift: feature map " + shape_str(f.data.shape()) + " at stride " +
                             std::to_string(f.stride) + " does not cover camera " +
                             std::to_string(k) + " image");
        }
        sources.push_back(f.data);
    }
    auto table =
        build_ipm_table(rig, grid, first.height(), first.width(), first.stride, depth_eps);
    return {ad::gather(sources, table), FeatureFrame::bev, 1};
}

// ---- model ------------------------------------------------------------------

template <typename T>
MapSegModel<T>::MapSegModel(const Config& config) : config_(config) {
    validate(config_);
    Rng rng(mix_seed(config_.train.seed, 0x5EED0001ULL));
    build(rng);
}

template <typename T>
void MapSegModel<T>::build(Rng& rng) {
    const ModelConfig& m = config_.model;
    const bool bias = m.bias;
    const int d = m.d_model;
    auto conv_p = [&](const std::string& name, int out, int in, int k) {
        params_.create(name + ".weight", fan_in_uniform<T>({out, in, k, k}, in * k * k, rng));
        if (bias) params_.create(name + ".bias", Tensor<T>({out}));
    };
    auto norm_p = [&](const std::string& name, int c) {
        params_.create(name + ".gamma", Tensor<T>({c}, T(1)));
        if (bias) params_.create(name + ".beta", Tensor<T>({c}));
    };
    auto lin_p = [&](const std::string& name, int out, int in) {
        params_.create(name + ".weight", fan_in_uniform<T>({out, in}, in, rng));
        if (bias) params_.create(name + ".bias", Tensor<T>({out}));
    };
    auto mha_p = [&](const std::string& name, int width) {
        for (const char* proj : {"q", "k", "v", "out"}) lin_p(name + "." + proj, width, width);
    };
    auto aspp_p = [&](const std::string& name, int in) {
        for (std::size_t r = 0; r < m.aspp_rates.size(); ++r) {
            const std::string b = name + ".branch" + std::to_string(r);
            conv_p(b + ".conv", m.aspp_width, in, 3);
            norm_p(b + ".norm", m.aspp_width);
        }
        conv_p(name + ".pool.conv", m.aspp_width, in, 1);
        conv_p(name + ".fuse.conv", d, m.aspp_width * static_cast<int>(m.aspp_rates.size() + 1), 1);
        norm_p(name + ".fuse.norm", d);
        conv_p(name + ".classifier", 2, d, 1);
    };

    int in = 3;
    for (std::size_t s = 0; s < m.backbone_widths.size(); ++s) {
        const int w = m.backbone_widths[s];
        const std::string stage = "backbone.stage" + std::to_string(s);
        conv_p(stage + ".conv0", w, in, 3);
        norm_p(stage + ".norm0", w);
        conv_p(stage + ".conv1", w, w, 3);
        norm_p(stage + ".norm1", w);
        in = w;
    }
    const int n_st = static_cast<int>(m.backbone_widths.size());
    conv_p("fpn.lateral_fine", d, m.backbone_widths[n_st - 2], 1);
    conv_p("fpn.lateral_coarse", d, m.backbone_widths[n_st - 1], 1);
    conv_p("fpn.smooth", d, d, 3);
    norm_p("fpn.norm", d);

    if (config_.usm.enabled) aspp_p("usm", d);

    for (int l = 0; l < config_.encoder.layers; ++l) {
        const std::string e = "encoder.layer" + std::to_string(l);
        norm_p(e + ".attn_norm", d);
        mha_p(e + ".attn", d);
        norm_p(e + ".ffn_norm", d);
        lin_p(e + ".ffn.fc1", config_.encoder.ffn, d);
        lin_p(e + ".ffn.fc2", d, config_.encoder.ffn);
    }

    if (config_.bsm.enabled) aspp_p("bsm", d);

    if (config_.sgm.enabled) {
        const int dk = config_.sgm.d_k;
        const int q_in = config_.sgm.query_source == "logits" ? 2 : d;
        lin_p("sgm.f_q", dk, q_in);
        lin_p("sgm.f_k", dk, d);
        lin_p("sgm.f_v", d, d);
        conv_p("sgm.fuse", d, 2 * d, 1);
    }

    const DecoderConfig& dc = config_.decoder;
    params_.create("decoder.instance_embed", uniform_tensor<T>({dc.n_instances, d}, -1, 1, rng));
    params_.create("decoder.point_embed", uniform_tensor<T>({dc.n_points, d}, -1, 1, rng));
    for (int l = 0; l < dc.layers; ++l) {
        const std::string e = "decoder.layer" + std::to_string(l);
        norm_p(e + ".self_norm", d);
        mha_p(e + ".self_attn", d);
        norm_p(e + ".cross_norm", d);
        mha_p(e + ".cross_attn", d);
        norm_p(e + ".ffn_norm", d);
        lin_p(e + ".ffn.fc1", dc.ffn, d);
        lin_p(e + ".ffn.fc2", d, dc.ffn);
    }
    norm_p("decoder.out_norm", d);
    lin_p("decoder.cls.fc1", d, d);
    lin_p("decoder.cls.fc2", kNumClasses + 1, d);
    lin_p("decoder.pts.fc1", d, d);
    lin_p("decoder.pts.fc2", 2, d);
}

template <typename T>
Var<T> MapSegModel<T>::opt(const std::string& name) const {
    return params_.contains(name) ? params_.get(name) : Var<T>();
}

template <typename T>
Var<T> MapSegModel<T>::conv(const std::string& name, const Var<T>& x, ad::Conv2dParams cp) const {
    return ad::conv2d(x, p(name + ".weight"), opt(name + ".bias"), cp);
}

template <typename T>
Var<T> MapSegModel<T>::norm_act(const std::string& name, const Var<T>& x) const {
    return ad::silu(ad::group_norm(x, p(name + ".gamma"), opt(name + ".beta"),
                                   config_.model.norm_groups));
}

template <typename T>
Var<T> MapSegModel<T>::ln(const std::string& name, const Var<T>& x) const {
    return ad::layer_norm(x, p(name + ".gamma"), opt(name + ".beta"));
}

template <typename T>
Var<T> MapSegModel<T>::lin(const std::string& name, const Var<T>& x) const {
    return ad::linear(x, p(name + ".weight"), opt(name + ".bias"));
}

template <typename T>
Var<T> MapSegModel<T>::mha(const std::string& name, const Var<T>& q, const Var<T>& k,
                           const Var<T>& v, int heads, std::vector<Tensor<T>>* attention) const {
    const int dh = q.dim(1) / heads;
    Var<T> a = ad::attention(lin(name + ".q", q), lin(name + ".k", k), lin(name + ".v", v), heads,
                             static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))), attention);
    return lin(name + ".out", a);
}

template <typename T>
FeatureMap<T> MapSegModel<T>::backbone_fpn(const Var<T>& image) const {
    if (image.value().ndim() != 3 || image.dim(0) != 3) {
        throw ShapeError("backbone_fpn expects a [3, H, W] image, got " +
                         shape_str(image.shape()));
    }
    const int n_st = static_cast<int>(config_.model.backbone_widths.size());
    const int factor = 1 << n_st;
    if (image.dim(1) % factor != 0 || image.dim(2) % factor != 0) {
        throw ShapeError("backbone_fpn: image size " + std::to_string(image.dim(1)) + "x" +
                         std::to_string(image.dim(2)) + " must be divisible by " +
                         std::to_string(factor));
    }
    Var<T> x = image;
    std::vector<Var<T>> stages;
    for (int s = 0; s < n_st; ++s) {
        const std::string stage = "backbone.stage" + std::to_string(s);
        x = norm_act(stage + ".norm0", conv(stage + ".conv0", x, {2, 1, 1}));
        x = norm_act(stage + ".norm1", conv(stage + ".conv1", x, {1, 1, 1}));
        stages.push_back(x);
    }
    Var<T> fine = ad::avg_pool2(conv("fpn.lateral_fine", stages[n_st - 2], {}));
    Var<T> coarse = conv("fpn.lateral_coarse", stages[n_st - 1], {});
    Var<T> out = norm_act("fpn.norm", conv("fpn.smooth", ad::add(fine, coarse), {1, 1, 1}));
    return {out, FeatureFrame::uv, factor};
}

template <typename T>
SegHeadOutput<T> MapSegModel<T>::aspp_head(const std::string& prefix,
                                           const FeatureMap<T>& x) const {
    const auto& rates = config_.model.aspp_rates;
    std::vector<Var<T>> branches;
    for (std::size_t r = 0; r < rates.size(); ++r) {
        const std::string b = prefix + ".branch" + std::to_string(r);
        const int rate = rates[r];
        branches.push_back(norm_act(b + ".norm", conv(b + ".conv", x.data, {1, rate, rate})));
    }
    Var<T> pooled = ad::silu(conv(prefix + ".pool.conv", ad::global_avg_pool(x.data), {}));
    branches.push_back(ad::broadcast_spatial(pooled, x.height(), x.width()));
    Var<T> feat = norm_act(prefix + ".fuse.norm", conv(prefix + ".fuse.conv", ad::concat0(branches), {}));
    Var<T> logits = conv(prefix + ".classifier", feat, {});
    return {{logits, x.frame, x.stride}, {feat, x.frame, x.stride}};
}

template <typename T>
SegHeadOutput<T> MapSegModel<T>::usm_head(const FeatureMap<T>& feat) const {
    expect_frame(feat, FeatureFrame::uv, "usm_head");
    if (!config_.usm.enabled) throw ConfigError("usm_head called with usm.enabled=false");
    SegHeadOutput<T> out = aspp_head("usm", feat);
    out.logits.data = ad::upsample_bilinear(out.logits.data, feat.height() * feat.stride,
                                            feat.width() * feat.stride);
    out.logits.stride = 1;
    return out;
}

template <typename T>
FeatureMap<T> MapSegModel<T>::lift(const std::vector<FeatureMap<T>>& uv_feats,
                                   const CameraRig& rig) const {
    return ipm_lift(uv_feats, rig, config_.scene.grid(), config_.scene.depth_eps);
}

template <typename T>
FeatureMap<T> MapSegModel<T>::bev_encoder(const FeatureMap<T>& bev,
                                          std::vector<Tensor<T>>* attention) const {
    expect_frame(bev, FeatureFrame::bev, "bev_encoder");
    const int d = config_.model.d_model;
    if (bev.channels() != d) {
        throw ShapeError("bev_encoder expects " + std::to_string(d) + " channels, got " +
                         std::to_string(bev.channels()));
    }
    const Var<T> pos = ad::constant(positional_encoding_2d<T>(bev.height(), bev.width(), d));
    Var<T> x = to_tokens(bev.data);
    for (int l = 0; l < config_.encoder.layers; ++l) {
        const std::string e = "encoder.layer" + std::to_string(l);
        Var<T> h = ln(e + ".attn_norm", x);
        Var<T> qk = ad::add(h, pos);
        x = ad::add(x, mha(e + ".attn", qk, qk, h, config_.encoder.heads, attention));
        h = ln(e + ".ffn_norm", x);
        x = ad::add(x, lin(e + ".ffn.fc2", ad::silu(lin(e + ".ffn.fc1", h))));
    }
    return {from_tokens(x, bev.height(), bev.width()), FeatureFrame::bev, bev.stride};
}

template <typename T>
SegHeadOutput<T> MapSegModel<T>::bsm_head(const FeatureMap<T>& x_bev) const {
    expect_frame(x_bev, FeatureFrame::bev, "bsm_head");
    if (!config_.bsm.enabled) throw ConfigError("bsm_head called with bsm.enabled=false");
    return aspp_head("bsm", x_bev);
}

template <typename T>
FeatureMap<T> MapSegModel<T>::sgm_attend(const FeatureMap<T>& o_source,
                                         const FeatureMap<T>& x_bev,
                                         std::vector<Tensor<T>>* attention) const {
    expect_frame(o_source, FeatureFrame::bev, "sgm_attend");
    expect_frame(x_bev, FeatureFrame::bev, "sgm_attend");
    expect_same_size(o_source, x_bev, "sgm_attend");
    if (!config_.sgm.enabled) throw ConfigError("sgm_attend called with sgm.enabled=false");
    const Var<T> q = lin("sgm.f_q", to_tokens(o_source.data));
    const Var<T> xt = to_tokens(x_bev.data);
    const Var<T> k = lin("sgm.f_k", xt);
    const Var<T> v = lin("sgm.f_v", xt);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(config_.sgm.d_k)));
    const Var<T> g = ad::attention(q, k, v, 1, scale, attention);
    return {from_tokens(g, x_bev.height(), x_bev.width()), FeatureFrame::bev, x_bev.stride};
}

template <typename T>
FusedBev<T> MapSegModel<T>::sgm_fuse(const FeatureMap<T>& g_bev, const FeatureMap<T>& x_bev) const {
    expect_frame(g_bev, FeatureFrame::bev, "sgm_fuse");
    expect_frame(x_bev, FeatureFrame::bev, "sgm_fuse");
    expect_same_size(g_bev, x_bev, "sgm_fuse");
    if (!config_.sgm.enabled) throw ConfigError("sgm_fuse called with sgm.enabled=false");
    const Var<T> cat = ad::concat0(std::vector<Var<T>>{g_bev.data, x_bev.data});
    return {{cat, FeatureFrame::bev, x_bev.stride},
            {conv("sgm.fuse", cat, {}), FeatureFrame::bev, x_bev.stride}};
}

template <typename T>
Var<T> MapSegModel<T>::query_embeddings() const {
    const int n = config_.decoder.n_instances;
    const int pn = config_.decoder.n_points;
    Tensor<T> pick_inst({n * pn, n});
    Tensor<T> pick_pt({n * pn, pn});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < pn; ++j) {
            pick_inst.at(i * pn + j, i) = T(1);
            pick_pt.at(i * pn + j, j) = T(1);
        }
    }
    return ad::add(ad::matmul(ad::constant(std::move(pick_inst)), p("decoder.instance_embed")),
                   ad::matmul(ad::constant(std::move(pick_pt)), p("decoder.point_embed")));
}

template <typename T>
std::vector<MapPredictionVar<T>> MapSegModel<T>::decode(const FeatureMap<T>& y_bev) const {
    expect_frame(y_bev, FeatureFrame::bev, "decode");
    const int d = config_.model.d_model;
    if (y_bev.channels() != d) {
        throw ShapeError("decode expects " + std::to_string(d) + " channels, got " +
                         std::to_string(y_bev.channels()));
    }
    const DecoderConfig& dc = config_.decoder;
    const int n = dc.n_instances;
    const int pn = dc.n_points;
    const BevRange range = config_.scene.range();

    const Var<T> memory = to_tokens(y_bev.data);
    const Var<T> memory_keys = ad::add(
        memory, ad::constant(positional_encoding_2d<T>(y_bev.height(), y_bev.width(), d)));
    Tensor<T> avg({n, n * pn});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < pn; ++j) avg.at(i, i * pn + j) = static_cast<T>(1.0 / pn);
    }
    const Var<T> pool = ad::constant(std::move(avg));

    std::vector<MapPredictionVar<T>> outputs;
    Var<T> q = query_embeddings();
    for (int l = 0; l < dc.layers; ++l) {
        const std::string e = "decoder.layer" + std::to_string(l);
        Var<T> h = ln(e + ".self_norm", q);
        q = ad::add(q, mha(e + ".self_attn", h, h, h, dc.heads));
        h = ln(e + ".cross_norm", q);
        q = ad::add(q, mha(e + ".cross_attn", h, memory_keys, memory, dc.heads));
        h = ln(e + ".ffn_norm", q);
        q = ad::add(q, lin(e + ".ffn.fc2", ad::silu(lin(e + ".ffn.fc1", h))));

        const Var<T> out = ln("decoder.out_norm", q);
        const Var<T> inst = ad::matmul(pool, out);
        MapPredictionVar<T> pred;
        pred.scores = lin("decoder.cls.fc2", ad::silu(lin("decoder.cls.fc1", inst)));
        const Var<T> raw = lin("decoder.pts.fc2", ad::silu(lin("decoder.pts.fc1", out)));
        pred.points = ad::reshape(
            ad::bounded_points(raw, range.x_min, range.x_max, range.y_min, range.y_max),
            {n, pn, 2});
        outputs.push_back(std::move(pred));
    }
    return outputs;
}

template <typename T>
ForwardResult<T> MapSegModel<T>::forward(const SurroundFrame& frame,
                                         const ForwardOptions& options) const {
    if (frame.images.size() != frame.rig.cameras.size()) {
        throw ConfigError("frame has " + std::to_string(frame.images.size()) + " images for " +
                          std::to_string(frame.rig.cameras.size()) + " cameras");
    }
    ForwardResult<T> r;
    std::vector<FeatureMap<T>> feats;
    for (const Raster& img : frame.images) {
        feats.push_back(backbone_fpn(ad::constant(image_to_tensor<T>(img))));
        if (config_.usm.enabled && options.run_usm) r.usm_logits.push_back(usm_head(feats.back()).logits);
    }
    r.x_bev = bev_encoder(lift(feats, frame.rig));
    r.decoder_input = r.x_bev;
    if (config_.bsm.enabled) {
        SegHeadOutput<T> bsm = bsm_head(r.x_bev);
        r.bsm_logits = bsm.logits;
        if (config_.sgm.enabled) {
            const FeatureMap<T>& source =
                config_.sgm.query_source == "logits" ? bsm.logits : bsm.features;
            const FeatureMap<T> g = sgm_attend(
                source, r.x_bev, options.keep_sgm_attention ? &r.sgm_attention : nullptr);
            r.decoder_input = sgm_fuse(g, r.x_bev).projected;
        }
    }
    r.layers = decode(r.decoder_input);
    return r;
}

template <typename T>
MapPrediction MapPredictionVar<T>::values() const {
    return {scores.value().template cast<double>(), points.value().template cast<double>()};
}

#define MAPSEG_INSTANTIATE_MODEL(T)                                                           \
    template class MapSegModel<T>;                                                            \
    template struct MapPredictionVar<T>;                                                      \
    template Tensor<T> positional_encoding_2d<T>(int, int, int);                              \
    template FeatureMap<T> ipm_lift<T>(const std::vector<FeatureMap<T>>&, const CameraRig&,   \
                                       const BevGrid&, double);                               \
    template ad::Var<T> to_tokens<T>(const ad::Var<T>&);                                      \
    template ad::Var<T> from_tokens<T>(const ad::Var<T>&, int, int);

MAPSEG_INSTANTIATE_MODEL(float)
MAPSEG_INSTANTIATE_MODEL(double)

}  // namespace mapseg
