#include "mapseg/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include "mapseg/error.hpp"
#include "mapseg/rng.hpp"

namespace fs = std::filesystem;

namespace mapseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

double cosine_lr(const OptimConfig& optim, int epoch, int epochs) {
    if (epochs <= 1) return optim.lr0;
    const double lr_min = optim.lr0 * optim.lr_min_ratio;
    const double e = std::clamp(epoch, 0, epochs - 1);
    return lr_min + 0.5 * (optim.lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * e / (epochs - 1)));
}

// ---- optimizer --------------------------------------------------------------

template <typename T>
double AdamW<T>::step(ParamStore<T>& params, double lr) {
    const auto& names = params.names();
    if (m_.empty()) {
        for (const auto& n : names) {
            m_.emplace_back(params.get(n).shape());
            v_.emplace_back(params.get(n).shape());
        }
    }
    if (m_.size() != names.size()) throw ConfigError("optimizer state does not match parameters");

    double sq = 0.0;
    for (const auto& n : names) {
        for (T g : params.get(n).grad().values()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    const double clip =
        config_.grad_clip > 0.0 && norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;

    ++t_;
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < names.size(); ++i) {
        ad::Var<T> p = params.get(names[i]);
        Tensor<T>& w = p.mutable_value();
        const Tensor<T>& g = p.grad();
        const bool decay = w.ndim() >= 2 && config_.weight_decay > 0.0;
        T* m = m_[i].data();
        T* v = v_[i].data();
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = g.empty() ? 0.0 : static_cast<double>(g[k]) * clip;
            double wk = w[k];
            if (decay) wk -= lr * config_.weight_decay * wk;
            const double mk = b1 * m[k] + (1.0 - b1) * gk;
            const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            wk -= lr * (mk / c1) / (std::sqrt(vk / c2) + config_.eps);
            w[k] = static_cast<T>(wk);
        }
    }
    return norm;
}

template <typename T>
void AdamW<T>::restore(std::int64_t t, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
}

template class AdamW<float>;
template class AdamW<double>;

// ---- records ----------------------------------------------------------------

json to_json(const LossReport& r) {
    return {{"usm", r.usm},       {"bsm", r.bsm},           {"seg", r.seg},
            {"maptr_cls", r.maptr_cls}, {"maptr_pts", r.maptr_pts}, {"maptr", r.maptr},
            {"total", r.total}};
}

json to_json(const StepRecord& r) {
    return {{"step", r.step},
            {"epoch", r.epoch},
            {"lr", r.lr},
            {"grad_norm", r.grad_norm},
            {"loss", to_json(r.loss)}};
}

StepRecord step_record_from_json(const json& j) {
    StepRecord r;
    r.step = j.at("step").get<std::int64_t>();
    r.epoch = j.at("epoch").get<int>();
    r.lr = j.at("lr").get<double>();
    r.grad_norm = j.at("grad_norm").get<double>();
    const json& l = j.at("loss");
    r.loss.usm = l.at("usm").get<double>();
    r.loss.bsm = l.at("bsm").get<double>();
    r.loss.seg = l.at("seg").get<double>();
    r.loss.maptr_cls = l.at("maptr_cls").get<double>();
    r.loss.maptr_pts = l.at("maptr_pts").get<double>();
    r.loss.maptr = l.at("maptr").get<double>();
    r.loss.total = l.at("total").get<double>();
    return r;
}

// ---- checkpoint -------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'A', 'P', 'S', 'E', 'G', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename U>
void put(std::ostream& os, U v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U get(std::istream& is, const std::string& name) {
    U v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw FormatError(name + ": truncated checkpoint header");
    }
    return v;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    json header;
    header["config"] = ckpt.config;
    header["step"] = ckpt.step;
    header["epoch"] = ckpt.epoch;
    json hist = json::array();
    for (const auto& r : ckpt.history) hist.push_back(to_json(r));
    header["history"] = hist;
    json table = json::array();
    std::uint64_t offset = 0;
    for (const auto& a : ckpt.arrays) {
        const std::uint64_t nbytes = a.data.size() * sizeof(float);
        table.push_back({{"name", a.name},
                         {"dtype", "f32"},
                         {"shape", a.shape},
                         {"offset", offset},
                         {"nbytes", nbytes}});
        offset += nbytes;
    }
    header["arrays"] = table;
    const std::string text = header.dump();

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot write " + tmp.string());
        os.write(kMagic, sizeof kMagic);
        put<std::uint32_t>(os, kCheckpointVersion);
        put<std::uint64_t>(os, text.size());
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& a : ckpt.arrays) {
            os.write(reinterpret_cast<const char*>(a.data.data()),
                     static_cast<std::streamsize>(a.data.size() * sizeof(float)));
        }
        if (!os) throw IoError("cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    const std::string name = path.string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + name);
    char magic[8];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw FormatError(name + ": not a checkpoint (bad magic)");
    }
    const auto version = get<std::uint32_t>(is, name);
    if (version != kCheckpointVersion) {
        throw FormatError(name + ": unsupported checkpoint version " + std::to_string(version));
    }
    const auto header_len = get<std::uint64_t>(is, name);
    std::string text(header_len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(header_len))) {
        throw FormatError(name + ": truncated checkpoint header");
    }
    Checkpoint ck;
    try {
        const json header = json::parse(text);
        ck.config = config_from_json(header.at("config"));
        ck.step = header.at("step").get<std::int64_t>();
        ck.epoch = header.at("epoch").get<int>();
        for (const auto& r : header.at("history")) ck.history.push_back(step_record_from_json(r));
        const auto body = static_cast<std::uint64_t>(is.tellg());
        for (const auto& a : header.at("arrays")) {
            if (a.at("dtype") != "f32") throw FormatError(name + ": unsupported dtype");
            NamedArray arr;
            arr.name = a.at("name").get<std::string>();
            arr.shape = a.at("shape").get<Shape>();
            const auto nbytes = a.at("nbytes").get<std::uint64_t>();
            if (nbytes != shape_numel(arr.shape) * sizeof(float)) {
                throw FormatError(name + ": array '" + arr.name + "' size does not match shape");
            }
            arr.data.resize(shape_numel(arr.shape));
            is.seekg(static_cast<std::streamoff>(body + a.at("offset").get<std::uint64_t>()));
            if (!is.read(reinterpret_cast<char*>(arr.data.data()),
                         static_cast<std::streamsize>(nbytes))) {
                throw FormatError(name + ": array '" + arr.name + "' is truncated");
            }
            ck.arrays.push_back(std::move(arr));
        }
    } catch (const json::exception& e) {
        throw FormatError(name + ": " + e.what());
    }
    return ck;
}

void load_weights(MapSegModel<float>& model, const Checkpoint& ckpt) {
    std::map<std::string, const NamedArray*> saved;
    for (const auto& a : ckpt.arrays) {
        if (a.name.rfind("param/", 0) == 0) saved[a.name.substr(6)] = &a;
    }
    std::vector<std::string> problems;
    std::set<std::string> seen;
    auto& params = model.params();
    for (const auto& n : params.names()) {
        seen.insert(n);
        auto it = saved.find(n);
        const Shape& want = params.get(n).shape();
        if (it == saved.end()) {
            problems.push_back(n + ": missing from checkpoint (model expects " + shape_str(want) + ")");
        } else if (it->second->shape != want) {
            problems.push_back(n + ": checkpoint " + shape_str(it->second->shape) + " vs model " +
                               shape_str(want));
        }
    }
    for (const auto& [n, a] : saved) {
        if (!seen.count(n)) {
            problems.push_back(n + ": in checkpoint " + shape_str(a->shape) + " but not in model");
        }
    }
    if (!problems.empty()) {
        std::string msg = "checkpoint does not fit the configured architecture: ";
        for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
        throw CheckpointIncompatibleError(msg);
    }
    for (const auto& n : params.names()) {
        ad::Var<float> p = params.get(n);
        p.mutable_value() = Tensor<float>(saved.at(n)->shape, saved.at(n)->data);
    }
}

// ---- losses of one frame ----------------------------------------------------

template <typename T>
FrameLoss<T> frame_loss(const MapSegModel<T>& model, const SurroundFrame& frame) {
    const Config& cfg = model.config();
    FrameLoss<T> fl;
    fl.forward = model.forward(frame, {.run_usm = true});
    const LossWeights w = LossWeights::from_config(cfg);
    if (cfg.usm.enabled) fl.usm = usm_loss(fl.forward.usm_logits, frame.uv_masks, w);
    if (cfg.bsm.enabled) fl.bsm = bsm_loss(fl.forward.bsm_logits, frame.bev_mask, w);
    fl.maptr = maptr_loss_layers(fl.forward.layers, std::span<const MapElement>(frame.elements),
                                 MaptrLossOptions::from_config(cfg));
    ad::Var<T> seg;
    if (fl.usm.defined()) seg = fl.usm;
    if (fl.bsm.defined()) seg = seg.defined() ? ad::add(seg, fl.bsm) : fl.bsm;
    fl.total = seg.defined() ? ad::add(fl.maptr.total, seg) : fl.maptr.total;
    return fl;
}

template FrameLoss<float> frame_loss<float>(const MapSegModel<float>&, const SurroundFrame&);
template FrameLoss<double> frame_loss<double>(const MapSegModel<double>&, const SurroundFrame&);

// ---- trainer ----------------------------------------------------------------

Trainer::Trainer(const Config& config, std::vector<SurroundFrame> frames)
    : config_(config), frames_(std::move(frames)), model_(config_), optim_(config_.optim) {
    if (frames_.empty()) throw ConfigError("training needs at least one frame");
}

Trainer::Trainer(const Checkpoint& ckpt, std::vector<SurroundFrame> frames)
    : Trainer(ckpt.config, std::move(frames)) {
    load_weights(model_, ckpt);
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : ckpt.arrays) by_name[a.name] = &a;
    std::vector<Tensor<float>> m;
    std::vector<Tensor<float>> v;
    for (const auto& n : model_.params().names()) {
        auto im = by_name.find("adam_m/" + n);
        auto iv = by_name.find("adam_v/" + n);
        if (im == by_name.end() || iv == by_name.end()) {
            if (ckpt.step == 0) continue;
            throw CheckpointIncompatibleError("optimizer state missing for '" + n + "'");
        }
        m.emplace_back(im->second->shape, im->second->data);
        v.emplace_back(iv->second->shape, iv->second->data);
    }
    if (!m.empty()) optim_.restore(ckpt.step, std::move(m), std::move(v));
    step_ = ckpt.step;
    history_ = ckpt.history;
}

int Trainer::steps_per_epoch() const {
    const int b = config_.train.batch_size;
    return (static_cast<int>(frames_.size()) + b - 1) / b;
}

std::int64_t Trainer::total_steps() const {
    const std::int64_t full = static_cast<std::int64_t>(config_.train.epochs) * steps_per_epoch();
    return config_.train.max_steps > 0 ? std::min(full, config_.train.max_steps) : full;
}

std::vector<int> Trainer::epoch_order(int epoch) const {
    std::vector<int> order(frames_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng rng(mix_seed(mix_seed(config_.train.seed, 0xDA7A), static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

StepRecord Trainer::train_step() {
    const int spe = steps_per_epoch();
    const int epoch = static_cast<int>(step_ / spe);
    const int in_epoch = static_cast<int>(step_ % spe);
    const auto order = epoch_order(epoch);
    const int b = config_.train.batch_size;
    const int begin = in_epoch * b;
    const int end = std::min(begin + b, static_cast<int>(frames_.size()));
    const int count = end - begin;

    StepRecord rec;
    rec.step = step_;
    rec.epoch = epoch;
    rec.lr = cosine_lr(config_.optim, epoch, config_.train.epochs);

    model_.params().zero_grad();
    double usm = 0.0;
    double bsm = 0.0;
    double cls = 0.0;
    double pts = 0.0;
    Rng flip_rng(mix_seed(mix_seed(config_.train.seed, 0xF11B), static_cast<std::uint64_t>(step_)));
    for (int s = begin; s < end; ++s) {
        const SurroundFrame* frame = &frames_[order[s]];
        SurroundFrame mirrored;
        if (config_.train.hflip && flip_rng.bernoulli(0.5)) {
            mirrored = mirror_frame(*frame);
            frame = &mirrored;
        }
        FrameLoss<float> fl = frame_loss(model_, *frame);
        const double u = fl.usm.defined() ? fl.usm.item() : 0.0;
        const double v = fl.bsm.defined() ? fl.bsm.item() : 0.0;
        // validates this sample before any gradient is applied
        total_loss(u, v, fl.maptr.cls.item(), fl.maptr.pts.item());
        usm += u;
        bsm += v;
        cls += fl.maptr.cls.item();
        pts += fl.maptr.pts.item();
        ad::backward(ad::scale(fl.total, 1.0f / static_cast<float>(count)));
    }
    rec.loss = total_loss(usm / count, bsm / count, cls / count, pts / count);
    rec.grad_norm = optim_.step(model_.params(), rec.lr);
    if (!std::isfinite(rec.grad_norm)) throw NumericError("gradient norm is not finite");
    model_.params().zero_grad();
    ++step_;
    history_.push_back(rec);
    return rec;
}

void Trainer::run(std::int64_t max_steps, const std::function<void(const StepRecord&)>& on_step) {
    for (std::int64_t n = 0; !done() && (max_steps < 0 || n < max_steps); ++n) {
        const StepRecord r = train_step();
        if (on_step) on_step(r);
    }
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint ck;
    ck.config = config_;
    ck.step = step_;
    ck.epoch = static_cast<int>(step_ / steps_per_epoch());
    ck.history = history_;
    const auto& params = model_.params();
    const auto& names = params.names();
    for (const auto& n : names) {
        const auto& v = params.get(n).value();
        ck.arrays.push_back({"param/" + n, v.shape(), {v.storage().begin(), v.storage().end()}});
    }
    const AdamW<float>& optim = optim_;
    if (!optim.first_moments().empty()) {
        for (std::size_t i = 0; i < names.size(); ++i) {
            const auto& m = optim.first_moments()[i];
            ck.arrays.push_back({"adam_m/" + names[i], m.shape(), {m.storage().begin(), m.storage().end()}});
        }
        for (std::size_t i = 0; i < names.size(); ++i) {
            const auto& v = optim.second_moments()[i];
            ck.arrays.push_back({"adam_v/" + names[i], v.shape(), {v.storage().begin(), v.storage().end()}});
        }
    }
    return ck;
}

}  // namespace mapseg
