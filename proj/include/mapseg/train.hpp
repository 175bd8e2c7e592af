#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mapseg/config.hpp"
#include "mapseg/losses.hpp"
#include "mapseg/matching.hpp"
#include "mapseg/model.hpp"
#include "mapseg/scene.hpp"

namespace mapseg {

/// lr(e) = lr_min + (lr0 - lr_min) (1 + cos(pi e / (E - 1))) / 2 with
/// lr_min = lr0 * lr_min_ratio; a single-epoch run stays at lr0.
double cosine_lr(const OptimConfig& optim, int epoch, int epochs);

/// Adam with decoupled weight decay, applied to parameters of rank >= 2.
/// Gradients are clipped to a global L2 norm of `grad_clip` (0 disables).
template <typename T>
class AdamW {
public:
    explicit AdamW(const OptimConfig& config) : config_(config) {}

    /// Returns the pre-clip global gradient norm.
    double step(ParamStore<T>& params, double lr);

    std::int64_t steps() const noexcept { return t_; }
    const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }
    void restore(std::int64_t t, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v);

private:
    OptimConfig config_;
    std::int64_t t_ = 0;
    std::vector<Tensor<T>> m_;
    std::vector<Tensor<T>> v_;
};

struct StepRecord {
    std::int64_t step = 0;
    int epoch = 0;
    double lr = 0.0;
    double grad_norm = 0.0;
    LossReport loss;
};
json to_json(const StepRecord& r);
StepRecord step_record_from_json(const json& j);
json to_json(const LossReport& r);

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

/// Named-array container; see docs/checkpoint_format.md.
struct Checkpoint {
    Config config;
    std::int64_t step = 0;  // optimizer steps taken
    int epoch = 0;          // epoch of the next step
    std::vector<StepRecord> history;
    std::vector<NamedArray> arrays;  // param/*, adam_m/*, adam_v/*
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies the checkpoint's param/* arrays into `model`. Throws
/// CheckpointIncompatibleError listing every missing, unexpected or
/// differently shaped parameter.
void load_weights(MapSegModel<float>& model, const Checkpoint& ckpt);

/// Losses of one frame, graph attached.
template <typename T>
struct FrameLoss {
    ad::Var<T> usm;  // undefined when USM is off
    ad::Var<T> bsm;  // undefined when BSM is off
    MaptrTerms<T> maptr;
    ad::Var<T> total;
    ForwardResult<T> forward;
};
template <typename T>
FrameLoss<T> frame_loss(const MapSegModel<T>& model, const SurroundFrame& frame);

/// Deterministic single-threaded trainer: epoch e visits the frames in a
/// permutation drawn from (train.seed, e); each step accumulates gradients
/// over up to batch_size frames.
class Trainer {
public:
    Trainer(const Config& config, std::vector<SurroundFrame> frames);
    /// Resumes from a checkpoint; the checkpoint's config is used.
    Trainer(const Checkpoint& ckpt, std::vector<SurroundFrame> frames);

    int steps_per_epoch() const;
    /// epochs * steps_per_epoch, capped by train.max_steps when positive.
    std::int64_t total_steps() const;
    bool done() const { return step_ >= total_steps(); }
    std::int64_t step() const noexcept { return step_; }

    /// Runs one optimizer step. Throws NumericError (before the update)
    /// when any loss term is not finite.
    StepRecord train_step();
    /// Steps until done() or `max_steps` more steps; `on_step` sees each record.
    void run(std::int64_t max_steps = -1,
             const std::function<void(const StepRecord&)>& on_step = {});

    Checkpoint checkpoint() const;
    const MapSegModel<float>& model() const noexcept { return model_; }
    MapSegModel<float>& model() noexcept { return model_; }
    const std::vector<StepRecord>& history() const noexcept { return history_; }
    const Config& config() const noexcept { return config_; }

private:
    std::vector<int> epoch_order(int epoch) const;

    Config config_;
    std::vector<SurroundFrame> frames_;
    MapSegModel<float> model_;
    AdamW<float> optim_;
    std::int64_t step_ = 0;
    std::vector<StepRecord> history_;
};

}  // namespace mapseg
