#pragma once

#include <filesystem>
#include <limits>
#include <vector>

#include "noise2map/checkpoint.hpp"
#include "noise2map/data.hpp"
#include "noise2map/model.hpp"
#include "noise2map/schedule.hpp"
#include "noise2map/serialize.hpp"

namespace n2m {

// Adam / AdamW over an explicit parameter subset. Parameters outside the
// subset are never touched, which keeps inactive heads bit-identical.
class Optimizer {
public:
    Optimizer(OptimKind kind, nn::ParamList<float> params, double weight_decay);

    void step(double lr);
    void zero_grad();

    OptimizerSnapshot snapshot() const;
    void restore(const OptimizerSnapshot& snap);

    std::int64_t step_count() const { return step_count_; }
    const nn::ParamList<float>& params() const { return params_; }

private:
    OptimKind kind_;
    double weight_decay_;
    nn::ParamList<float> params_;
    std::vector<Tensor<float>> m_, v_;
    std::int64_t step_count_ = 0;
};

double lr_at(const TrainConfig& cfg, std::int64_t opt_step, std::int64_t total_steps);

struct TrainLogRow {
    std::int64_t step = 0;
    int epoch = 0;
    std::string task;
    double loss = 0.0;
    double lr = 0.0;
    double t_mean = 0.0;

    std::string format() const;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    int epochs_completed = 0;
    std::filesystem::path best_path;
    std::filesystem::path last_path;
    bool diverged = false;
    int transferred_tensors = 0;
};

std::vector<Sample> load_all(const DatasetManifest& manifest);

// One supervised micro-batch: draws a timestep and noise per sample, runs the
// forward pass on the noised inputs, and backpropagates the weighted
// cross-entropy scaled by grad_scale. Returns the unscaled loss.
double supervised_step(Model& model, const std::vector<Sample>& batch,
                       const ScheduleConfig& schedule, const ClassWeights& weights,
                       Rng& rng, const TrainConfig& cfg, double grad_scale = 1.0,
                       double* mean_timestep = nullptr);

// Deterministic validation at the inference condition (t = T, clean path).
double validation_loss(Model& model, const std::vector<Sample>& samples,
                       const ScheduleConfig& schedule, const ClassWeights& weights,
                       int batch_size);

// Self-supervised denoising pretraining on the monotone base curve: corrupt,
// predict the drawn noise, minimize MSE. Masks in the corpus are ignored.
TrainResult pretrain(Model& model, const DatasetManifest& corpus,
                     const DatasetManifest* val, const ScheduleConfig& schedule,
                     const TrainConfig& cfg, const std::filesystem::path& out_dir);

// Supervised single-task training with gradient accumulation and best/last
// checkpointing; pass a loaded checkpoint to resume an interrupted run.
TrainResult train_task(Model& model, const DatasetManifest& train,
                       const DatasetManifest* val, Task task,
                       const ScheduleConfig& schedule, const TrainConfig& cfg,
                       const std::filesystem::path& out_dir,
                       const LoadedCheckpoint* resume = nullptr);

TrainResult train_multitask(Model& model, const DatasetManifest& cd_train,
                            const DatasetManifest* cd_val,
                            const DatasetManifest& ss_train,
                            const DatasetManifest* ss_val,
                            const MultiTaskWeights& lambdas,
                            const ScheduleConfig& cd_schedule,
                            const ScheduleConfig& ss_schedule, const TrainConfig& cfg,
                            const std::filesystem::path& out_dir);

}  // namespace n2m
