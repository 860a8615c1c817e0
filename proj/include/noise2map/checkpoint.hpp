#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "noise2map/model.hpp"
#include "noise2map/serialize.hpp"

namespace n2m {

struct OptimizerSnapshot {
    OptimKind kind = OptimKind::Adam;
    std::int64_t step_count = 0;
    // slot arrays keyed "<param>.m" / "<param>.v"
    std::map<std::string, Tensor<float>> slots;
};

struct CheckpointMeta {
    int format_version = 1;
    UNetConfig unet;
    std::optional<ScheduleConfig> schedule_ss;
    std::optional<ScheduleConfig> schedule_cd;
    std::vector<std::string> heads = {"ss", "cd", "pretrain"};
    int epoch = 0;
    std::int64_t global_step = 0;
    double best_val_loss = 0.0;
    TrainConfig train;
};

struct LoadedCheckpoint {
    CheckpointMeta meta;
    std::map<std::string, Tensor<float>> arrays;
    std::optional<OptimizerSnapshot> optimizer;
};

// Single-file container: magic, JSON header, then raw float32 payload.
// Written to a temporary name and renamed into place.
void save_checkpoint(const std::filesystem::path& path, Model& model,
                     const CheckpointMeta& meta,
                     const OptimizerSnapshot* optimizer = nullptr);

LoadedCheckpoint read_checkpoint(const std::filesystem::path& path);

// Strict restore: every model parameter must be present with matching shape.
void restore_model(Model& model, const LoadedCheckpoint& ckpt);

// Name-matched trunk transfer for fine-tuning from a pretraining checkpoint:
// head parameters keep their fresh initialization. Returns the number of
// parameter tensors transferred.
int transfer_trunk(Model& model, const LoadedCheckpoint& ckpt);

}  // namespace n2m
