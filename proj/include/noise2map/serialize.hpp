#pragma once

#include <json.hpp>
#include <string>

#include "noise2map/model.hpp"
#include "noise2map/objectives.hpp"
#include "noise2map/schedule.hpp"

namespace n2m {

using Json = nlohmann::ordered_json;

enum class OptimKind { Adam, AdamW };
enum class LrScheduleKind { Constant, CosineWarmup };

inline const char* to_string(OptimKind k) {
    return k == OptimKind::Adam ? "adam" : "adamw";
}
inline const char* to_string(LrScheduleKind k) {
    return k == LrScheduleKind::Constant ? "constant" : "cosine_warmup";
}

inline OptimKind optim_from_string(const std::string& s) {
    if (s == "adam") return OptimKind::Adam;
    if (s == "adamw") return OptimKind::AdamW;
    throw ConfigError("unknown optimizer '" + s + "'");
}
inline LrScheduleKind lr_schedule_from_string(const std::string& s) {
    if (s == "constant") return LrScheduleKind::Constant;
    if (s == "cosine_warmup") return LrScheduleKind::CosineWarmup;
    throw ConfigError("unknown lr schedule '" + s + "'");
}
inline Task task_from_string(const std::string& s) {
    if (s == "ss") return Task::SS;
    if (s == "cd") return Task::CD;
    throw ConfigError("unknown task '" + s + "'");
}

struct TrainConfig {
    int epochs = 200;
    int batch_size = 8;
    double lr = 1e-4;
    int grad_accum = 2;
    OptimKind optimizer = OptimKind::Adam;
    LrScheduleKind lr_schedule = LrScheduleKind::Constant;
    double warmup_fraction = 0.05;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    bool mixed_precision = false;  // accepted; the float32 substrate runs as-is
    int t_min = 1;
    int t_max = 0;  // 0 resolves to the schedule's T
    bool diffusion_enabled = true;

    int resolved_t_max(int total_timesteps) const {
        return t_max == 0 ? total_timesteps : t_max;
    }

    void validate(int total_timesteps) const {
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
        if (grad_accum < 1) throw ConfigError("grad_accum must be >= 1");
        if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
            throw ConfigError("warmup_fraction must be in [0, 1)");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
        const int tmax = resolved_t_max(total_timesteps);
        if (t_min < 1 || t_min > tmax || tmax > total_timesteps)
            throw ConfigError("timestep range [" + std::to_string(t_min) + ", " +
                              std::to_string(tmax) + "] invalid for T=" +
                              std::to_string(total_timesteps));
    }
};

inline Json to_json(const UNetConfig& c) {
    return Json{{"in_channels", c.in_channels},
                {"out_classes", c.out_classes},
                {"stage_channels", c.stage_channels},
                {"num_resolutions", c.num_resolutions},
                {"time_embed_dim", c.time_embed_dim},
                {"attention_at_bottleneck", c.attention_at_bottleneck},
                {"use_timestep_conditioning", c.use_timestep_conditioning}};
}

inline UNetConfig unet_from_json(const Json& j) {
    UNetConfig c;
    c.in_channels = j.value("in_channels", c.in_channels);
    c.out_classes = j.value("out_classes", c.out_classes);
    if (j.contains("stage_channels"))
        c.stage_channels = j.at("stage_channels").get<std::vector<int>>();
    c.num_resolutions = j.value("num_resolutions", c.num_resolutions);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    c.attention_at_bottleneck =
        j.value("attention_at_bottleneck", c.attention_at_bottleneck);
    c.use_timestep_conditioning =
        j.value("use_timestep_conditioning", c.use_timestep_conditioning);
    c.validate();
    return c;
}

inline Json to_json(const ScheduleConfig& c) {
    return Json{{"kind", to_string(c.curve.kind)},
                {"base_steps", c.curve.base_steps},
                {"T", c.total_timesteps},
                {"task", to_string(c.task)},
                {"beta_min", c.curve.params.beta_min},
                {"beta_max", c.curve.params.beta_max},
                {"cosine_offset", c.curve.params.cosine_offset},
                {"terminal_alpha_bar", c.curve.params.terminal_alpha_bar}};
}

inline ScheduleConfig schedule_from_json(const Json& j) {
    CurveParams p;
    p.beta_min = j.value("beta_min", p.beta_min);
    p.beta_max = j.value("beta_max", p.beta_max);
    p.cosine_offset = j.value("cosine_offset", p.cosine_offset);
    p.terminal_alpha_bar = j.value("terminal_alpha_bar", p.terminal_alpha_bar);
    const CurveKind kind =
        curve_kind_from_name(j.value("kind", std::string("linear_beta")));
    const Task task = task_from_string(j.value("task", std::string("ss")));
    return make_schedule(task, kind, j.value("T", 1000), j.value("base_steps", 1000),
                         p);
}

inline Json to_json(const TrainConfig& c) {
    return Json{{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"lr", c.lr},
                {"grad_accum", c.grad_accum},
                {"optimizer", to_string(c.optimizer)},
                {"lr_schedule", to_string(c.lr_schedule)},
                {"warmup_fraction", c.warmup_fraction},
                {"weight_decay", c.weight_decay},
                {"seed", c.seed},
                {"mixed_precision", c.mixed_precision},
                {"t_min", c.t_min},
                {"t_max", c.t_max},
                {"diffusion_enabled", c.diffusion_enabled}};
}

inline TrainConfig train_from_json(const Json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.grad_accum = j.value("grad_accum", c.grad_accum);
    c.optimizer = optim_from_string(
        j.value("optimizer", std::string(to_string(c.optimizer))));
    c.lr_schedule = lr_schedule_from_string(
        j.value("lr_schedule", std::string(to_string(c.lr_schedule))));
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.mixed_precision = j.value("mixed_precision", c.mixed_precision);
    c.t_min = j.value("t_min", c.t_min);
    c.t_max = j.value("t_max", c.t_max);
    c.diffusion_enabled = j.value("diffusion_enabled", c.diffusion_enabled);
    return c;
}

}  // namespace n2m
