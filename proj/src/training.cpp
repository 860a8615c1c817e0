#include "noise2map/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace fs = std::filesystem;

namespace n2m {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

namespace {
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;

constexpr std::uint64_t kOrderStream = 0xA1ULL << 32;
constexpr std::uint64_t kNoiseStream = 0xB2ULL << 32;
constexpr std::uint64_t kNoiseStreamSS = 0xB3ULL << 32;
constexpr std::uint64_t kValStream = 0xC4ULL << 32;
}  // namespace

Optimizer::Optimizer(OptimKind kind, nn::ParamList<float> params, double weight_decay)
    : kind_(kind), weight_decay_(weight_decay), params_(std::move(params)) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto* p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

void Optimizer::step(double lr) {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(kBeta1, double(step_count_));
    const double bc2 = 1.0 - std::pow(kBeta2, double(step_count_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        nn::Param<float>& p = *params_[i];
        Tensor<float>& m = m_[i];
        Tensor<float>& v = v_[i];
        for (std::int64_t j = 0; j < p.value.size(); ++j) {
            const double g = p.grad[j];
            const double mj = kBeta1 * double(m[j]) + (1.0 - kBeta1) * g;
            const double vj = kBeta2 * double(v[j]) + (1.0 - kBeta2) * g * g;
            m[j] = float(mj);
            v[j] = float(vj);
            double update = lr * (mj / bc1) / (std::sqrt(vj / bc2) + kEps);
            if (kind_ == OptimKind::AdamW)
                update += lr * weight_decay_ * double(p.value[j]);
            p.value[j] = float(double(p.value[j]) - update);
        }
    }
}

void Optimizer::zero_grad() {
    for (auto* p : params_) p->grad.fill(0.0f);
}

OptimizerSnapshot Optimizer::snapshot() const {
    OptimizerSnapshot snap;
    snap.kind = kind_;
    snap.step_count = step_count_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        snap.slots.emplace(params_[i]->name + ".m", m_[i]);
        snap.slots.emplace(params_[i]->name + ".v", v_[i]);
    }
    return snap;
}

void Optimizer::restore(const OptimizerSnapshot& snap) {
    step_count_ = snap.step_count;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto mi = snap.slots.find(params_[i]->name + ".m");
        const auto vi = snap.slots.find(params_[i]->name + ".v");
        if (mi == snap.slots.end() || vi == snap.slots.end())
            throw IoError("optimizer state missing slots for '" + params_[i]->name +
                          "'");
        m_[i] = mi->second;
        v_[i] = vi->second;
    }
}

double lr_at(const TrainConfig& cfg, std::int64_t opt_step, std::int64_t total_steps) {
    if (cfg.lr_schedule == LrScheduleKind::Constant) return cfg.lr;
    const std::int64_t warmup =
        std::max<std::int64_t>(1, std::llround(cfg.warmup_fraction * double(total_steps)));
    if (opt_step < warmup) return cfg.lr * double(opt_step + 1) / double(warmup);
    const double span = double(std::max<std::int64_t>(1, total_steps - warmup));
    const double progress = double(opt_step - warmup) / span;
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

std::string TrainLogRow::format() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%lld\t%d\t%s\t%.9g\t%.9g\t%.9g",
                  static_cast<long long>(step), epoch, task.c_str(), loss, lr, t_mean);
    return buf;
}

// ---------------------------------------------------------------------------
// Batching helpers
// ---------------------------------------------------------------------------

std::vector<Sample> load_all(const DatasetManifest& manifest) {
    std::vector<Sample> out;
    out.reserve(manifest.entries.size());
    for (std::size_t i = 0; i < manifest.entries.size(); ++i)
        out.push_back(load_sample(manifest, i));
    return out;
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i)
        std::swap(idx[i - 1], idx[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
    return idx;
}

Tensor<float> stack_inputs(const std::vector<Tensor<float>>& xs) {
    const auto& s = xs.front().shape();
    Tensor<float> out({std::int64_t(xs.size()), s[0], s[1], s[2]});
    for (std::size_t b = 0; b < xs.size(); ++b)
        std::copy(xs[b].data(), xs[b].data() + xs[b].size(),
                  out.data() + std::int64_t(b) * xs[b].size());
    return out;
}

Tensor<int> stack_masks(const std::vector<const Tensor<int>*>& ms) {
    const auto& s = ms.front()->shape();
    Tensor<int> out({std::int64_t(ms.size()), s[0], s[1]});
    for (std::size_t b = 0; b < ms.size(); ++b)
        std::copy(ms[b]->data(), ms[b]->data() + ms[b]->size(),
                  out.data() + std::int64_t(b) * ms[b]->size());
    return out;
}

struct EpochPlan {
    std::vector<std::vector<std::size_t>> micros;  // index lists per micro-batch
};

EpochPlan plan_epoch(std::size_t n, int batch_size, Rng order_rng) {
    EpochPlan plan;
    const std::vector<std::size_t> order = shuffled_indices(n, order_rng);
    for (std::size_t i = 0; i < n; i += std::size_t(batch_size)) {
        const std::size_t hi = std::min(n, i + std::size_t(batch_size));
        plan.micros.emplace_back(order.begin() + std::ptrdiff_t(i),
                                 order.begin() + std::ptrdiff_t(hi));
    }
    return plan;
}

struct CheckpointSaver {
    fs::path best_path, last_path;
    CheckpointMeta meta;

    void save_best(Model& model) { save_checkpoint(best_path, model, meta, nullptr); }
    void save_last(Model& model, const Optimizer& opt) {
        const OptimizerSnapshot snap = opt.snapshot();
        save_checkpoint(last_path, model, meta, &snap);
    }
};

}  // namespace

double supervised_step(Model& model, const std::vector<Sample>& batch,
                       const ScheduleConfig& schedule, const ClassWeights& weights,
                       Rng& rng, const TrainConfig& cfg, double grad_scale,
                       double* mean_timestep) {
    if (batch.empty()) throw ConfigError("supervised_step: empty batch");
    for (const Sample& s : batch)
        if (s.task != schedule.task)
            throw ConfigError("batch task does not match the schedule's task");

    const int t_max = cfg.resolved_t_max(schedule.total_timesteps);
    std::vector<Tensor<float>> inputs;
    std::vector<const Tensor<int>*> masks;
    std::vector<int> ts;
    double t_sum = 0.0;
    for (const Sample& s : batch) {
        const Tensor<float> x0 = s.model_input();
        if (cfg.diffusion_enabled) {
            const int t = int(rng.uniform_int(cfg.t_min, t_max));
            ForwardSample<float> fwd = forward_sample(schedule, x0, t, rng);
            inputs.push_back(std::move(fwd.x_t));
            ts.push_back(t);
            t_sum += t;
        } else {
            inputs.push_back(x0);
            ts.push_back(0);
        }
        masks.push_back(&s.mask);
    }

    const Tensor<float> x = stack_inputs(inputs);
    const Tensor<int> target = stack_masks(masks);
    Tensor<float> logits = model.forward(x, ts, head_of(schedule.task));
    Tensor<float> dlogits;
    const double loss = weighted_cross_entropy(logits, target, weights, &dlogits);
    if (mean_timestep) *mean_timestep = t_sum / double(batch.size());
    if (grad_scale != 0.0) {
        if (grad_scale != 1.0)
            for (std::int64_t i = 0; i < dlogits.size(); ++i)
                dlogits[i] *= float(grad_scale);
        model.backward(dlogits);
    }
    return loss;
}

double validation_loss(Model& model, const std::vector<Sample>& samples,
                       const ScheduleConfig& schedule, const ClassWeights& weights,
                       int batch_size) {
    if (samples.empty()) throw ConfigError("validation over an empty sample set");
    const int T = schedule.total_timesteps;
    double loss_sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t i = 0; i < samples.size(); i += std::size_t(batch_size)) {
        const std::size_t hi = std::min(samples.size(), i + std::size_t(batch_size));
        std::vector<Tensor<float>> inputs;
        std::vector<const Tensor<int>*> masks;
        std::vector<int> ts;
        for (std::size_t j = i; j < hi; ++j) {
            inputs.push_back(clean_path(schedule, samples[j].model_input(), T));
            masks.push_back(&samples[j].mask);
            ts.push_back(T);
        }
        Tensor<float> logits =
            model.forward(stack_inputs(inputs), ts, head_of(schedule.task));
        const double loss =
            weighted_cross_entropy(logits, stack_masks(masks), weights);
        loss_sum += loss * double(hi - i);
        counted += hi - i;
    }
    return loss_sum / double(counted);
}

// ---------------------------------------------------------------------------
// Single-task supervised training
// ---------------------------------------------------------------------------

TrainResult train_task(Model& model, const DatasetManifest& train,
                       const DatasetManifest* val, Task task,
                       const ScheduleConfig& schedule, const TrainConfig& cfg,
                       const fs::path& out_dir, const LoadedCheckpoint* resume) {
    if (train.task != task || (val && val->task != task))
        throw ConfigError("manifest task does not match the requested task");
    if (schedule.task != task) throw ConfigError("schedule task mismatch");
    cfg.validate(schedule.total_timesteps);
    fs::create_directories(out_dir);

    const std::vector<Sample> train_samples = load_all(train);
    const std::vector<Sample> val_samples = val ? load_all(*val) : train_samples;
    const ClassWeights& weights = train.class_weights;

    Optimizer opt(cfg.optimizer, model.trainable_for(head_of(task)),
                  cfg.weight_decay);

    TrainResult result;
    int start_epoch = 0;
    if (resume) {
        restore_model(model, *resume);
        if (resume->optimizer) opt.restore(*resume->optimizer);
        start_epoch = resume->meta.epoch;
        result.best_val_loss = resume->meta.best_val_loss;
    }

    const std::size_t n = train_samples.size();
    const std::int64_t micros_per_epoch =
        std::int64_t((n + std::size_t(cfg.batch_size) - 1) / std::size_t(cfg.batch_size));
    const std::int64_t groups_per_epoch =
        (micros_per_epoch + cfg.grad_accum - 1) / cfg.grad_accum;
    const std::int64_t total_opt_steps = groups_per_epoch * cfg.epochs;

    CheckpointSaver saver;
    saver.best_path = out_dir / "best.ckpt";
    saver.last_path = out_dir / "last.ckpt";
    saver.meta.unet = model.config();
    if (task == Task::SS)
        saver.meta.schedule_ss = schedule;
    else
        saver.meta.schedule_cd = schedule;
    saver.meta.train = cfg;

    std::ofstream logf(out_dir / "train.log",
                       resume ? std::ios::app : std::ios::trunc);
    auto emit = [&](TrainLogRow row) {
        logf << row.format() << '\n';
        result.log.push_back(std::move(row));
    };

    const Rng base(cfg.seed);
    std::int64_t micro_step = std::int64_t(start_epoch) * micros_per_epoch;

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const EpochPlan plan =
            plan_epoch(n, cfg.batch_size, base.fork(kOrderStream + std::uint64_t(epoch)));
        Rng noise_rng = base.fork(kNoiseStream + std::uint64_t(epoch));

        for (std::size_t g = 0; g < plan.micros.size(); g += std::size_t(cfg.grad_accum)) {
            const std::size_t g_hi =
                std::min(plan.micros.size(), g + std::size_t(cfg.grad_accum));
            const double group_size = double(g_hi - g);
            const double lr = lr_at(cfg, opt.step_count(), total_opt_steps);

            model.zero_grad();
            for (std::size_t m = g; m < g_hi; ++m) {
                std::vector<Sample> batch;
                for (std::size_t idx : plan.micros[m]) batch.push_back(train_samples[idx]);
                double t_mean = 0.0;
                const double loss = supervised_step(model, batch, schedule, weights,
                                                    noise_rng, cfg, 1.0 / group_size,
                                                    &t_mean);
                emit({++micro_step, epoch, to_string(task), loss, lr, t_mean});
                if (!std::isfinite(loss)) {
                    result.diverged = true;
                    result.epochs_completed = epoch;
                    return result;
                }
            }
            opt.step(lr);
        }

        const double vloss =
            validation_loss(model, val_samples, schedule, weights, cfg.batch_size);
        emit({micro_step, epoch, std::string(to_string(task)) + "_val", vloss, 0.0,
              double(schedule.total_timesteps)});

        saver.meta.epoch = epoch + 1;
        saver.meta.global_step = opt.step_count();
        result.epochs_completed = epoch + 1;
        if (vloss < result.best_val_loss) {
            result.best_val_loss = vloss;
            result.best_epoch = epoch;
            saver.meta.best_val_loss = vloss;
            saver.save_best(model);
            result.best_path = saver.best_path;
        }
        saver.meta.best_val_loss = result.best_val_loss;
        saver.save_last(model, opt);
        result.last_path = saver.last_path;
    }

    if (cfg.epochs == start_epoch || result.last_path.empty()) {
        // Zero-epoch run (or nothing left to do): persist the current state.
        saver.meta.epoch = start_epoch;
        saver.meta.global_step = opt.step_count();
        saver.meta.best_val_loss = result.best_val_loss;
        saver.save_last(model, opt);
        result.last_path = saver.last_path;
        result.epochs_completed = start_epoch;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Self-supervised denoising pretraining
// ---------------------------------------------------------------------------

namespace {

std::vector<Tensor<float>> load_corpus_images(const DatasetManifest& corpus) {
    std::vector<Tensor<float>> out;
    out.reserve(corpus.entries.size());
    for (const auto& e : corpus.entries) {
        const ImageU8 img = read_png(e.image_paths.at(0));
        if (img.channels != 3)
            throw DataError("pretraining corpus expects 3-channel images, got " +
                            std::to_string(img.channels) + " in " +
                            e.image_paths.at(0).string());
        out.push_back(normalize(img));
    }
    return out;
}

struct PretrainBatch {
    Tensor<float> x_t;
    Tensor<float> noise;
    std::vector<int> ts;
    double t_mean = 0.0;
};

PretrainBatch build_pretrain_batch(const std::vector<Tensor<float>>& images,
                                   const std::vector<std::size_t>& indices,
                                   const ScheduleConfig& schedule,
                                   const TrainConfig& cfg, Rng& rng) {
    const int t_max = cfg.resolved_t_max(schedule.total_timesteps);
    std::vector<Tensor<float>> noisy;
    PretrainBatch batch;
    std::vector<Tensor<float>> noises;
    for (std::size_t idx : indices) {
        const Tensor<float>& x0 = images[idx];
        const int t = int(rng.uniform_int(cfg.t_min, t_max));
        const double abar = monotone_alpha_bar(schedule, t);
        const float a = float(std::sqrt(abar));
        const float b = float(std::sqrt(1.0 - abar));
        Tensor<float> eps(x0.shape());
        for (std::int64_t i = 0; i < eps.size(); ++i) eps[i] = float(rng.normal());
        Tensor<float> xt(x0.shape());
        for (std::int64_t i = 0; i < xt.size(); ++i)
            xt[i] = a * x0[i] + b * eps[i];
        noisy.push_back(std::move(xt));
        noises.push_back(std::move(eps));
        batch.ts.push_back(t);
        batch.t_mean += t;
    }
    batch.t_mean /= double(indices.size());
    batch.x_t = stack_inputs(noisy);
    batch.noise = stack_inputs(noises);
    return batch;
}

}  // namespace

TrainResult pretrain(Model& model, const DatasetManifest& corpus,
                     const DatasetManifest* val, const ScheduleConfig& schedule,
                     const TrainConfig& cfg, const fs::path& out_dir) {
    cfg.validate(schedule.total_timesteps);
    fs::create_directories(out_dir);
    if (corpus.entries.empty()) throw ManifestError("pretraining corpus is empty");

    const std::vector<Tensor<float>> images = load_corpus_images(corpus);
    const std::vector<Tensor<float>> val_images =
        val ? load_corpus_images(*val) : images;

    Optimizer opt(cfg.optimizer, model.trainable_for(Head::Pretrain),
                  cfg.weight_decay);

    TrainResult result;
    const std::size_t n = images.size();
    const std::int64_t micros_per_epoch =
        std::int64_t((n + std::size_t(cfg.batch_size) - 1) / std::size_t(cfg.batch_size));
    const std::int64_t groups_per_epoch =
        (micros_per_epoch + cfg.grad_accum - 1) / cfg.grad_accum;
    const std::int64_t total_opt_steps = groups_per_epoch * cfg.epochs;

    CheckpointSaver saver;
    saver.best_path = out_dir / "best.ckpt";
    saver.last_path = out_dir / "last.ckpt";
    saver.meta.unet = model.config();
    saver.meta.schedule_ss = schedule;
    saver.meta.train = cfg;

    std::ofstream logf(out_dir / "train.log", std::ios::trunc);
    auto emit = [&](TrainLogRow row) {
        logf << row.format() << '\n';
        result.log.push_back(std::move(row));
    };

    auto validation_mse = [&]() {
        // Fixed draws per epoch so validation values are comparable.
        Rng vr = Rng(cfg.seed).fork(kValStream);
        double sum = 0.0;
        std::size_t counted = 0;
        for (std::size_t i = 0; i < val_images.size(); i += std::size_t(cfg.batch_size)) {
            const std::size_t hi =
                std::min(val_images.size(), i + std::size_t(cfg.batch_size));
            std::vector<std::size_t> idx;
            for (std::size_t j = i; j < hi; ++j) idx.push_back(j);
            const PretrainBatch b =
                build_pretrain_batch(val_images, idx, schedule, cfg, vr);
            Tensor<float> pred = model.forward(b.x_t, b.ts, Head::Pretrain);
            sum += mse_denoising_loss(pred, b.noise) * double(hi - i);
            counted += hi - i;
        }
        return sum / double(counted);
    };

    const Rng base(cfg.seed);
    std::int64_t micro_step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const EpochPlan plan =
            plan_epoch(n, cfg.batch_size, base.fork(kOrderStream + std::uint64_t(epoch)));
        Rng noise_rng = base.fork(kNoiseStream + std::uint64_t(epoch));

        for (std::size_t g = 0; g < plan.micros.size(); g += std::size_t(cfg.grad_accum)) {
            const std::size_t g_hi =
                std::min(plan.micros.size(), g + std::size_t(cfg.grad_accum));
            const double group_size = double(g_hi - g);
            const double lr = lr_at(cfg, opt.step_count(), total_opt_steps);

            model.zero_grad();
            for (std::size_t m = g; m < g_hi; ++m) {
                const PretrainBatch b = build_pretrain_batch(images, plan.micros[m],
                                                             schedule, cfg, noise_rng);
                Tensor<float> pred = model.forward(b.x_t, b.ts, Head::Pretrain);
                Tensor<float> dpred;
                const double loss = mse_denoising_loss(pred, b.noise, &dpred);
                for (std::int64_t i = 0; i < dpred.size(); ++i)
                    dpred[i] *= float(1.0 / group_size);
                model.backward(dpred);
                emit({++micro_step, epoch, "pretrain", loss, lr, b.t_mean});
                if (!std::isfinite(loss)) {
                    result.diverged = true;
                    result.epochs_completed = epoch;
                    return result;
                }
            }
            opt.step(lr);
        }

        const double vloss = validation_mse();
        emit({micro_step, epoch, "pretrain_val", vloss, 0.0, 0.0});

        saver.meta.epoch = epoch + 1;
        saver.meta.global_step = opt.step_count();
        result.epochs_completed = epoch + 1;
        if (vloss < result.best_val_loss) {
            result.best_val_loss = vloss;
            result.best_epoch = epoch;
            saver.meta.best_val_loss = vloss;
            saver.save_best(model);
            result.best_path = saver.best_path;
        }
        saver.meta.best_val_loss = result.best_val_loss;
        saver.save_last(model, opt);
        result.last_path = saver.last_path;
    }

    if (result.last_path.empty()) {
        saver.meta.epoch = 0;
        saver.save_last(model, opt);
        result.last_path = saver.last_path;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Multi-task training
// ---------------------------------------------------------------------------

TrainResult train_multitask(Model& model, const DatasetManifest& cd_train,
                            const DatasetManifest* cd_val,
                            const DatasetManifest& ss_train,
                            const DatasetManifest* ss_val,
                            const MultiTaskWeights& lambdas,
                            const ScheduleConfig& cd_schedule,
                            const ScheduleConfig& ss_schedule, const TrainConfig& cfg,
                            const fs::path& out_dir) {
    lambdas.validate();
    cfg.validate(std::min(cd_schedule.total_timesteps, ss_schedule.total_timesteps));
    if (cd_train.task != Task::CD || ss_train.task != Task::SS)
        throw ConfigError("multitask manifests must be (cd, ss)");
    if (cd_train.entries.empty() || ss_train.entries.empty())
        throw ManifestError("multitask training requires non-empty manifests");
    fs::create_directories(out_dir);

    const std::vector<Sample> cd_samples = load_all(cd_train);
    const std::vector<Sample> ss_samples = load_all(ss_train);
    const std::vector<Sample> cd_vals = cd_val ? load_all(*cd_val) : cd_samples;
    const std::vector<Sample> ss_vals = ss_val ? load_all(*ss_val) : ss_samples;

    Optimizer opt(cfg.optimizer, model.trainable_multitask(), cfg.weight_decay);

    TrainResult result;
    const std::int64_t cd_micros = std::int64_t(
        (cd_samples.size() + std::size_t(cfg.batch_size) - 1) / std::size_t(cfg.batch_size));
    const std::int64_t ss_micros = std::int64_t(
        (ss_samples.size() + std::size_t(cfg.batch_size) - 1) / std::size_t(cfg.batch_size));
    const std::int64_t steps_per_epoch = std::max(cd_micros, ss_micros);
    const std::int64_t groups_per_epoch =
        (steps_per_epoch + cfg.grad_accum - 1) / cfg.grad_accum;
    const std::int64_t total_opt_steps = groups_per_epoch * cfg.epochs;

    CheckpointSaver saver;
    saver.best_path = out_dir / "best.ckpt";
    saver.last_path = out_dir / "last.ckpt";
    saver.meta.unet = model.config();
    saver.meta.schedule_ss = ss_schedule;
    saver.meta.schedule_cd = cd_schedule;
    saver.meta.train = cfg;

    std::ofstream logf(out_dir / "train.log", std::ios::trunc);
    auto emit = [&](TrainLogRow row) {
        logf << row.format() << '\n';
        result.log.push_back(std::move(row));
    };

    const Rng base(cfg.seed);
    std::int64_t micro_step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const EpochPlan cd_plan = plan_epoch(cd_samples.size(), cfg.batch_size,
                                             base.fork(kOrderStream + std::uint64_t(epoch)));
        const EpochPlan ss_plan =
            plan_epoch(ss_samples.size(), cfg.batch_size,
                       base.fork(kOrderStream + 0x10000000ULL + std::uint64_t(epoch)));
        Rng cd_noise = base.fork(kNoiseStream + std::uint64_t(epoch));
        Rng ss_noise = base.fork(kNoiseStreamSS + std::uint64_t(epoch));

        for (std::int64_t g = 0; g < steps_per_epoch; g += cfg.grad_accum) {
            const std::int64_t g_hi = std::min(steps_per_epoch, g + cfg.grad_accum);
            const double group_size = double(g_hi - g);
            const double lr = lr_at(cfg, opt.step_count(), total_opt_steps);

            model.zero_grad();
            for (std::int64_t s = g; s < g_hi; ++s) {
                std::vector<Sample> cd_batch;
                for (std::size_t idx :
                     cd_plan.micros[std::size_t(s % cd_micros)])
                    cd_batch.push_back(cd_samples[idx]);
                std::vector<Sample> ss_batch;
                for (std::size_t idx :
                     ss_plan.micros[std::size_t(s % ss_micros)])
                    ss_batch.push_back(ss_samples[idx]);

                ++micro_step;
                double cd_tmean = 0.0, ss_tmean = 0.0;
                const double l_cd = supervised_step(
                    model, cd_batch, cd_schedule, cd_train.class_weights, cd_noise,
                    cfg, lambdas.lambda_cd / group_size, &cd_tmean);
                const double l_ss = supervised_step(
                    model, ss_batch, ss_schedule, ss_train.class_weights, ss_noise,
                    cfg, lambdas.lambda_ss / group_size, &ss_tmean);
                const double l_mt = multitask_loss(l_cd, l_ss, lambdas);

                emit({micro_step, epoch, "cd", l_cd, lr, cd_tmean});
                emit({micro_step, epoch, "ss", l_ss, lr, ss_tmean});
                emit({micro_step, epoch, "mt", l_mt, lr, 0.0});
                if (!std::isfinite(l_mt)) {
                    result.diverged = true;
                    result.epochs_completed = epoch;
                    return result;
                }
            }
            opt.step(lr);
        }

        const double v_cd = validation_loss(model, cd_vals, cd_schedule,
                                            cd_train.class_weights, cfg.batch_size);
        const double v_ss = validation_loss(model, ss_vals, ss_schedule,
                                            ss_train.class_weights, cfg.batch_size);
        const double v_mt = multitask_loss(v_cd, v_ss, lambdas);
        emit({micro_step, epoch, "cd_val", v_cd, 0.0, 0.0});
        emit({micro_step, epoch, "ss_val", v_ss, 0.0, 0.0});
        emit({micro_step, epoch, "mt_val", v_mt, 0.0, 0.0});

        saver.meta.epoch = epoch + 1;
        saver.meta.global_step = opt.step_count();
        result.epochs_completed = epoch + 1;
        if (v_mt < result.best_val_loss) {
            result.best_val_loss = v_mt;
            result.best_epoch = epoch;
            saver.meta.best_val_loss = v_mt;
            saver.save_best(model);
            result.best_path = saver.best_path;
        }
        saver.meta.best_val_loss = result.best_val_loss;
        saver.save_last(model, opt);
        result.last_path = saver.last_path;
    }

    if (result.last_path.empty()) {
        saver.meta.epoch = 0;
        saver.save_last(model, opt);
        result.last_path = saver.last_path;
    }
    return result;
}

}  // namespace n2m
