// Scratch convergence pilot for the desk configuration.
#include <chrono>
#include <cstdio>
#include <filesystem>

#include "noise2map/training.hpp"

using namespace n2m;
namespace fs = std::filesystem;

namespace {

double train_f1(Model& model, const std::vector<Sample>& samples,
                const ScheduleConfig& sched) {
    const int T = sched.total_timesteps;
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (const Sample& s : samples) {
        const Tensor<float> x = clean_path(sched, s.model_input(), T);
        Tensor<float> xb({1, x.dim(0), x.dim(1), x.dim(2)});
        std::copy(x.data(), x.data() + x.size(), xb.data());
        const Tensor<float> logits = model.forward(xb, {T}, head_of(sched.task));
        const std::int64_t plane = logits.dim(2) * logits.dim(3);
        for (std::int64_t p = 0; p < plane; ++p) {
            const int pred = logits[p] >= logits[plane + p] ? 0 : 1;
            const int gt = s.mask[p];
            tp += pred == 1 && gt == 1;
            fp += pred == 1 && gt == 0;
            fn += pred == 0 && gt == 1;
        }
    }
    return 2.0 * tp / double(2 * tp + fp + fn);
}

}  // namespace

int main(int argc, char** argv) {
    const Task task = argc > 1 && std::string(argv[1]) == "cd" ? Task::CD : Task::SS;
    const double lr = argc > 2 ? std::atof(argv[2]) : 1e-3;
    const fs::path root = "/tmp/n2m_pilot";
    fs::remove_all(root);

    SynthSpec spec;
    spec.seed = 1;
    spec.size = 64;
    spec.n_samples = 32;
    const DatasetManifest mani =
        generate_synthetic(spec, root / to_string(task), task);

    Rng rng(0);
    Model model(UNetConfig::desk(), rng);

    const ScheduleConfig sched = make_schedule(task, CurveKind::LinearBeta);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.lr = lr;
    cfg.grad_accum = 2;
    cfg.seed = 0;

    const std::vector<Sample> samples = load_all(mani);
    const auto t0 = std::chrono::steady_clock::now();
    for (int round = 1; round <= 20; ++round) {
        cfg.epochs = round * 10;
        LoadedCheckpoint resume;
        const TrainResult r =
            round == 1
                ? train_task(model, mani, nullptr, task, sched, cfg, root / "run")
                : train_task(model, mani, nullptr, task, sched, cfg, root / "run",
                             &(resume = read_checkpoint(root / "run" / "last.ckpt")));
        const double f1 = train_f1(model, samples, sched);
        const double sec =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        std::printf("epoch %3d  val %.4f  trainF1 %.4f  %.1fs\n", cfg.epochs,
                    r.best_val_loss, f1, sec);
        std::fflush(stdout);
        if (f1 >= 0.97) break;
    }
    return 0;
}
