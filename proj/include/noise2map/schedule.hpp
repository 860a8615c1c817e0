#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "noise2map/common.hpp"
#include "noise2map/rng.hpp"
#include "noise2map/tensor.hpp"

namespace n2m {

enum class CurveKind { LinearBeta, Cosine, Quadratic };

inline const char* to_string(CurveKind k) {
    switch (k) {
        case CurveKind::LinearBeta: return "linear_beta";
        case CurveKind::Cosine: return "cosine";
        default: return "quadratic";
    }
}

struct CurveParams {
    // linear_beta
    double beta_min = 1e-4;
    double beta_max = 0.02;
    // cosine
    double cosine_offset = 0.008;
    // quadratic
    double terminal_alpha_bar = 1e-6;
};

// Discretized signal-retention curve: values[s] = alpha-bar at base index s,
// s in [0, base_steps]. Index 0 is pinned to exactly 1 and the curve is
// strictly positive and non-increasing.
struct AlphaBarCurve {
    CurveKind kind = CurveKind::LinearBeta;
    int base_steps = 1000;
    CurveParams params;
    std::vector<double> values;  // size base_steps + 1
};

inline AlphaBarCurve make_alpha_bar_curve(CurveKind kind, int base_steps,
                                          const CurveParams& params = {}) {
    if (base_steps < 1)
        throw ParamError("base_steps must be >= 1, got " + std::to_string(base_steps));

    AlphaBarCurve curve;
    curve.kind = kind;
    curve.base_steps = base_steps;
    curve.params = params;
    curve.values.assign(std::size_t(base_steps) + 1, 1.0);

    const int S = base_steps;
    switch (kind) {
        case CurveKind::LinearBeta: {
            if (!(params.beta_min > 0.0))
                throw ParamError("linear_beta requires beta_min > 0, got " +
                                 std::to_string(params.beta_min));
            if (!(params.beta_min < params.beta_max))
                throw ParamError("linear_beta requires beta_min < beta_max");
            if (!(params.beta_max < 1.0))
                throw ParamError("linear_beta requires beta_max < 1, got " +
                                 std::to_string(params.beta_max));
            double prod = 1.0;
            for (int s = 1; s <= S; ++s) {
                const double beta =
                    S == 1 ? params.beta_min
                           : params.beta_min + (params.beta_max - params.beta_min) *
                                                   double(s - 1) / double(S - 1);
                prod *= 1.0 - beta;
                curve.values[std::size_t(s)] = prod;
            }
            break;
        }
        case CurveKind::Cosine: {
            if (!(params.cosine_offset >= 0.0))
                throw ParamError("cosine requires offset >= 0, got " +
                                 std::to_string(params.cosine_offset));
            // Squared-cosine profile with the usual beta clip at 0.999 so the
            // terminal value stays strictly positive.
            const double off = params.cosine_offset;
            auto f = [&](double s) {
                const double a = (s / double(S) + off) / (1.0 + off) *
                                 1.5707963267948966192313216916398;
                const double c = std::cos(a);
                return c * c;
            };
            const double f0 = f(0.0);
            double prev = 1.0;
            for (int s = 1; s <= S; ++s) {
                const double ratio_s = f(double(s)) / f0;
                const double ratio_prev = s == 1 ? 1.0 : f(double(s - 1)) / f0;
                double beta = 1.0 - ratio_s / ratio_prev;
                beta = std::min(beta, 0.999);
                prev *= 1.0 - beta;
                curve.values[std::size_t(s)] = prev;
            }
            break;
        }
        case CurveKind::Quadratic: {
            if (!(params.terminal_alpha_bar > 0.0 && params.terminal_alpha_bar < 1.0))
                throw ParamError("quadratic requires terminal alpha-bar in (0,1), got " +
                                 std::to_string(params.terminal_alpha_bar));
            const double root_end = std::sqrt(params.terminal_alpha_bar);
            for (int s = 1; s <= S; ++s) {
                const double r = 1.0 + (root_end - 1.0) * double(s) / double(S);
                curve.values[std::size_t(s)] = r * r;
            }
            break;
        }
    }

    return curve;
}

// Maps a scheduler family name from config files onto a curve kind. The
// sampling-time differences between DDIM/DDPM do not affect the forward
// curve, so both resolve to linear_beta; PNDM maps onto the cosine family.
inline CurveKind curve_kind_from_name(const std::string& name) {
    if (name == "linear_beta" || name == "ddpm" || name == "ddim")
        return CurveKind::LinearBeta;
    if (name == "cosine" || name == "pndm") return CurveKind::Cosine;
    if (name == "quadratic") return CurveKind::Quadratic;
    if (name == "heun")
        throw ParamError("scheduler 'heun' is not supported (continuous-time solver)");
    throw ParamError("unknown schedule kind '" + name + "'");
}

struct ScheduleConfig {
    int total_timesteps = 1000;  // T
    AlphaBarCurve curve;
    Task task = Task::SS;

    void validate() const {
        if (total_timesteps < 2)
            throw ParamError("schedule requires T >= 2, got " +
                             std::to_string(total_timesteps));
        if (curve.values.size() != std::size_t(curve.base_steps) + 1)
            throw ParamError("alpha-bar curve length mismatch");
        // Keep the folded index nonzero strictly inside (0, T) so that
        // alpha_bar_eff == 1 happens exactly at the endpoints.
        if (total_timesteps > 4 * curve.base_steps)
            throw ParamError("schedule requires T <= 4*base_steps (T=" +
                             std::to_string(total_timesteps) + ", base_steps=" +
                             std::to_string(curve.base_steps) + ")");
    }
};

inline ScheduleConfig make_schedule(Task task, CurveKind kind, int total_timesteps = 1000,
                                    int base_steps = 1000, const CurveParams& params = {}) {
    ScheduleConfig cfg;
    cfg.total_timesteps = total_timesteps;
    cfg.curve = make_alpha_bar_curve(kind, base_steps, params);
    cfg.task = task;
    cfg.validate();
    return cfg;
}

// Reflects the timestep index so the effective noise level is zero at both
// trajectory endpoints and maximal at T/2.
inline int fold_timestep(int t, int total_timesteps, int base_steps) {
    if (t < 0 || t > total_timesteps)
        throw RangeError("timestep " + std::to_string(t) + " outside [0, " +
                         std::to_string(total_timesteps) + "]");
    const double folded = 2.0 * (t <= total_timesteps - t ? t : total_timesteps - t);
    return int(std::llround(double(base_steps) * folded / double(total_timesteps)));
}

inline double effective_alpha_bar(const ScheduleConfig& cfg, int t) {
    const int s = fold_timestep(t, cfg.total_timesteps, cfg.curve.base_steps);
    return cfg.curve.values[std::size_t(s)];
}

// Alpha-bar on the monotone (unfolded) base curve; used by denoising
// pretraining, which follows the standard corruption process.
inline double monotone_alpha_bar(const ScheduleConfig& cfg, int t) {
    if (t < 0 || t > cfg.total_timesteps)
        throw RangeError("timestep " + std::to_string(t) + " outside [0, " +
                         std::to_string(cfg.total_timesteps) + "]");
    const int s = int(std::llround(double(cfg.curve.base_steps) * double(t) /
                                   double(cfg.total_timesteps)));
    return cfg.curve.values[std::size_t(s)];
}

// Deterministic trajectory component at timestep t. SS keeps the input;
// CD interpolates the concatenated pair toward its channel-swapped
// counterpart, reaching the exact swap at t = T.
template <typename T>
Tensor<T> clean_path(const ScheduleConfig& cfg, const Tensor<T>& x0, int t) {
    if (t < 0 || t > cfg.total_timesteps)
        throw RangeError("timestep " + std::to_string(t) + " outside [0, " +
                         std::to_string(cfg.total_timesteps) + "]");
    if (cfg.task == Task::SS) return x0;

    if (x0.rank() != 3)
        throw ShapeError("clean_path expects [C,H,W], got rank " +
                         std::to_string(x0.rank()));
    const std::int64_t channels = x0.dim(0);
    if (channels % 2 != 0)
        throw ShapeError("CD input must have an even channel count, got " +
                         std::to_string(channels));

    const std::int64_t half = channels / 2;
    const std::int64_t plane = x0.dim(1) * x0.dim(2);
    // Both weights are formed as integer ratios so that the trajectory is
    // bit-exactly time-reversal symmetric under swapping the pair.
    const T w_orig = T(double(cfg.total_timesteps - t) / double(cfg.total_timesteps));
    const T w_swap = T(double(t) / double(cfg.total_timesteps));

    Tensor<T> out(x0.shape());
    const T* src = x0.data();
    T* dst = out.data();
    for (std::int64_t c = 0; c < channels; ++c) {
        const std::int64_t swapped = c < half ? c + half : c - half;
        const T* a = src + c * plane;
        const T* b = src + swapped * plane;
        T* o = dst + c * plane;
        if (t == 0) {
            std::copy(a, a + plane, o);
        } else if (t == cfg.total_timesteps) {
            std::copy(b, b + plane, o);
        } else {
            for (std::int64_t i = 0; i < plane; ++i) o[i] = w_orig * a[i] + w_swap * b[i];
        }
    }
    return out;
}

template <typename T>
struct ForwardSample {
    Tensor<T> x_t;
    int t = 0;
    Tensor<T> clean_t;
    Tensor<T> noise;
    double alpha_bar_eff = 1.0;
};

// Structured forward sampler. At t in {0, T} the noise coefficient is
// exactly zero, so x_t equals the clean endpoint bit for bit.
template <typename T>
ForwardSample<T> forward_sample(const ScheduleConfig& cfg, const Tensor<T>& x0, int t,
                                Rng& rng) {
    for (std::int64_t i = 0; i < x0.size(); ++i)
        if (!std::isfinite(double(x0[i])))
            throw DataError("forward_sample: non-finite input at element " +
                            std::to_string(i));

    ForwardSample<T> s;
    s.t = t;
    s.clean_t = clean_path(cfg, x0, t);
    s.alpha_bar_eff = effective_alpha_bar(cfg, t);
    s.noise = Tensor<T>(x0.shape());
    for (std::int64_t i = 0; i < s.noise.size(); ++i) s.noise[i] = T(rng.normal());

    if (t == 0 || t == cfg.total_timesteps) {
        s.x_t = s.clean_t;
        return s;
    }
    const T signal = T(std::sqrt(s.alpha_bar_eff));
    const T spread = T(std::sqrt(1.0 - s.alpha_bar_eff));
    s.x_t = Tensor<T>(x0.shape());
    for (std::int64_t i = 0; i < s.x_t.size(); ++i)
        s.x_t[i] = signal * s.clean_t[i] + spread * s.noise[i];
    return s;
}

}  // namespace n2m
