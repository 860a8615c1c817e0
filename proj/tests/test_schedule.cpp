#include <doctest.h>

#include <cmath>

#include "noise2map/schedule.hpp"

using namespace n2m;

namespace {

Tensor<float> random_image(std::vector<std::int64_t> shape, Rng& rng) {
    Tensor<float> x(std::move(shape));
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = float(rng.uniform() * 2 - 1);
    return x;
}

Tensor<float> swap_halves(const Tensor<float>& x) {
    Tensor<float> out(x.shape());
    const std::int64_t half = x.dim(0) / 2, plane = x.dim(1) * x.dim(2);
    for (std::int64_t c = 0; c < x.dim(0); ++c) {
        const std::int64_t sc = c < half ? c + half : c - half;
        std::copy(x.data() + sc * plane, x.data() + (sc + 1) * plane,
                  out.data() + c * plane);
    }
    return out;
}

}  // namespace

TEST_CASE("linear_beta curve endpoints and product oracle") {
    const AlphaBarCurve curve = make_alpha_bar_curve(CurveKind::LinearBeta, 1000);
    CHECK(curve.values.size() == 1001);
    CHECK(curve.values[0] == 1.0);

    // Independent oracle: direct product over linearly spaced betas.
    double prod = 1.0;
    for (int j = 1; j <= 1000; ++j) {
        const double beta = 1e-4 + (0.02 - 1e-4) * double(j - 1) / 999.0;
        prod *= 1.0 - beta;
    }
    CHECK(curve.values[1000] == doctest::Approx(prod).epsilon(1e-12));
    CHECK(curve.values[1000] == doctest::Approx(4e-5).epsilon(0.05));
}

TEST_CASE("cosine curve matches the closed-form ratio per index") {
    const int S = 8;
    const AlphaBarCurve curve = make_alpha_bar_curve(CurveKind::Cosine, S);
    const double off = 0.008;
    auto f = [&](double s) {
        const double c = std::cos((s / S + off) / (1.0 + off) * M_PI / 2.0);
        return c * c;
    };
    CHECK(curve.values[0] == 1.0);
    for (int s = 1; s < S; ++s)
        CHECK(curve.values[std::size_t(s)] ==
              doctest::Approx(f(s) / f(0)).epsilon(1e-9));
    // Terminal index: the beta clip at 0.999 binds where the raw ratio is 0.
    CHECK(curve.values[std::size_t(S)] ==
          doctest::Approx(curve.values[std::size_t(S - 1)] * 0.001).epsilon(1e-9));
}

TEST_CASE("quadratic curve hits its terminal value") {
    CurveParams p;
    p.terminal_alpha_bar = 1e-6;
    const AlphaBarCurve curve = make_alpha_bar_curve(CurveKind::Quadratic, 100, p);
    CHECK(curve.values[0] == 1.0);
    CHECK(curve.values[100] == doctest::Approx(1e-6).epsilon(1e-9));
}

TEST_CASE("curve families stay in (0,1] and non-increasing") {
    for (CurveKind kind :
         {CurveKind::LinearBeta, CurveKind::Cosine, CurveKind::Quadratic}) {
        for (int S : {1, 8, 250, 1000}) {
            const AlphaBarCurve curve = make_alpha_bar_curve(kind, S);
            REQUIRE(curve.values.size() == std::size_t(S) + 1);
            CHECK(curve.values[0] == 1.0);
            for (int s = 1; s <= S; ++s) {
                CHECK(curve.values[std::size_t(s)] > 0.0);
                CHECK(curve.values[std::size_t(s)] <= curve.values[std::size_t(s - 1)]);
            }
        }
    }
}

TEST_CASE("curve parameter validation names the offending bound") {
    CurveParams p;
    p.beta_min = 0.0;
    CHECK_THROWS_WITH_AS(make_alpha_bar_curve(CurveKind::LinearBeta, 10, p),
                         doctest::Contains("beta_min"), ParamError);
    p = CurveParams{};
    p.beta_max = 1.5;
    CHECK_THROWS_WITH_AS(make_alpha_bar_curve(CurveKind::LinearBeta, 10, p),
                         doctest::Contains("beta_max"), ParamError);
    p = CurveParams{};
    p.terminal_alpha_bar = 0.0;
    CHECK_THROWS_AS(make_alpha_bar_curve(CurveKind::Quadratic, 10, p), ParamError);
    p = CurveParams{};
    p.cosine_offset = -1.0;
    CHECK_THROWS_AS(make_alpha_bar_curve(CurveKind::Cosine, 10, p), ParamError);
    CHECK_THROWS_AS(make_alpha_bar_curve(CurveKind::LinearBeta, 0), ParamError);
}

TEST_CASE("scheduler family aliases") {
    CHECK(curve_kind_from_name("ddpm") == CurveKind::LinearBeta);
    CHECK(curve_kind_from_name("ddim") == CurveKind::LinearBeta);
    CHECK(curve_kind_from_name("pndm") == CurveKind::Cosine);
    CHECK_THROWS_AS(curve_kind_from_name("heun"), ParamError);
    CHECK_THROWS_AS(curve_kind_from_name("nope"), ParamError);
}

TEST_CASE("fold_timestep endpoints, midpoint, and symmetry") {
    CHECK(fold_timestep(0, 1000, 1000) == 0);
    CHECK(fold_timestep(1000, 1000, 1000) == 0);
    CHECK(fold_timestep(250, 1000, 1000) == 500);
    CHECK(fold_timestep(500, 1000, 1000) == 1000);
    CHECK_THROWS_AS(fold_timestep(-1, 1000, 1000), RangeError);
    CHECK_THROWS_AS(fold_timestep(1001, 1000, 1000), RangeError);

    for (int T : {10, 999, 1000}) {
        for (int t = 0; t <= T; ++t)
            CHECK(fold_timestep(t, T, 1000) == fold_timestep(T - t, T, 1000));
    }
}

TEST_CASE("effective alpha-bar endpoints and folded lookup") {
    const ScheduleConfig cfg = make_schedule(Task::SS, CurveKind::LinearBeta);
    CHECK(effective_alpha_bar(cfg, 0) == 1.0);
    CHECK(effective_alpha_bar(cfg, 1000) == 1.0);
    CHECK(effective_alpha_bar(cfg, 500) == cfg.curve.values[1000]);
    CHECK(effective_alpha_bar(cfg, 250) == cfg.curve.values[500]);

    // Non-increasing on [0, T/2], non-decreasing on [T/2, T].
    for (int t = 1; t <= 500; ++t)
        CHECK(effective_alpha_bar(cfg, t) <= effective_alpha_bar(cfg, t - 1));
    for (int t = 501; t <= 1000; ++t)
        CHECK(effective_alpha_bar(cfg, t) >= effective_alpha_bar(cfg, t - 1));

    // alpha_bar_eff == 1 only at the endpoints.
    for (int t = 1; t < 1000; ++t) CHECK(effective_alpha_bar(cfg, t) < 1.0);
}

TEST_CASE("schedule validation") {
    CHECK_THROWS_AS(make_schedule(Task::SS, CurveKind::LinearBeta, 1), ParamError);
    CHECK_THROWS_AS(make_schedule(Task::SS, CurveKind::LinearBeta, 5000, 1000),
                    ParamError);
    CHECK_NOTHROW(make_schedule(Task::SS, CurveKind::LinearBeta, 1250, 1000));
}

TEST_CASE("clean_path is the identity for SS and interpolates for CD") {
    Rng rng(11);
    const ScheduleConfig ss = make_schedule(Task::SS, CurveKind::LinearBeta, 100, 100);
    const ScheduleConfig cd = make_schedule(Task::CD, CurveKind::LinearBeta, 100, 100);

    const Tensor<float> x = random_image({6, 8, 8}, rng);
    for (int t : {0, 17, 50, 100})
        CHECK(max_abs_diff(clean_path(ss, x, t), x) == 0.0);

    CHECK(max_abs_diff(clean_path(cd, x, 0), x) == 0.0);
    CHECK(max_abs_diff(clean_path(cd, x, 100), swap_halves(x)) == 0.0);

    const Tensor<float> mid = clean_path(cd, x, 50);
    const Tensor<float> sw = swap_halves(x);
    for (std::int64_t i = 0; i < mid.size(); ++i)
        CHECK(mid[i] == doctest::Approx(0.5f * x[i] + 0.5f * sw[i]).epsilon(1e-6));

    const Tensor<float> odd = random_image({3, 4, 4}, rng);
    CHECK_THROWS_AS(clean_path(cd, odd, 10), ShapeError);
}

TEST_CASE("CD time-reversal: clean_path(swap(x), t) == clean_path(x, T-t)") {
    Rng rng(23);
    const ScheduleConfig cd = make_schedule(Task::CD, CurveKind::LinearBeta, 40, 40);
    for (int rep = 0; rep < 50; ++rep) {
        const Tensor<float> x = random_image({4, 6, 6}, rng);
        const Tensor<float> sw = swap_halves(x);
        for (int k = 0; k < 20; ++k) {
            const int t = int(rng.uniform_int(0, 40));
            CHECK(max_abs_diff(clean_path(cd, sw, t), clean_path(cd, x, 40 - t)) == 0.0);
        }
    }
}

TEST_CASE("forward_sample endpoint exactness for both tasks") {
    Rng rng(5);
    const ScheduleConfig ss = make_schedule(Task::SS, CurveKind::LinearBeta, 1000, 1000);
    const ScheduleConfig cd = make_schedule(Task::CD, CurveKind::LinearBeta, 1000, 1000);

    for (int rep = 0; rep < 100; ++rep) {
        const Tensor<float> x = random_image({3, 8, 8}, rng);
        auto s0 = forward_sample(ss, x, 0, rng);
        auto sT = forward_sample(ss, x, 1000, rng);
        CHECK(max_abs_diff(s0.x_t, x) <= 1e-6);
        CHECK(max_abs_diff(sT.x_t, x) <= 1e-6);
        CHECK(s0.alpha_bar_eff == 1.0);
        CHECK(sT.alpha_bar_eff == 1.0);

        const Tensor<float> pair = random_image({6, 8, 8}, rng);
        auto c0 = forward_sample(cd, pair, 0, rng);
        auto cT = forward_sample(cd, pair, 1000, rng);
        CHECK(max_abs_diff(c0.x_t, pair) <= 1e-6);
        CHECK(max_abs_diff(cT.x_t, swap_halves(pair)) <= 1e-6);
    }
}

TEST_CASE("forward_sample reconstruction identity at interior timesteps") {
    Rng rng(7);
    const ScheduleConfig ss = make_schedule(Task::SS, CurveKind::LinearBeta, 1000, 1000);
    const Tensor<float> x = random_image({3, 8, 8}, rng);
    for (int t : {1, 123, 500, 999}) {
        const auto s = forward_sample(ss, x, t, rng);
        const float a = float(std::sqrt(s.alpha_bar_eff));
        const float b = float(std::sqrt(1.0 - s.alpha_bar_eff));
        for (std::int64_t i = 0; i < x.size(); ++i)
            CHECK(s.x_t[i] ==
                  doctest::Approx(a * s.clean_t[i] + b * s.noise[i]).epsilon(1e-5));
    }
}

TEST_CASE("noise variance law at T/2 (Monte-Carlo oracle)") {
    Rng rng(7);
    const ScheduleConfig ss = make_schedule(Task::SS, CurveKind::LinearBeta, 1000, 1000);
    const Tensor<float> zero({3, 16, 16});
    const double expected = 1.0 - effective_alpha_bar(ss, 500);

    double sum = 0.0, sumsq = 0.0;
    std::int64_t n = 0;
    while (n < 100000) {
        const auto s = forward_sample(ss, zero, 500, rng);
        for (std::int64_t i = 0; i < s.x_t.size(); ++i) {
            sum += s.x_t[i];
            sumsq += double(s.x_t[i]) * s.x_t[i];
        }
        n += s.x_t.size();
    }
    const double mean = sum / double(n);
    const double var = sumsq / double(n) - mean * mean;
    CHECK(var == doctest::Approx(expected).epsilon(0.05));
}

TEST_CASE("forward_sample rejects non-finite input") {
    Rng rng(1);
    const ScheduleConfig ss = make_schedule(Task::SS, CurveKind::LinearBeta, 100, 100);
    Tensor<float> x({3, 4, 4});
    x[5] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(forward_sample(ss, x, 10, rng), DataError);
}
