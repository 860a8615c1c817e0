#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "noise2map/objectives.hpp"
#include "noise2map/rng.hpp"

using namespace n2m;

namespace {

// Brute-force per-pixel oracle for the weighted mean cross-entropy.
double wce_oracle(const Tensor<float>& logits, const Tensor<int>& target,
                  const std::vector<double>& w) {
    const std::int64_t B = logits.dim(0), K = logits.dim(1);
    const std::int64_t plane = logits.dim(2) * logits.dim(3);
    double num = 0.0, den = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t p = 0; p < plane; ++p) {
            double z = 0.0;
            for (std::int64_t k = 0; k < K; ++k)
                z += std::exp(double(logits.data()[(b * K + k) * plane + p]));
            const int y = target[b * plane + p];
            const double logprob =
                double(logits.data()[(b * K + y) * plane + p]) - std::log(z);
            num += w[std::size_t(y)] * -logprob;
            den += w[std::size_t(y)];
        }
    }
    return num / den;
}

Tensor<float> random_logits(std::vector<std::int64_t> shape, Rng& rng) {
    Tensor<float> x(std::move(shape));
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = float(rng.normal());
    return x;
}

Tensor<int> random_labels(std::vector<std::int64_t> shape, int k, Rng& rng) {
    Tensor<int> y(std::move(shape));
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] = int(rng.uniform_int(0, k - 1));
    return y;
}

}  // namespace

TEST_CASE("WCE of all-zero logits with uniform weights is ln 2") {
    Tensor<float> logits({1, 2, 4, 4});
    Tensor<int> target({1, 4, 4});
    const double loss =
        weighted_cross_entropy(logits, target, ClassWeights::uniform(2));
    CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("WCE two-pixel hand case matches the per-pixel oracle") {
    Tensor<float> logits({1, 2, 1, 2});
    // pixel 0: logits (0.3, -0.2), label 0; pixel 1: logits (-1.0, 2.0), label 1
    logits(0, 0, 0, 0) = 0.3f;
    logits(0, 1, 0, 0) = -0.2f;
    logits(0, 0, 0, 1) = -1.0f;
    logits(0, 1, 0, 1) = 2.0f;
    Tensor<int> target({1, 1, 2});
    target[0] = 0;
    target[1] = 1;
    const ClassWeights w{{1.0, 3.0}};
    const double loss = weighted_cross_entropy(logits, target, w);
    CHECK(loss == doctest::Approx(wce_oracle(logits, target, w.weights)).epsilon(1e-9));
}

TEST_CASE("WCE on random inputs matches the oracle for K in {2,3}") {
    Rng rng(3);
    for (int k : {2, 3}) {
        for (int rep = 0; rep < 10; ++rep) {
            const Tensor<float> logits = random_logits({2, k, 4, 4}, rng);
            const Tensor<int> target = random_labels({2, 4, 4}, k, rng);
            std::vector<double> w;
            for (int i = 0; i < k; ++i) w.push_back(0.5 + rng.uniform() * 3.0);
            const double loss = weighted_cross_entropy(logits, target, ClassWeights{w});
            const double expect = wce_oracle(logits, target, w);
            CHECK(loss == doctest::Approx(expect).epsilon(1e-6));
        }
    }
}

TEST_CASE("WCE tends to zero for confident correct predictions") {
    Tensor<float> logits({1, 2, 2, 2});
    Tensor<int> target({1, 2, 2});
    for (std::int64_t p = 0; p < 4; ++p) {
        const int y = int(p % 2);
        target[p] = y;
        logits.data()[y * 4 + p] = 50.0f;
        logits.data()[(1 - y) * 4 + p] = -50.0f;
    }
    CHECK(weighted_cross_entropy(logits, target, ClassWeights{{1.0, 3.0}}) < 1e-9);
}

TEST_CASE("WCE with uniform weights reduces to plain cross-entropy") {
    Rng rng(9);
    const Tensor<float> logits = random_logits({1, 3, 5, 5}, rng);
    const Tensor<int> target = random_labels({1, 5, 5}, 3, rng);
    const double a =
        weighted_cross_entropy(logits, target, ClassWeights::uniform(3));
    const double b = wce_oracle(logits, target, {1.0, 1.0, 1.0});
    CHECK(std::abs(a - b) <= 1e-7);
}

TEST_CASE("WCE is invariant to scaling all class weights") {
    Rng rng(17);
    const Tensor<float> logits = random_logits({1, 2, 6, 6}, rng);
    const Tensor<int> target = random_labels({1, 6, 6}, 2, rng);
    const double a = weighted_cross_entropy(logits, target, ClassWeights{{1.0, 3.0}});
    const double b = weighted_cross_entropy(logits, target, ClassWeights{{7.0, 21.0}});
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("WCE is permutation-equivariant over pixels") {
    Rng rng(21);
    const Tensor<float> logits = random_logits({1, 2, 4, 4}, rng);
    const Tensor<int> target = random_labels({1, 4, 4}, 2, rng);
    const ClassWeights w{{1.0, 3.0}};

    std::vector<int> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = 15; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);

    Tensor<float> shuffled_logits(logits.shape());
    Tensor<int> shuffled_target(target.shape());
    for (int p = 0; p < 16; ++p) {
        for (int k = 0; k < 2; ++k)
            shuffled_logits.data()[k * 16 + perm[p]] = logits.data()[k * 16 + p];
        shuffled_target[perm[p]] = target[p];
    }
    const double a = weighted_cross_entropy(logits, target, w);
    const double b = weighted_cross_entropy(shuffled_logits, shuffled_target, w);
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("WCE gradient matches finite differences") {
    Rng rng(33);
    Tensor<double> logits({1, 3, 2, 2});
    for (std::int64_t i = 0; i < logits.size(); ++i) logits[i] = rng.normal();
    const Tensor<int> target = random_labels({1, 2, 2}, 3, rng);
    const ClassWeights w{{1.0, 2.0, 0.5}};

    Tensor<double> grad;
    weighted_cross_entropy(logits, target, w, &grad);
    const double eps = 1e-6;
    for (std::int64_t i = 0; i < logits.size(); ++i) {
        Tensor<double> lp = logits, lm = logits;
        lp[i] += eps;
        lm[i] -= eps;
        const double fd = (weighted_cross_entropy(lp, target, w) -
                           weighted_cross_entropy(lm, target, w)) /
                          (2 * eps);
        CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("WCE rejects out-of-range labels") {
    Tensor<float> logits({1, 2, 2, 2});
    Tensor<int> target({1, 2, 2});
    target[3] = 2;
    CHECK_THROWS_WITH_AS(
        weighted_cross_entropy(logits, target, ClassWeights::uniform(2)),
        doctest::Contains("2"), LabelError);
}

TEST_CASE("MSE basics and arithmetic oracle") {
    Tensor<float> a({5});
    Tensor<float> b({5});
    CHECK(mse_denoising_loss(a, b) == 0.0);

    for (int i = 0; i < 5; ++i) b[i] = a[i] + 2.0f;
    CHECK(mse_denoising_loss(b, a) == doctest::Approx(4.0).epsilon(1e-12));

    Rng rng(2);
    for (int i = 0; i < 5; ++i) {
        a[i] = float(rng.normal());
        b[i] = float(rng.normal());
    }
    double hand = 0.0;
    for (int i = 0; i < 5; ++i)
        hand += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    hand /= 5.0;
    CHECK(mse_denoising_loss(a, b) == doctest::Approx(hand).epsilon(1e-9));

    Tensor<float> c({4});
    CHECK_THROWS_AS(mse_denoising_loss(a, c), ShapeError);
}

TEST_CASE("multitask loss arithmetic") {
    CHECK(multitask_loss(0.5, 0.7, {1.0, 1.0}) == doctest::Approx(1.2).epsilon(1e-15));
    CHECK(multitask_loss(0.3, 0.9, {0.5, 0.5}) ==
          doctest::Approx((0.3 + 0.9) / 2).epsilon(1e-15));
    CHECK(multitask_loss(1.0, 99.0, {0.7, 0.0}) == doctest::Approx(0.7).epsilon(1e-15));
    CHECK_THROWS_AS(multitask_loss(1.0, 1.0, {0.0, 0.0}), ConfigError);
    CHECK_THROWS_AS(multitask_loss(1.0, 1.0, {-1.0, 1.0}), ConfigError);
}

TEST_CASE("multitask loss is bilinear") {
    Rng rng(8);
    for (int rep = 0; rep < 20; ++rep) {
        const double a = rng.uniform(), b = rng.uniform();
        const double l1 = rng.uniform(), l2 = rng.uniform();
        const double c = rng.uniform() + 0.1;
        // homogeneity in the weights
        CHECK(multitask_loss(l1, l2, {c * a, c * b}) ==
              doctest::Approx(c * multitask_loss(l1, l2, {a, b})).epsilon(1e-12));
        // additivity in the losses
        const double m1 = rng.uniform(), m2 = rng.uniform();
        CHECK(multitask_loss(l1 + m1, l2 + m2, {a, b}) ==
              doctest::Approx(multitask_loss(l1, l2, {a, b}) +
                              multitask_loss(m1, m2, {a, b}))
                  .epsilon(1e-12));
    }
}
