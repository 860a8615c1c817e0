#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "noise2map/common.hpp"
#include "noise2map/tensor.hpp"

namespace n2m {

struct ClassWeights {
    std::vector<double> weights;  // one positive weight per class

    static ClassWeights uniform(int k) {
        return ClassWeights{std::vector<double>(std::size_t(k), 1.0)};
    }

    void validate(int k) const {
        if (int(weights.size()) != k)
            throw ConfigError("class weights length " + std::to_string(weights.size()) +
                              " does not match K=" + std::to_string(k));
        for (double w : weights)
            if (!(w > 0.0)) throw ConfigError("class weights must be positive");
    }
};

struct MultiTaskWeights {
    double lambda_cd = 1.0;
    double lambda_ss = 1.0;

    void validate() const {
        if (lambda_cd < 0.0 || lambda_ss < 0.0)
            throw ConfigError("multi-task weights must be non-negative");
        if (lambda_cd == 0.0 && lambda_ss == 0.0)
            throw ConfigError("multi-task weights must not both be zero");
    }
};

// Weighted cross-entropy over pixels, normalized by the sum of the applied
// weights so the loss is invariant to the overall weight scale. Optionally
// fills d(loss)/d(logits).
template <typename T>
double weighted_cross_entropy(const Tensor<T>& logits, const Tensor<int>& target,
                              const ClassWeights& w, Tensor<T>* dlogits = nullptr) {
    if (logits.rank() != 4) throw ShapeError("WCE expects logits [B, K, H, W]");
    const std::int64_t B = logits.dim(0), K = logits.dim(1);
    const std::int64_t H = logits.dim(2), W = logits.dim(3);
    if (target.rank() != 3 || target.dim(0) != B || target.dim(1) != H ||
        target.dim(2) != W)
        throw ShapeError("WCE target shape mismatch");
    w.validate(int(K));

    if (dlogits) *dlogits = Tensor<T>(logits.shape());

    const std::int64_t plane = H * W;
    double loss_sum = 0.0;
    double weight_sum = 0.0;
    std::vector<double> probs(static_cast<std::size_t>(K), 0.0);

    for (std::int64_t b = 0; b < B; ++b) {
        const T* lb = logits.data() + b * K * plane;
        for (std::int64_t p = 0; p < plane; ++p) {
            const int y = target[b * plane + p];
            if (y < 0 || y >= int(K))
                throw LabelError("target class " + std::to_string(y) +
                                 " outside [0, " + std::to_string(K) + ") at pixel " +
                                 std::to_string(p));
            double mx = double(lb[p]);
            for (std::int64_t k = 1; k < K; ++k)
                mx = std::max(mx, double(lb[k * plane + p]));
            double z = 0.0;
            for (std::int64_t k = 0; k < K; ++k) {
                probs[std::size_t(k)] = std::exp(double(lb[k * plane + p]) - mx);
                z += probs[std::size_t(k)];
            }
            const double wy = w.weights[std::size_t(y)];
            loss_sum += wy * (std::log(z) - (double(lb[y * plane + p]) - mx));
            weight_sum += wy;
            if (dlogits) {
                T* db = dlogits->data() + b * K * plane;
                for (std::int64_t k = 0; k < K; ++k) {
                    const double pk = probs[std::size_t(k)] / z;
                    db[k * plane + p] = T(wy * (pk - (k == y ? 1.0 : 0.0)));
                }
            }
        }
    }

    const double loss = loss_sum / weight_sum;
    if (dlogits) {
        const T inv = T(1.0 / weight_sum);
        for (std::int64_t i = 0; i < dlogits->size(); ++i) (*dlogits)[i] *= inv;
    }
    return loss;
}

// Mean squared error; optionally fills d(loss)/d(pred).
template <typename T>
double mse_denoising_loss(const Tensor<T>& pred, const Tensor<T>& truth,
                          Tensor<T>* dpred = nullptr) {
    if (!pred.same_shape(truth))
        throw ShapeError("MSE shape mismatch: pred has " +
                         std::to_string(pred.size()) + " elements, truth " +
                         std::to_string(truth.size()));
    const std::int64_t n = pred.size();
    if (dpred) *dpred = Tensor<T>(pred.shape());
    double sum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = double(pred[i]) - double(truth[i]);
        sum += d * d;
        if (dpred) (*dpred)[i] = T(2.0 * d / double(n));
    }
    return sum / double(n);
}

inline double multitask_loss(double l_cd, double l_ss, const MultiTaskWeights& w) {
    w.validate();
    return w.lambda_cd * l_cd + w.lambda_ss * l_ss;
}

}  // namespace n2m
