#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "noise2map/common.hpp"
#include "noise2map/rng.hpp"
#include "noise2map/tensor.hpp"

namespace n2m::nn {

template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Param(std::string n, std::vector<std::int64_t> shape)
        : name(std::move(n)), value(shape), grad(std::move(shape)) {}

    std::int64_t size() const { return value.size(); }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

template <typename T>
using MatCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <typename T>
using MapRM =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMapRM = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
void init_normal(Tensor<T>& w, double std, Rng& rng) {
    for (std::int64_t i = 0; i < w.size(); ++i) w[i] = T(rng.normal() * std);
}

// ---------------------------------------------------------------------------
// Conv2d (square kernel, NCHW, im2col + GEMM)
// ---------------------------------------------------------------------------

template <typename T>
class Conv2d {
public:
    Conv2d(const std::string& prefix, int in_ch, int out_ch, int ksize, int stride,
           int pad, Rng& rng, bool zero_init = false)
        : in_ch_(in_ch),
          out_ch_(out_ch),
          ksize_(ksize),
          stride_(stride),
          pad_(pad),
          weight_(prefix + ".weight", {out_ch, in_ch, ksize, ksize}),
          bias_(prefix + ".bias", {out_ch}) {
        if (!zero_init)
            init_normal(weight_.value, std::sqrt(2.0 / double(in_ch * ksize * ksize)),
                        rng);
    }

    void collect(ParamList<T>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        const std::int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
        if (x.dim(1) != in_ch_)
            throw ShapeError(weight_.name + ": expected " + std::to_string(in_ch_) +
                             " input channels, got " + std::to_string(x.dim(1)));
        out_h_ = (H + 2 * pad_ - ksize_) / stride_ + 1;
        out_w_ = (W + 2 * pad_ - ksize_) / stride_ + 1;
        input_ = x;

        Tensor<T> y({B, out_ch_, out_h_, out_w_});
        const std::int64_t K = std::int64_t(in_ch_) * ksize_ * ksize_;
        const std::int64_t N = out_h_ * out_w_;

        CMapRM<T> Wm(weight_.value.data(), out_ch_, K);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bm(bias_.value.data(),
                                                                 out_ch_);
#pragma omp parallel for schedule(static)
        for (std::int64_t b = 0; b < B; ++b) {
            MatCM<T> col(K, N);
            im2col(x.data() + b * in_ch_ * H * W, H, W, col);
            MapRM<T> Om(y.data() + b * out_ch_ * N, out_ch_, N);
            Om.noalias() = Wm * col;
            Om.colwise() += bm;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::int64_t B = input_.dim(0), H = input_.dim(2), W = input_.dim(3);
        const std::int64_t K = std::int64_t(in_ch_) * ksize_ * ksize_;
        const std::int64_t N = out_h_ * out_w_;

        Tensor<T> dx(input_.shape());
        // Per-image partial dW/db, reduced in index order afterwards so the
        // result does not depend on the thread schedule.
        Tensor<T> dw_part({B, out_ch_, K});
        Tensor<T> db_part({B, out_ch_});

        CMapRM<T> Wm(weight_.value.data(), out_ch_, K);
#pragma omp parallel for schedule(static)
        for (std::int64_t b = 0; b < B; ++b) {
            MatCM<T> col(K, N);
            im2col(input_.data() + b * in_ch_ * H * W, H, W, col);
            CMapRM<T> dOm(dy.data() + b * out_ch_ * N, out_ch_, N);

            MapRM<T> dWm(dw_part.data() + b * out_ch_ * K, out_ch_, K);
            dWm.noalias() = dOm * col.transpose();
            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dbm(
                db_part.data() + b * out_ch_, out_ch_);
            dbm = dOm.rowwise().sum();

            MatCM<T> dcol(K, N);
            dcol.noalias() = Wm.transpose() * dOm;
            col2im(dcol, H, W, dx.data() + b * in_ch_ * H * W);
        }

        MapRM<T> dWacc(weight_.grad.data(), out_ch_, K);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dbacc(bias_.grad.data(),
                                                              out_ch_);
        for (std::int64_t b = 0; b < B; ++b) {
            dWacc += CMapRM<T>(dw_part.data() + b * out_ch_ * K, out_ch_, K);
            dbacc += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(
                db_part.data() + b * out_ch_, out_ch_);
        }
        return dx;
    }

    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }

private:
    void im2col(const T* img, std::int64_t H, std::int64_t W, MatCM<T>& col) const {
        for (std::int64_t oy = 0; oy < out_h_; ++oy) {
            for (std::int64_t ox = 0; ox < out_w_; ++ox) {
                T* column = col.data() + (oy * out_w_ + ox) * col.rows();
                std::int64_t k = 0;
                const std::int64_t iy0 = oy * stride_ - pad_;
                const std::int64_t ix0 = ox * stride_ - pad_;
                for (std::int64_t c = 0; c < in_ch_; ++c) {
                    const T* plane = img + c * H * W;
                    for (std::int64_t dy = 0; dy < ksize_; ++dy) {
                        const std::int64_t iy = iy0 + dy;
                        for (std::int64_t dx = 0; dx < ksize_; ++dx, ++k) {
                            const std::int64_t ix = ix0 + dx;
                            column[k] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                            ? plane[iy * W + ix]
                                            : T(0);
                        }
                    }
                }
            }
        }
    }

    void col2im(const MatCM<T>& dcol, std::int64_t H, std::int64_t W, T* dimg) const {
        std::fill(dimg, dimg + in_ch_ * H * W, T(0));
        for (std::int64_t oy = 0; oy < out_h_; ++oy) {
            for (std::int64_t ox = 0; ox < out_w_; ++ox) {
                const T* column = dcol.data() + (oy * out_w_ + ox) * dcol.rows();
                std::int64_t k = 0;
                const std::int64_t iy0 = oy * stride_ - pad_;
                const std::int64_t ix0 = ox * stride_ - pad_;
                for (std::int64_t c = 0; c < in_ch_; ++c) {
                    T* plane = dimg + c * H * W;
                    for (std::int64_t dy = 0; dy < ksize_; ++dy) {
                        const std::int64_t iy = iy0 + dy;
                        for (std::int64_t dx = 0; dx < ksize_; ++dx, ++k) {
                            const std::int64_t ix = ix0 + dx;
                            if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                plane[iy * W + ix] += column[k];
                        }
                    }
                }
            }
        }
    }

    std::int64_t in_ch_, out_ch_, ksize_, stride_, pad_;
    Param<T> weight_, bias_;
    Tensor<T> input_;
    std::int64_t out_h_ = 0, out_w_ = 0;
};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

template <typename T>
class Linear {
public:
    Linear(const std::string& prefix, int in, int out, Rng& rng, bool zero_init = false)
        : in_(in),
          out_(out),
          weight_(prefix + ".weight", {out, in}),
          bias_(prefix + ".bias", {out}) {
        if (!zero_init) init_normal(weight_.value, std::sqrt(1.0 / double(in)), rng);
    }

    void collect(ParamList<T>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    // x: [B, in] -> [B, out]
    Tensor<T> forward(const Tensor<T>& x) {
        input_ = x;
        const std::int64_t B = x.dim(0);
        Tensor<T> y({B, out_});
        CMapRM<T> Xm(x.data(), B, in_);
        CMapRM<T> Wm(weight_.value.data(), out_, in_);
        MapRM<T> Ym(y.data(), B, out_);
        Ym.noalias() = Xm * Wm.transpose();
        Ym.rowwise() +=
            Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias_.value.data(),
                                                                  out_);
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::int64_t B = input_.dim(0);
        CMapRM<T> Xm(input_.data(), B, in_);
        CMapRM<T> dYm(dy.data(), B, out_);
        MapRM<T> dWm(weight_.grad.data(), out_, in_);
        dWm.noalias() += dYm.transpose() * Xm;
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dbm(bias_.grad.data(), out_);
        dbm += dYm.colwise().sum().transpose();

        Tensor<T> dx(input_.shape());
        CMapRM<T> Wm(weight_.value.data(), out_, in_);
        MapRM<T> dXm(dx.data(), B, in_);
        dXm.noalias() = dYm * Wm;
        return dx;
    }

    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }

private:
    std::int64_t in_, out_;
    Param<T> weight_, bias_;
    Tensor<T> input_;
};

// ---------------------------------------------------------------------------
// GroupNorm (affine)
// ---------------------------------------------------------------------------

template <typename T>
class GroupNorm {
public:
    GroupNorm(const std::string& prefix, int channels, int groups)
        : channels_(channels),
          groups_(pick_groups(channels, groups)),
          gamma_(prefix + ".gamma", {channels}),
          beta_(prefix + ".beta", {channels}) {
        gamma_.value.fill(T(1));
    }

    static int pick_groups(int channels, int requested) {
        int g = std::min(requested, channels);
        while (channels % g != 0) --g;  // largest divisor <= requested
        return g;
    }

    void collect(ParamList<T>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        const std::int64_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
        const std::int64_t cg = C / groups_;
        const std::int64_t n = cg * plane;

        xhat_ = Tensor<T>(x.shape());
        invstd_ = Tensor<T>({B, std::int64_t(groups_)});
        Tensor<T> y(x.shape());

        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t g = 0; g < groups_; ++g) {
                const T* src = x.data() + (b * C + g * cg) * plane;
                double mean = 0.0;
                for (std::int64_t i = 0; i < n; ++i) mean += double(src[i]);
                mean /= double(n);
                double var = 0.0;
                for (std::int64_t i = 0; i < n; ++i) {
                    const double d = double(src[i]) - mean;
                    var += d * d;
                }
                var /= double(n);
                const T inv = T(1.0 / std::sqrt(var + 1e-5));
                invstd_(b, g) = inv;

                T* xh = xhat_.data() + (b * C + g * cg) * plane;
                T* dst = y.data() + (b * C + g * cg) * plane;
                for (std::int64_t c = 0; c < cg; ++c) {
                    const T ga = gamma_.value[g * cg + c];
                    const T be = beta_.value[g * cg + c];
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const T v = T((double(src[c * plane + i]) - mean)) * inv;
                        xh[c * plane + i] = v;
                        dst[c * plane + i] = ga * v + be;
                    }
                }
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::int64_t B = dy.dim(0), C = dy.dim(1), plane = dy.dim(2) * dy.dim(3);
        const std::int64_t cg = C / groups_;
        const std::int64_t n = cg * plane;
        Tensor<T> dx(dy.shape());

        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t g = 0; g < groups_; ++g) {
                const T* dyp = dy.data() + (b * C + g * cg) * plane;
                const T* xh = xhat_.data() + (b * C + g * cg) * plane;
                T* dxp = dx.data() + (b * C + g * cg) * plane;
                const T inv = invstd_(b, g);

                double s1 = 0.0, s2 = 0.0;
                for (std::int64_t c = 0; c < cg; ++c) {
                    const double ga = double(gamma_.value[g * cg + c]);
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const double dxh = ga * double(dyp[c * plane + i]);
                        s1 += dxh;
                        s2 += dxh * double(xh[c * plane + i]);
                    }
                }
                s1 /= double(n);
                s2 /= double(n);

                for (std::int64_t c = 0; c < cg; ++c) {
                    const double ga = double(gamma_.value[g * cg + c]);
                    double dgam = 0.0, dbet = 0.0;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const double dyv = double(dyp[c * plane + i]);
                        const double xhv = double(xh[c * plane + i]);
                        dxp[c * plane + i] =
                            T(double(inv) * (ga * dyv - s1 - xhv * s2));
                        dgam += dyv * xhv;
                        dbet += dyv;
                    }
                    gamma_.grad[g * cg + c] += T(dgam);
                    beta_.grad[g * cg + c] += T(dbet);
                }
            }
        }
        return dx;
    }

    Param<T>& gamma() { return gamma_; }
    Param<T>& beta() { return beta_; }

private:
    std::int64_t channels_, groups_;
    Param<T> gamma_, beta_;
    Tensor<T> xhat_;
    Tensor<T> invstd_;
};

// ---------------------------------------------------------------------------
// SiLU
// ---------------------------------------------------------------------------

template <typename T>
class SiLU {
public:
    Tensor<T> forward(const Tensor<T>& x) {
        input_ = x;
        Tensor<T> y(x.shape());
        const std::int64_t n = x.size();
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n; ++i) {
            const double v = double(x[i]);
            y[i] = T(v / (1.0 + std::exp(-v)));
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx(dy.shape());
        const std::int64_t n = dy.size();
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n; ++i) {
            const double v = double(input_[i]);
            const double s = 1.0 / (1.0 + std::exp(-v));
            dx[i] = T(double(dy[i]) * s * (1.0 + v * (1.0 - s)));
        }
        return dx;
    }

private:
    Tensor<T> input_;
};

// ---------------------------------------------------------------------------
// Nearest-neighbour 2x upsampling
// ---------------------------------------------------------------------------

template <typename T>
class Upsample2x {
public:
    Tensor<T> forward(const Tensor<T>& x) {
        const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        Tensor<T> y({B, C, H * 2, W * 2});
#pragma omp parallel for schedule(static)
        for (std::int64_t bc = 0; bc < B * C; ++bc) {
            const T* src = x.data() + bc * H * W;
            T* dst = y.data() + bc * H * W * 4;
            for (std::int64_t i = 0; i < H; ++i) {
                for (std::int64_t j = 0; j < W; ++j) {
                    const T v = src[i * W + j];
                    dst[(2 * i) * 2 * W + 2 * j] = v;
                    dst[(2 * i) * 2 * W + 2 * j + 1] = v;
                    dst[(2 * i + 1) * 2 * W + 2 * j] = v;
                    dst[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
                }
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::int64_t B = dy.dim(0), C = dy.dim(1), H2 = dy.dim(2), W2 = dy.dim(3);
        const std::int64_t H = H2 / 2, W = W2 / 2;
        Tensor<T> dx({B, C, H, W});
#pragma omp parallel for schedule(static)
        for (std::int64_t bc = 0; bc < B * C; ++bc) {
            const T* src = dy.data() + bc * H2 * W2;
            T* dst = dx.data() + bc * H * W;
            for (std::int64_t i = 0; i < H; ++i) {
                for (std::int64_t j = 0; j < W; ++j) {
                    dst[i * W + j] = src[(2 * i) * W2 + 2 * j] +
                                     src[(2 * i) * W2 + 2 * j + 1] +
                                     src[(2 * i + 1) * W2 + 2 * j] +
                                     src[(2 * i + 1) * W2 + 2 * j + 1];
                }
            }
        }
        return dx;
    }
};

// ---------------------------------------------------------------------------
// Bottleneck self-attention (pre-norm, multi-head over spatial positions)
// ---------------------------------------------------------------------------

template <typename T>
class SelfAttention {
public:
    SelfAttention(const std::string& prefix, int channels, Rng& rng)
        : channels_(channels),
          heads_(channels % 4 == 0 ? 4 : 1),
          norm_(prefix + ".norm", channels, 8),
          wq_(prefix + ".q", channels, channels, rng),
          wk_(prefix + ".k", channels, channels, rng),
          wv_(prefix + ".v", channels, channels, rng),
          wo_(prefix + ".proj", channels, channels, rng, /*zero_init=*/true) {}

    void collect(ParamList<T>& out) {
        norm_.collect(out);
        wq_.collect(out);
        wk_.collect(out);
        wv_.collect(out);
        wo_.collect(out);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::int64_t N = H * W;
        const std::int64_t dh = C / heads_;
        const T scale = T(1.0 / std::sqrt(double(dh)));

        input_ = x;
        normed_ = norm_.forward(x);

        q_ = project(wq_, normed_);
        k_ = project(wk_, normed_);
        v_ = project(wv_, normed_);
        att_ = Tensor<T>({B, std::int64_t(heads_), N, N});
        attended_ = Tensor<T>({B, C, H, W});

        for (std::int64_t b = 0; b < B; ++b) {
#pragma omp parallel for schedule(static)
            for (std::int64_t h = 0; h < heads_; ++h) {
                CMapRM<T> Q(q_.data() + (b * C + h * dh) * N, dh, N);
                CMapRM<T> K(k_.data() + (b * C + h * dh) * N, dh, N);
                CMapRM<T> V(v_.data() + (b * C + h * dh) * N, dh, N);
                MapRM<T> A(att_.data() + (b * heads_ + h) * N * N, N, N);
                A.noalias() = (Q.transpose() * K) * scale;
                // row-wise softmax over keys
                for (std::int64_t r = 0; r < N; ++r) {
                    T* row = A.data() + r * N;
                    T mx = row[0];
                    for (std::int64_t c = 1; c < N; ++c) mx = std::max(mx, row[c]);
                    double sum = 0.0;
                    for (std::int64_t c = 0; c < N; ++c) {
                        const double e = std::exp(double(row[c] - mx));
                        row[c] = T(e);
                        sum += e;
                    }
                    const T inv = T(1.0 / sum);
                    for (std::int64_t c = 0; c < N; ++c) row[c] *= inv;
                }
                MapRM<T> O(attended_.data() + (b * C + h * dh) * N, dh, N);
                O.noalias() = V * A.transpose();
            }
        }

        Tensor<T> y = project(wo_, attended_);
        for (std::int64_t i = 0; i < y.size(); ++i) y[i] += x[i];
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::int64_t B = input_.dim(0), C = input_.dim(1);
        const std::int64_t N = input_.dim(2) * input_.dim(3);
        const std::int64_t dh = C / heads_;
        const T scale = T(1.0 / std::sqrt(double(dh)));

        Tensor<T> d_attended = project_backward(wo_, attended_, dy);

        Tensor<T> dq(q_.shape()), dk(k_.shape()), dv(v_.shape());
        for (std::int64_t b = 0; b < B; ++b) {
#pragma omp parallel for schedule(static)
            for (std::int64_t h = 0; h < heads_; ++h) {
                CMapRM<T> Q(q_.data() + (b * C + h * dh) * N, dh, N);
                CMapRM<T> K(k_.data() + (b * C + h * dh) * N, dh, N);
                CMapRM<T> V(v_.data() + (b * C + h * dh) * N, dh, N);
                CMapRM<T> A(att_.data() + (b * heads_ + h) * N * N, N, N);
                CMapRM<T> dO(d_attended.data() + (b * C + h * dh) * N, dh, N);

                MatCM<T> dA(N, N);
                dA.noalias() = dO.transpose() * V;  // dA(q, k)
                // softmax backward, row-wise
                MatCM<T> dS(N, N);
                for (std::int64_t r = 0; r < N; ++r) {
                    double dot = 0.0;
                    for (std::int64_t c = 0; c < N; ++c)
                        dot += double(dA(r, c)) * double(A(r, c));
                    for (std::int64_t c = 0; c < N; ++c)
                        dS(r, c) = T(double(A(r, c)) * (double(dA(r, c)) - dot));
                }

                MapRM<T> dQ(dq.data() + (b * C + h * dh) * N, dh, N);
                MapRM<T> dK(dk.data() + (b * C + h * dh) * N, dh, N);
                MapRM<T> dV(dv.data() + (b * C + h * dh) * N, dh, N);
                dQ.noalias() = (K * dS.transpose()) * scale;
                dK.noalias() = (Q * dS) * scale;
                dV.noalias() = dO * A;
            }
        }

        Tensor<T> d_normed = project_backward(wq_, normed_, dq);
        {
            Tensor<T> tmp = project_backward(wk_, normed_, dk);
            for (std::int64_t i = 0; i < d_normed.size(); ++i) d_normed[i] += tmp[i];
            tmp = project_backward(wv_, normed_, dv);
            for (std::int64_t i = 0; i < d_normed.size(); ++i) d_normed[i] += tmp[i];
        }

        Tensor<T> dx = norm_.backward(d_normed);
        for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];  // residual
        return dx;
    }

private:
    // 1x1 channel projection: y[b] = W * x[b] + bias, x viewed as [C, N].
    struct Proj {
        Param<T> weight, bias;
        Tensor<T> last_in;
        Proj(const std::string& prefix, int in, int out, Rng& rng,
             bool zero_init = false)
            : weight(prefix + ".weight", {out, in}), bias(prefix + ".bias", {out}) {
            if (!zero_init) init_normal(weight.value, std::sqrt(1.0 / double(in)), rng);
        }
        void collect(ParamList<T>& out) {
            out.push_back(&weight);
            out.push_back(&bias);
        }
    };

    Tensor<T> project(Proj& p, const Tensor<T>& x) {
        const std::int64_t B = x.dim(0), C = x.dim(1), N = x.dim(2) * x.dim(3);
        const std::int64_t out_c = p.weight.value.dim(0);
        p.last_in = x;
        Tensor<T> y({B, out_c, x.dim(2), x.dim(3)});
        CMapRM<T> Wm(p.weight.value.data(), out_c, C);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bm(p.bias.value.data(),
                                                                 out_c);
        for (std::int64_t b = 0; b < B; ++b) {
            CMapRM<T> X(x.data() + b * C * N, C, N);
            MapRM<T> Y(y.data() + b * out_c * N, out_c, N);
            Y.noalias() = Wm * X;
            Y.colwise() += bm;
        }
        return y;
    }

    Tensor<T> project_backward(Proj& p, const Tensor<T>& x, const Tensor<T>& dy) {
        const std::int64_t B = x.dim(0), C = x.dim(1), N = x.dim(2) * x.dim(3);
        const std::int64_t out_c = p.weight.value.dim(0);
        Tensor<T> dx(x.shape());
        CMapRM<T> Wm(p.weight.value.data(), out_c, C);
        MapRM<T> dWm(p.weight.grad.data(), out_c, C);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dbm(p.bias.grad.data(), out_c);
        for (std::int64_t b = 0; b < B; ++b) {
            CMapRM<T> X(x.data() + b * C * N, C, N);
            CMapRM<T> dY(dy.data() + b * out_c * N, out_c, N);
            dWm.noalias() += dY * X.transpose();
            dbm += dY.rowwise().sum();
            MapRM<T> dX(dx.data() + b * C * N, C, N);
            dX.noalias() = Wm.transpose() * dY;
        }
        return dx;
    }

    std::int64_t channels_, heads_;
    GroupNorm<T> norm_;
    Proj wq_, wk_, wv_, wo_;
    Tensor<T> input_, normed_, q_, k_, v_, att_, attended_;
};

// ---------------------------------------------------------------------------
// Timestep-conditioned residual block
// ---------------------------------------------------------------------------

template <typename T>
class ResBlock {
public:
    ResBlock(const std::string& prefix, int in_ch, int out_ch, int time_dim, Rng& rng)
        : in_ch_(in_ch),
          out_ch_(out_ch),
          norm1_(prefix + ".norm1", in_ch, 8),
          conv1_(prefix + ".conv1", in_ch, out_ch, 3, 1, 1, rng),
          norm2_(prefix + ".norm2", out_ch, 8),
          conv2_(prefix + ".conv2", out_ch, out_ch, 3, 1, 1, rng, /*zero_init=*/true) {
        if (time_dim > 0)
            time_proj_ =
                std::make_unique<Linear<T>>(prefix + ".time_proj", time_dim, out_ch, rng);
        if (in_ch != out_ch)
            skip_ = std::make_unique<Conv2d<T>>(prefix + ".skip", in_ch, out_ch, 1, 1, 0,
                                                rng);
    }

    void collect(ParamList<T>& out) {
        norm1_.collect(out);
        conv1_.collect(out);
        if (time_proj_) time_proj_->collect(out);
        norm2_.collect(out);
        conv2_.collect(out);
        if (skip_) skip_->collect(out);
    }

    // temb: [B, time_dim] features from the shared time MLP, or null when
    // timestep conditioning is disabled.
    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>* temb) {
        input_ = x;
        Tensor<T> h = act1_.forward(norm1_.forward(x));
        h = conv1_.forward(h);
        if (time_proj_ && temb) {
            Tensor<T> tp = time_proj_->forward(*temb);  // [B, out_ch]
            const std::int64_t B = h.dim(0), plane = h.dim(2) * h.dim(3);
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t c = 0; c < out_ch_; ++c) {
                    const T v = tp(b, c);
                    T* dst = h.data() + (b * out_ch_ + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) dst[i] += v;
                }
            used_temb_ = true;
        } else {
            used_temb_ = false;
        }
        h = conv2_.forward(act2_.forward(norm2_.forward(h)));

        Tensor<T> sk = skip_ ? skip_->forward(x) : x;
        for (std::int64_t i = 0; i < h.size(); ++i) h[i] += sk[i];
        return h;
    }

    // Returns gradient w.r.t. x; accumulates gradient w.r.t. temb into dtemb
    // (when conditioning is active and dtemb != null).
    Tensor<T> backward(const Tensor<T>& dy, Tensor<T>* dtemb) {
        Tensor<T> dh = conv2_.backward(dy);
        dh = norm2_.backward(act2_.backward(dh));

        if (used_temb_ && time_proj_) {
            const std::int64_t B = dh.dim(0), plane = dh.dim(2) * dh.dim(3);
            Tensor<T> dtp({B, out_ch_});
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t c = 0; c < out_ch_; ++c) {
                    const T* src = dh.data() + (b * out_ch_ + c) * plane;
                    double s = 0.0;
                    for (std::int64_t i = 0; i < plane; ++i) s += double(src[i]);
                    dtp(b, c) = T(s);
                }
            Tensor<T> dt = time_proj_->backward(dtp);
            if (dtemb)
                for (std::int64_t i = 0; i < dt.size(); ++i) (*dtemb)[i] += dt[i];
        }

        Tensor<T> dx = norm1_.backward(act1_.backward(conv1_.backward(dh)));
        if (skip_) {
            Tensor<T> ds = skip_->backward(dy);
            for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += ds[i];
        } else {
            for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
        }
        return dx;
    }

private:
    std::int64_t in_ch_, out_ch_;
    GroupNorm<T> norm1_;
    SiLU<T> act1_;
    Conv2d<T> conv1_;
    std::unique_ptr<Linear<T>> time_proj_;
    GroupNorm<T> norm2_;
    SiLU<T> act2_;
    Conv2d<T> conv2_;
    std::unique_ptr<Conv2d<T>> skip_;
    Tensor<T> input_;
    bool used_temb_ = false;
};

}  // namespace n2m::nn
