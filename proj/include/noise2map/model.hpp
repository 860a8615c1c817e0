#pragma once

#include <atomic>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "noise2map/nn.hpp"
#include "noise2map/rng.hpp"

namespace n2m {

struct UNetConfig {
    int in_channels = 3;  // single-image channel count C; the CD stem takes 2C
    int out_classes = 2;
    std::vector<int> stage_channels = {128, 256, 512};
    int num_resolutions = 5;
    int time_embed_dim = 512;
    bool attention_at_bottleneck = true;
    bool use_timestep_conditioning = true;

    void validate() const {
        if (in_channels < 1) throw ConfigError("in_channels must be positive");
        if (out_classes < 2) throw ConfigError("out_classes must be >= 2");
        if (stage_channels.empty()) throw ConfigError("stage_channels must be non-empty");
        for (int c : stage_channels)
            if (c < 1) throw ConfigError("stage_channels entries must be positive");
        if (num_resolutions < int(stage_channels.size()))
            throw ConfigError("num_resolutions (" + std::to_string(num_resolutions) +
                              ") must be >= len(stage_channels) (" +
                              std::to_string(stage_channels.size()) + ")");
        if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
            throw ConfigError("time_embed_dim must be even and >= 2");
    }

    // Stage widths padded to num_resolutions; widths beyond the configured
    // list reuse the last entry.
    std::vector<int> stage_plan() const {
        std::vector<int> plan = stage_channels;
        while (int(plan.size()) < num_resolutions) plan.push_back(plan.back());
        return plan;
    }

    static UNetConfig desk(int in_channels = 3, int out_classes = 2) {
        UNetConfig cfg;
        cfg.in_channels = in_channels;
        cfg.out_classes = out_classes;
        cfg.stage_channels = {16, 32, 64};
        cfg.num_resolutions = 3;
        cfg.time_embed_dim = 64;
        return cfg;
    }

    static UNetConfig reference(int in_channels = 3, int out_classes = 2) {
        UNetConfig cfg;
        cfg.in_channels = in_channels;
        cfg.out_classes = out_classes;
        return cfg;
    }
};

// Sinusoidal position encoding of timestep values: first half sin(t*w_k),
// second half cos(t*w_k), w_k = exp(-k * ln(1e4) / (dim/2 - 1)).
template <typename T>
Tensor<T> timestep_embedding(const std::vector<int>& t, int dim) {
    if (dim < 2 || dim % 2 != 0)
        throw ConfigError("timestep embedding dim must be even and >= 2, got " +
                          std::to_string(dim));
    const int half = dim / 2;
    Tensor<T> out({std::int64_t(t.size()), dim});
    for (std::size_t b = 0; b < t.size(); ++b) {
        if (t[b] < 0) throw RangeError("timestep must be non-negative");
        for (int k = 0; k < half; ++k) {
            const double w =
                half == 1 ? 1.0
                          : std::exp(-double(k) * std::log(1e4) / double(half - 1));
            const double a = double(t[b]) * w;
            out(std::int64_t(b), k) = T(std::sin(a));
            out(std::int64_t(b), half + k) = T(std::cos(a));
        }
    }
    return out;
}

// Timestep-conditioned attention U-Net with one output projection per head
// and task-specific input stems (3-channel image stem shared by SS and
// pretraining, 6-channel stem for bi-temporal CD pairs).
template <typename T>
class DenoiserModel {
public:
    DenoiserModel(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const std::vector<int> plan = cfg_.stage_plan();
        const int R = cfg_.num_resolutions;
        const int C = cfg_.in_channels;
        const int D = cfg_.use_timestep_conditioning ? cfg_.time_embed_dim : 0;

        if (cfg_.use_timestep_conditioning) {
            time_fc1_ = std::make_unique<nn::Linear<T>>("time_mlp.fc1",
                                                        cfg_.time_embed_dim,
                                                        cfg_.time_embed_dim, rng);
            time_fc2_ = std::make_unique<nn::Linear<T>>("time_mlp.fc2",
                                                        cfg_.time_embed_dim,
                                                        cfg_.time_embed_dim, rng);
        }

        stem_img_ = std::make_unique<nn::Conv2d<T>>("stem.img", C, plan[0], 3, 1, 1, rng);
        stem_pair_ =
            std::make_unique<nn::Conv2d<T>>("stem.pair", 2 * C, plan[0], 3, 1, 1, rng);

        int ch = plan[0];
        for (int i = 0; i < R; ++i) {
            enc_.push_back(std::make_unique<nn::ResBlock<T>>(
                "enc" + std::to_string(i) + ".res", ch, plan[std::size_t(i)], D, rng));
            ch = plan[std::size_t(i)];
            if (i < R - 1)
                down_.push_back(std::make_unique<nn::Conv2d<T>>(
                    "enc" + std::to_string(i) + ".down", ch, ch, 3, 2, 1, rng));
        }

        mid_res1_ = std::make_unique<nn::ResBlock<T>>("mid.res1", ch, ch, D, rng);
        if (cfg_.attention_at_bottleneck)
            mid_attn_ = std::make_unique<nn::SelfAttention<T>>("mid.attn", ch, rng);
        mid_res2_ = std::make_unique<nn::ResBlock<T>>("mid.res2", ch, ch, D, rng);

        for (int i = R - 1; i >= 0; --i) {
            dec_.push_back(std::make_unique<nn::ResBlock<T>>(
                "dec" + std::to_string(i) + ".res", ch + plan[std::size_t(i)],
                plan[std::size_t(i)], D, rng));
            ch = plan[std::size_t(i)];
            if (i > 0) {
                up_.push_back(std::make_unique<nn::Conv2d<T>>(
                    "dec" + std::to_string(i) + ".up", ch, plan[std::size_t(i - 1)], 3,
                    1, 1, rng));
                ch = plan[std::size_t(i - 1)];
            }
        }

        out_norm_ = std::make_unique<nn::GroupNorm<T>>("out_norm", plan[0], 8);
        head_ss_ = std::make_unique<nn::Conv2d<T>>("head.ss", plan[0], cfg_.out_classes,
                                                   1, 1, 0, rng, /*zero_init=*/true);
        head_cd_ = std::make_unique<nn::Conv2d<T>>("head.cd", plan[0], cfg_.out_classes,
                                                   1, 1, 0, rng, /*zero_init=*/true);
        head_pretrain_ = std::make_unique<nn::Conv2d<T>>("head.pretrain", plan[0], C, 1,
                                                         1, 0, rng, /*zero_init=*/true);

        if (time_fc1_) {
            time_fc1_->collect(params_);
            time_fc2_->collect(params_);
        }
        stem_img_->collect(params_);
        stem_pair_->collect(params_);
        for (auto& e : enc_) e->collect(params_);
        for (auto& d : down_) d->collect(params_);
        mid_res1_->collect(params_);
        if (mid_attn_) mid_attn_->collect(params_);
        mid_res2_->collect(params_);
        for (auto& d : dec_) d->collect(params_);
        for (auto& u : up_) u->collect(params_);
        out_norm_->collect(params_);
        head_ss_->collect(params_);
        head_cd_->collect(params_);
        head_pretrain_->collect(params_);
    }

    const UNetConfig& config() const { return cfg_; }

    // x: [B, C_in, H, W]; t: one timestep per batch entry.
    Tensor<T> forward(const Tensor<T>& x, const std::vector<int>& t, Head head) {
        const int R = cfg_.num_resolutions;
        const std::int64_t divisor = std::int64_t(1) << (R - 1);
        if (x.rank() != 4) throw ShapeError("forward expects [B, C, H, W] input");
        if (x.dim(2) % divisor != 0 || x.dim(3) % divisor != 0)
            throw ShapeError("spatial size " + std::to_string(x.dim(2)) + "x" +
                             std::to_string(x.dim(3)) + " not divisible by " +
                             std::to_string(divisor) + "; pad the input first");
        if (std::size_t(x.dim(0)) != t.size())
            throw ShapeError("timestep batch size mismatch");
        const std::int64_t expect_c =
            head == Head::CD ? 2 * cfg_.in_channels : cfg_.in_channels;
        if (x.dim(1) != expect_c)
            throw ShapeError("head '" + std::string(to_string(head)) + "' expects " +
                             std::to_string(expect_c) + " channels, got " +
                             std::to_string(x.dim(1)));

        forward_calls_.fetch_add(1, std::memory_order_relaxed);
        head_used_ = head;

        if (cfg_.use_timestep_conditioning) {
            Tensor<T> sinus = timestep_embedding<T>(t, cfg_.time_embed_dim);
            temb_ = time_fc2_->forward(time_act_.forward(time_fc1_->forward(sinus)));
        } else {
            temb_ = Tensor<T>();
        }
        const Tensor<T>* temb = cfg_.use_timestep_conditioning ? &temb_ : nullptr;

        Tensor<T> h =
            head == Head::CD ? stem_pair_->forward(x) : stem_img_->forward(x);

        skips_.clear();
        for (int i = 0; i < R; ++i) {
            h = enc_[std::size_t(i)]->forward(h, temb);
            skips_.push_back(h);
            if (i < R - 1) h = down_[std::size_t(i)]->forward(h);
        }

        h = mid_res1_->forward(h, temb);
        if (mid_attn_) h = mid_attn_->forward(h);
        h = mid_res2_->forward(h, temb);

        for (int i = R - 1; i >= 0; --i) {
            h = concat_channels(h, skips_[std::size_t(i)]);
            h = dec_[std::size_t(R - 1 - i)]->forward(h, temb);
            if (i > 0) {
                h = upsampler_at(R - 1 - i).forward(h);
                h = up_[std::size_t(R - 1 - i)]->forward(h);
            }
        }

        h = out_act_.forward(out_norm_->forward(h));
        Tensor<T> logits = head_conv(head).forward(h);
        for (std::int64_t i = 0; i < logits.size(); ++i)
            if (!std::isfinite(double(logits[i])))
                throw NumericError("non-finite activation in model output");
        return logits;
    }

    // Backpropagates d(loss)/d(logits) from the preceding forward call and
    // accumulates parameter gradients.
    void backward(const Tensor<T>& dlogits) {
        const int R = cfg_.num_resolutions;
        Tensor<T> dh = head_conv(head_used_).backward(dlogits);
        dh = out_norm_->backward(out_act_.backward(dh));

        Tensor<T> dtemb;
        Tensor<T>* dtemb_ptr = nullptr;
        if (cfg_.use_timestep_conditioning) {
            dtemb = Tensor<T>(temb_.shape());
            dtemb_ptr = &dtemb;
        }

        std::vector<Tensor<T>> dskips(static_cast<std::size_t>(R));
        for (int i = 0; i <= R - 1; ++i) {
            if (i > 0) {
                dh = up_[std::size_t(R - 1 - i)]->backward(dh);
                dh = upsampler_at(R - 1 - i).backward(dh);
            }
            Tensor<T> dcat = dec_[std::size_t(R - 1 - i)]->backward(dh, dtemb_ptr);
            split_channels(dcat, skips_[std::size_t(i)].dim(1), dh,
                           dskips[std::size_t(i)]);
        }

        dh = mid_res2_->backward(dh, dtemb_ptr);
        if (mid_attn_) dh = mid_attn_->backward(dh);
        dh = mid_res1_->backward(dh, dtemb_ptr);

        for (int i = R - 1; i >= 0; --i) {
            if (i < R - 1) dh = down_[std::size_t(i)]->backward(dh);
            for (std::int64_t j = 0; j < dh.size(); ++j)
                dh[j] += dskips[std::size_t(i)][j];
            dh = enc_[std::size_t(i)]->backward(dh, dtemb_ptr);
        }

        if (head_used_ == Head::CD)
            stem_pair_->backward(dh);
        else
            stem_img_->backward(dh);

        if (dtemb_ptr) {
            Tensor<T> d1 = time_fc2_->backward(dtemb);
            time_fc1_->backward(time_act_.backward(d1));
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->grad.fill(T(0));
    }

    nn::ParamList<T>& parameters() { return params_; }

    nn::Param<T>* find(const std::string& name) {
        for (auto* p : params_)
            if (p->name == name) return p;
        return nullptr;
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto* p : params_) n += p->value.size();
        return n;
    }

    std::uint64_t forward_calls() const {
        return forward_calls_.load(std::memory_order_relaxed);
    }

    // Parameter-name predicate for the trunk (everything except heads).
    static bool is_head_param(const std::string& name) {
        return name.rfind("head.", 0) == 0;
    }

    // Parameters trained for a given objective: trunk plus the stems and
    // head that objective actually drives. Keeping unused heads out of the
    // optimizer leaves them bit-identical across a training run.
    nn::ParamList<T> trainable_for(Head head) {
        nn::ParamList<T> out;
        for (auto* p : params_) {
            const std::string& n = p->name;
            if (n.rfind("head.", 0) == 0) {
                if (n.rfind(std::string("head.") + to_string(head), 0) != 0) continue;
            } else if (n.rfind("stem.img", 0) == 0) {
                if (head == Head::CD) continue;
            } else if (n.rfind("stem.pair", 0) == 0) {
                if (head != Head::CD) continue;
            }
            out.push_back(p);
        }
        return out;
    }

    nn::ParamList<T> trainable_multitask() {
        nn::ParamList<T> out;
        for (auto* p : params_)
            if (p->name.rfind("head.pretrain", 0) != 0) out.push_back(p);
        return out;
    }

private:
    static Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
        const std::int64_t B = a.dim(0), plane = a.dim(2) * a.dim(3);
        Tensor<T> out({B, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)});
        for (std::int64_t bi = 0; bi < B; ++bi) {
            std::copy(a.data() + bi * a.dim(1) * plane,
                      a.data() + (bi + 1) * a.dim(1) * plane,
                      out.data() + bi * out.dim(1) * plane);
            std::copy(b.data() + bi * b.dim(1) * plane,
                      b.data() + (bi + 1) * b.dim(1) * plane,
                      out.data() + bi * out.dim(1) * plane + a.dim(1) * plane);
        }
        return out;
    }

    static void split_channels(const Tensor<T>& dcat, std::int64_t skip_ch,
                               Tensor<T>& dmain, Tensor<T>& dskip) {
        const std::int64_t B = dcat.dim(0), plane = dcat.dim(2) * dcat.dim(3);
        const std::int64_t main_ch = dcat.dim(1) - skip_ch;
        dmain = Tensor<T>({B, main_ch, dcat.dim(2), dcat.dim(3)});
        dskip = Tensor<T>({B, skip_ch, dcat.dim(2), dcat.dim(3)});
        for (std::int64_t bi = 0; bi < B; ++bi) {
            const T* src = dcat.data() + bi * dcat.dim(1) * plane;
            std::copy(src, src + main_ch * plane, dmain.data() + bi * main_ch * plane);
            std::copy(src + main_ch * plane, src + dcat.dim(1) * plane,
                      dskip.data() + bi * skip_ch * plane);
        }
    }

    nn::Conv2d<T>& head_conv(Head head) {
        switch (head) {
            case Head::SS: return *head_ss_;
            case Head::CD: return *head_cd_;
            default: return *head_pretrain_;
        }
    }

    nn::Upsample2x<T>& upsampler_at(int i) {
        while (int(upsamplers_.size()) <= i)
            upsamplers_.push_back(std::make_unique<nn::Upsample2x<T>>());
        return *upsamplers_[std::size_t(i)];
    }

    UNetConfig cfg_;
    std::unique_ptr<nn::Linear<T>> time_fc1_, time_fc2_;
    nn::SiLU<T> time_act_;
    std::unique_ptr<nn::Conv2d<T>> stem_img_, stem_pair_;
    std::vector<std::unique_ptr<nn::ResBlock<T>>> enc_;
    std::vector<std::unique_ptr<nn::Conv2d<T>>> down_;
    std::unique_ptr<nn::ResBlock<T>> mid_res1_, mid_res2_;
    std::unique_ptr<nn::SelfAttention<T>> mid_attn_;
    std::vector<std::unique_ptr<nn::ResBlock<T>>> dec_;
    std::vector<std::unique_ptr<nn::Conv2d<T>>> up_;
    std::vector<std::unique_ptr<nn::Upsample2x<T>>> upsamplers_;
    std::unique_ptr<nn::GroupNorm<T>> out_norm_;
    std::unique_ptr<nn::Conv2d<T>> head_ss_, head_cd_, head_pretrain_;

    nn::SiLU<T> out_act_;
    nn::ParamList<T> params_;
    std::vector<Tensor<T>> skips_;
    Tensor<T> temb_;
    Head head_used_ = Head::SS;
    std::atomic<std::uint64_t> forward_calls_{0};
};

template <typename T>
std::unique_ptr<DenoiserModel<T>> build_model(const UNetConfig& cfg, Rng& rng) {
    return std::make_unique<DenoiserModel<T>>(cfg, rng);
}

template <typename T>
std::int64_t count_parameters(const DenoiserModel<T>& model) {
    return model.parameter_count();
}

using Model = DenoiserModel<float>;

}  // namespace n2m
