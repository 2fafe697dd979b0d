// Conditional DDPM on small images: linear noise schedule, eps-prediction
// U-Net with one cross-attention site per resolution stage, MSE training
// loss, and ancestral sampling with optional classifier-free guidance.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lmdiff/checkpoint.hpp"
#include "lmdiff/params.hpp"
#include "lmdiff/random.hpp"
#include "lmdiff/tensor.hpp"

namespace lmdiff::diff {

using nn::BoolMask;
using nn::ParamStore;
using nn::Shape;
using nn::Tensor;

// ---------------------------------------------------------------- schedule

struct NoiseSchedule {
    std::vector<double> betas;
    std::vector<double> alphas_bar;  // cumulative products of (1 - beta)

    int n_steps() const { return static_cast<int>(betas.size()); }
};

inline NoiseSchedule make_schedule(int n_steps, double beta_start, double beta_end) {
    if (n_steps < 1) throw std::runtime_error("make_schedule: need at least one step");
    if (!(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0))
        throw std::runtime_error("make_schedule: betas must satisfy 0 < start <= end < 1");
    NoiseSchedule s;
    s.betas.resize(n_steps);
    s.alphas_bar.resize(n_steps);
    double prod = 1.0;
    for (int i = 0; i < n_steps; ++i) {
        s.betas[i] = n_steps == 1 ? beta_start
                                  : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (n_steps - 1);
        prod *= 1.0 - s.betas[i];
        s.alphas_bar[i] = prod;
    }
    return s;
}

// sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps
template <class T>
Tensor<T> q_sample(const Tensor<T>& z0, int step, const Tensor<T>& eps, const NoiseSchedule& sched) {
    if (step < 0 || step >= sched.n_steps()) throw std::runtime_error("q_sample: step out of range");
    if (z0.shape != eps.shape) throw std::runtime_error("q_sample: shape mismatch");
    const double abar = sched.alphas_bar[step];
    return nn::add(nn::scale(z0, std::sqrt(abar)), nn::scale(eps, std::sqrt(1.0 - abar)));
}

// ------------------------------------------------------------------ U-Net

struct DenoiserConfig {
    int in_channels = 3;
    int img_size = 16;
    int base_width = 16;
    int n_down = 2;       // resolution halvings; 0 keeps a single stage
    int cond_dim = 64;    // conditioning token width the sites project from
    int time_dim = 64;
    int n_steps = 200;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    void validate() const {
        if (in_channels < 1 || img_size < 1 || base_width < 1) throw std::runtime_error("DenoiserConfig: bad dims");
        if (n_down < 0 || (n_down > 0 && img_size % (1 << n_down) != 0))
            throw std::runtime_error("DenoiserConfig: img_size not divisible by 2^n_down");
    }
};

// Per-site attention is pluggable so an adapter can replace it: the callback
// receives the site name and the normalized spatial tokens [L x C_site] and
// returns the attention output in the same shape (the residual add stays
// inside the network).
template <class T>
using SiteAttentionFn = std::function<Tensor<T>(const std::string& site, const Tensor<T>& q_tokens)>;

template <class T>
class DenoiserNet {
public:
    DenoiserConfig cfg;
    ParamStore<T> params;

    DenoiserNet(const DenoiserConfig& config, RandomStream init_stream, bool trainable = true) : cfg(config) {
        cfg.validate();
        auto conv = [&](const std::string& name, int co, int ci, int k) {
            const double std_dev = 1.0 / std::sqrt(static_cast<double>(ci) * k * k);
            params.add(name + ".w", nn::randn_scaled<T>(init_stream, {co, ci, k, k}, std_dev, trainable));
            params.add(name + ".b", Tensor<T>::zeros({co}, trainable));
        };
        auto lin = [&](const std::string& name, int in, int out) {
            params.add(name + ".w", nn::randn_scaled<T>(init_stream, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), trainable));
            params.add(name + ".b", Tensor<T>::zeros({out}, trainable));
        };
        auto norm = [&](const std::string& name, int c) {
            params.add(name + ".gain", Tensor<T>::full({c}, T(1), trainable));
            params.add(name + ".bias", Tensor<T>::zeros({c}, trainable));
        };
        auto block = [&](const std::string& name, int c) {
            norm(name + ".norm1", c);
            conv(name + ".conv1", c, c, 3);
            lin(name + ".time", cfg.time_dim, c);
            norm(name + ".norm2", c);
            conv(name + ".conv2", c, c, 3);
        };
        auto site = [&](const std::string& name, int c) {
            norm(name + ".norm", c);
            params.add(name + ".wq", nn::randn_scaled<T>(init_stream, {c, c}, 1.0 / std::sqrt(static_cast<double>(c)), trainable));
            params.add(name + ".wk", nn::randn_scaled<T>(init_stream, {cfg.cond_dim, c}, 1.0 / std::sqrt(static_cast<double>(cfg.cond_dim)), trainable));
            params.add(name + ".wv", nn::randn_scaled<T>(init_stream, {cfg.cond_dim, c}, 1.0 / std::sqrt(static_cast<double>(cfg.cond_dim)), trainable));
        };

        lin("dn.time.fc1", cfg.time_dim, cfg.time_dim);
        lin("dn.time.fc2", cfg.time_dim, cfg.time_dim);
        conv("dn.stem", width_at(0), cfg.in_channels, 3);
        for (int i = 0; i < cfg.n_down; ++i) {
            const std::string p = "dn.down" + std::to_string(i);
            block(p + ".block", width_at(i));
            site(p + ".site", width_at(i));
            conv(p + ".down", width_at(i + 1), width_at(i), 3);
        }
        block("dn.mid.block1", width_at(cfg.n_down));
        site("dn.mid.site", width_at(cfg.n_down));
        block("dn.mid.block2", width_at(cfg.n_down));
        for (int i = cfg.n_down - 1; i >= 0; --i) {
            const std::string p = "dn.up" + std::to_string(i);
            conv(p + ".fuse", width_at(i), width_at(i + 1) + width_at(i), 3);
            block(p + ".block", width_at(i));
            site(p + ".site", width_at(i));
        }
        norm("dn.out.norm", width_at(0));
        conv("dn.out", cfg.in_channels, width_at(0), 3);
    }

    int width_at(int level) const { return cfg.base_width << level; }

    // cross-attention sites in network order
    std::vector<std::string> site_names() const {
        std::vector<std::string> names;
        for (int i = 0; i < cfg.n_down; ++i) names.push_back("down." + std::to_string(i));
        names.push_back("mid");
        for (int i = cfg.n_down - 1; i >= 0; --i) names.push_back("up." + std::to_string(i));
        return names;
    }

    int site_channels(const std::string& site) const {
        if (site == "mid") return width_at(cfg.n_down);
        const auto dotpos = site.find('.');
        if (dotpos != std::string::npos) {
            const std::string kind = site.substr(0, dotpos);
            const int level = std::stoi(site.substr(dotpos + 1));
            if ((kind == "down" || kind == "up") && level >= 0 && level < cfg.n_down) return width_at(level);
        }
        throw std::runtime_error("unknown cross-attention site: " + site);
    }

    // The built-in site attention: project spatial tokens to queries and the
    // conditioning tokens to keys/values, full (unmasked) attention.
    Tensor<T> site_attention(const std::string& site, const Tensor<T>& q_tokens, const Tensor<T>& cond) const {
        const std::string p = param_prefix(site);
        if (q_tokens.shape[1] != site_channels(site))
            throw std::runtime_error("site feature width mismatch at " + site);
        if (cond.shape.size() != 2 || cond.shape[1] != cfg.cond_dim)
            throw std::runtime_error("conditioning width mismatch at " + site);
        Tensor<T> q = nn::matmul(q_tokens, params.get(p + ".wq"));
        Tensor<T> k = nn::matmul(cond, params.get(p + ".wk"));
        Tensor<T> v = nn::matmul(cond, params.get(p + ".wv"));
        return nn::scaled_dot_attention(q, k, v, BoolMask::full(q.shape[0], k.shape[0]));
    }

    // eps prediction with a caller-supplied per-site attention
    Tensor<T> forward_sites(const Tensor<T>& z, int step, const SiteAttentionFn<T>& attn) const {
        if (z.shape != Shape{cfg.in_channels, cfg.img_size, cfg.img_size})
            throw std::runtime_error("denoiser input shape mismatch, got " + nn::shape_str(z.shape));
        Tensor<T> time_vec = time_embedding(step);
        Tensor<T> x = conv_p("dn.stem", z, 1);
        std::vector<Tensor<T>> skips;
        for (int i = 0; i < cfg.n_down; ++i) {
            const std::string p = "dn.down" + std::to_string(i);
            x = res_block(p + ".block", x, time_vec);
            x = apply_site(p + ".site", "down." + std::to_string(i), x, attn);
            skips.push_back(x);
            x = conv_p(p + ".down", x, 2);
        }
        x = res_block("dn.mid.block1", x, time_vec);
        x = apply_site("dn.mid.site", "mid", x, attn);
        x = res_block("dn.mid.block2", x, time_vec);
        for (int i = cfg.n_down - 1; i >= 0; --i) {
            const std::string p = "dn.up" + std::to_string(i);
            x = nn::upsample_nearest2(x);
            x = nn::concat_chan(x, skips[i]);
            x = conv_p(p + ".fuse", x, 1);
            x = res_block(p + ".block", x, time_vec);
            x = apply_site(p + ".site", "up." + std::to_string(i), x, attn);
        }
        x = nn::channel_norm(x, params.get("dn.out.norm.gain"), params.get("dn.out.norm.bias"));
        x = nn::silu(x);
        return conv_p("dn.out", x, 1);
    }

    Tensor<T> forward(const Tensor<T>& z, int step, const Tensor<T>& cond) const {
        return forward_sites(z, step, [&](const std::string& site, const Tensor<T>& q_tokens) {
            return site_attention(site, q_tokens, cond);
        });
    }

    void save_into(CheckpointFile& ckpt) const {
        ckpt.add_scalar("meta.dn.in_channels", cfg.in_channels);
        ckpt.add_scalar("meta.dn.img_size", cfg.img_size);
        ckpt.add_scalar("meta.dn.base_width", cfg.base_width);
        ckpt.add_scalar("meta.dn.n_down", cfg.n_down);
        ckpt.add_scalar("meta.dn.cond_dim", cfg.cond_dim);
        ckpt.add_scalar("meta.dn.time_dim", cfg.time_dim);
        ckpt.add_scalar("meta.dn.n_steps", cfg.n_steps);
        ckpt.add_scalar("meta.dn.beta_start", cfg.beta_start);
        ckpt.add_scalar("meta.dn.beta_end", cfg.beta_end);
        for (const auto& e : params.entries()) ckpt.add_tensor(e.name, e.tensor);
    }

    static DenoiserConfig config_from(const CheckpointFile& ckpt) {
        DenoiserConfig c;
        c.in_channels = static_cast<int>(ckpt.get_scalar("meta.dn.in_channels"));
        c.img_size = static_cast<int>(ckpt.get_scalar("meta.dn.img_size"));
        c.base_width = static_cast<int>(ckpt.get_scalar("meta.dn.base_width"));
        c.n_down = static_cast<int>(ckpt.get_scalar("meta.dn.n_down"));
        c.cond_dim = static_cast<int>(ckpt.get_scalar("meta.dn.cond_dim"));
        c.time_dim = static_cast<int>(ckpt.get_scalar("meta.dn.time_dim"));
        c.n_steps = static_cast<int>(ckpt.get_scalar("meta.dn.n_steps"));
        c.beta_start = ckpt.get_scalar("meta.dn.beta_start");
        c.beta_end = ckpt.get_scalar("meta.dn.beta_end");
        return c;
    }

    void load_from(const CheckpointFile& ckpt) {
        for (auto& e : params.entries()) {
            Tensor<T> loaded = ckpt.get_tensor<T>(e.name);
            if (loaded.shape != e.tensor.shape) throw std::runtime_error("checkpoint shape mismatch for " + e.name);
            std::copy(loaded.data->begin(), loaded.data->end(), e.tensor.data->begin());
        }
    }

private:
    static std::string param_prefix(const std::string& site) {
        if (site == "mid") return "dn.mid.site";
        const auto dotpos = site.find('.');
        if (dotpos == std::string::npos) throw std::runtime_error("unknown cross-attention site: " + site);
        return "dn." + site.substr(0, dotpos) + site.substr(dotpos + 1) + ".site";
    }

    Tensor<T> conv_p(const std::string& name, const Tensor<T>& x, int stride) const {
        return nn::conv2d(x, params.get(name + ".w"), params.get(name + ".b"), stride, 1);
    }

    // sinusoidal step features -> two-layer MLP; [1 x time_dim]
    Tensor<T> time_embedding(int step) const {
        const int d = cfg.time_dim;
        const int half = d / 2;
        std::vector<T> feats(d, T(0));
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
            feats[2 * i] = static_cast<T>(std::sin(step * freq));
            feats[2 * i + 1] = static_cast<T>(std::cos(step * freq));
        }
        Tensor<T> e = Tensor<T>::from_data({1, d}, std::move(feats));
        Tensor<T> h = nn::silu(nn::linear(e, params.get("dn.time.fc1.w"), params.get("dn.time.fc1.b")));
        return nn::linear(h, params.get("dn.time.fc2.w"), params.get("dn.time.fc2.b"));
    }

    // norm -> silu -> conv -> +time bias -> norm -> silu -> conv, residual
    Tensor<T> res_block(const std::string& p, const Tensor<T>& x, const Tensor<T>& time_vec) const {
        Tensor<T> h = nn::channel_norm(x, params.get(p + ".norm1.gain"), params.get(p + ".norm1.bias"));
        h = conv_p(p + ".conv1", nn::silu(h), 1);
        Tensor<T> tb = nn::linear(time_vec, params.get(p + ".time.w"), params.get(p + ".time.b"));
        h = nn::add_chan_bias(h, nn::reshape_copy(tb, {h.shape[0]}));
        h = nn::channel_norm(h, params.get(p + ".norm2.gain"), params.get(p + ".norm2.bias"));
        h = conv_p(p + ".conv2", nn::silu(h), 1);
        return nn::add(x, h);
    }

    Tensor<T> apply_site(const std::string& prefix, const std::string& site, const Tensor<T>& x,
                         const SiteAttentionFn<T>& attn) const {
        Tensor<T> normed = nn::channel_norm(x, params.get(prefix + ".norm.gain"), params.get(prefix + ".norm.bias"));
        Tensor<T> tokens = nn::chw_to_lc(normed);
        Tensor<T> att = attn(site, tokens);
        if (att.shape != tokens.shape)
            throw std::runtime_error("site attention output shape mismatch at " + site);
        return nn::add(x, nn::lc_to_chw(att, x.shape[1], x.shape[2]));
    }
};

// ------------------------------------------------------ baseline conditioner

// The stand-in "text encoder" for backbone pretraining: a trainable token
// embedding table, mean-pooled into a single conditioning token. Order-blind
// by construction.
template <class T>
class BaselineEncoder {
public:
    ParamStore<T> params;
    int vocab_size = 0;
    int cond_dim = 0;

    BaselineEncoder(int vocab, int dim, RandomStream init_stream, bool trainable = true)
        : vocab_size(vocab), cond_dim(dim) {
        params.add("base.embed", nn::randn_scaled<T>(init_stream, {vocab, dim}, 0.02, trainable));
    }

    // [1 x cond_dim]
    Tensor<T> encode(const std::vector<int>& ids) const {
        if (ids.empty()) throw std::runtime_error("baseline encoder: empty token list");
        return nn::mean_rows(nn::embed_rows(params.get("base.embed"), ids));
    }

    void save_into(CheckpointFile& ckpt) const {
        ckpt.add_scalar("meta.base.vocab_size", vocab_size);
        ckpt.add_scalar("meta.base.cond_dim", cond_dim);
        for (const auto& e : params.entries()) ckpt.add_tensor(e.name, e.tensor);
    }

    void load_from(const CheckpointFile& ckpt) {
        for (auto& e : params.entries()) {
            Tensor<T> loaded = ckpt.get_tensor<T>(e.name);
            if (loaded.shape != e.tensor.shape) throw std::runtime_error("checkpoint shape mismatch for " + e.name);
            std::copy(loaded.data->begin(), loaded.data->end(), e.tensor.data->begin());
        }
    }
};

// ----------------------------------------------------------------- training

// One training example's loss: draw a step and a noise tensor, noise the
// clean latent, and score the eps prediction by mean squared error.
template <class T>
Tensor<T> denoise_loss(const DenoiserNet<T>& net, const NoiseSchedule& sched, const Tensor<T>& z0,
                       const SiteAttentionFn<T>& attn, RandomStream& stream) {
    const int step = static_cast<int>(stream.next_below(static_cast<uint64_t>(sched.n_steps())));
    Tensor<T> eps = nn::gaussian_sample<T>(stream, z0.shape);
    Tensor<T> zt = q_sample(z0, step, eps, sched);
    Tensor<T> pred = net.forward_sites(zt, step, attn);
    Tensor<T> loss = nn::mse(pred, eps);
    if (!nn::all_finite(loss)) throw std::runtime_error("denoise loss diverged");
    return loss;
}

template <class T>
Tensor<T> denoise_loss(const DenoiserNet<T>& net, const NoiseSchedule& sched, const Tensor<T>& z0,
                       const Tensor<T>& cond, RandomStream& stream) {
    return denoise_loss<T>(net, sched, z0,
                           [&](const std::string& site, const Tensor<T>& q_tokens) {
                               return net.site_attention(site, q_tokens, cond);
                           },
                           stream);
}

// ----------------------------------------------------------------- sampling

// Ancestral DDPM sampling. Deterministic given the stream. When
// guidance_weight w != 0 and an unconditional attention path is supplied,
// the prediction becomes (1+w)*eps_cond - w*eps_uncond.
template <class T>
Tensor<T> ddpm_sample(const DenoiserNet<T>& net, const NoiseSchedule& sched, const SiteAttentionFn<T>& attn,
                      RandomStream& stream, double guidance_weight = 0.0,
                      const SiteAttentionFn<T>* uncond_attn = nullptr) {
    nn::NoGradGuard guard;
    const Shape shape{net.cfg.in_channels, net.cfg.img_size, net.cfg.img_size};
    Tensor<T> z = nn::gaussian_sample<T>(stream, shape);
    for (int t = sched.n_steps() - 1; t >= 0; --t) {
        Tensor<T> eps_hat = net.forward_sites(z, t, attn);
        if (guidance_weight != 0.0 && uncond_attn) {
            Tensor<T> eps_unc = net.forward_sites(z, t, *uncond_attn);
            eps_hat = nn::sub(nn::scale(eps_hat, 1.0 + guidance_weight), nn::scale(eps_unc, guidance_weight));
        }
        const double beta = sched.betas[t];
        const double abar = sched.alphas_bar[t];
        const double alpha = 1.0 - beta;
        Tensor<T> mean = nn::scale(nn::sub(z, nn::scale(eps_hat, beta / std::sqrt(1.0 - abar))), 1.0 / std::sqrt(alpha));
        if (t > 0) {
            const double abar_prev = sched.alphas_bar[t - 1];
            const double post_var = (1.0 - abar_prev) / (1.0 - abar) * beta;
            Tensor<T> noise = nn::gaussian_sample<T>(stream, shape);
            z = nn::add(mean, nn::scale(noise, std::sqrt(post_var)));
        } else {
            z = mean;
        }
        if (!nn::all_finite(z)) throw std::runtime_error("sampling diverged at step " + std::to_string(t));
    }
    return z;
}

template <class T>
Tensor<T> ddpm_sample(const DenoiserNet<T>& net, const NoiseSchedule& sched, const Tensor<T>& cond,
                      RandomStream& stream, double guidance_weight = 0.0, const Tensor<T>* uncond = nullptr) {
    SiteAttentionFn<T> attn = [&](const std::string& site, const Tensor<T>& q_tokens) {
        return net.site_attention(site, q_tokens, cond);
    };
    if (guidance_weight != 0.0 && uncond) {
        SiteAttentionFn<T> unc = [&](const std::string& site, const Tensor<T>& q_tokens) {
            return net.site_attention(site, q_tokens, *uncond);
        };
        return ddpm_sample<T>(net, sched, attn, stream, guidance_weight, &unc);
    }
    return ddpm_sample<T>(net, sched, attn, stream, 0.0, nullptr);
}

}  // namespace lmdiff::diff
