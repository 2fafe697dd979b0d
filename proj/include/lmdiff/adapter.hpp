// Dual cross-attention adapter. Each site keeps the backbone's original
// attention projections frozen and feeds them an aligned projection phi(c)
// of the text encoding, while a new trainable attention consumes c
// directly; the two outputs blend as a1*e^{b1} and a2*e^{b2}.
#pragma once

#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "lmdiff/checkpoint.hpp"
#include "lmdiff/diffusion.hpp"
#include "lmdiff/params.hpp"
#include "lmdiff/tensor.hpp"

namespace lmdiff::ad {

using nn::BoolMask;
using nn::ParamStore;
using nn::Tensor;

template <class T>
struct AdapterLayerState {
    std::string site;
    Tensor<T> phi;                              // [H_lm x H_cond], trainable
    Tensor<T> tau_hat_q, tau_hat_k, tau_hat_v;  // frozen copies of the original site projections
    Tensor<T> tau_q, tau_k, tau_v;              // new trainable projections fed by c
    Tensor<T> a1, b1, a2, b2;                   // trainable scalars, each shape [1]
};

template <class T>
struct AdapterState {
    std::vector<AdapterLayerState<T>> layers;  // in denoiser site order
    int lm_dim = 0;
    int cond_dim = 0;

    const AdapterLayerState<T>& layer(const std::string& site) const {
        for (const auto& l : layers)
            if (l.site == site) return l;
        throw std::runtime_error("no adapter layer for site: " + site);
    }

    // every trainable adapter tensor, in deterministic order
    void register_params(ParamStore<T>& store) const {
        for (const auto& l : layers) {
            const std::string p = "adapter." + l.site + ".";
            store.add(p + "phi", l.phi);
            store.add(p + "tau_q", l.tau_q);
            store.add(p + "tau_k", l.tau_k);
            store.add(p + "tau_v", l.tau_v);
            store.add(p + "a1", l.a1);
            store.add(p + "b1", l.b1);
            store.add(p + "a2", l.a2);
            store.add(p + "b2", l.b2);
        }
    }
};

// Copies the frozen projections out of a (trained) denoiser and initializes
// the new branch: phi as (truncated) identity so the frozen attention sees
// an undistorted view of c at step 0, new projections small random, scalars
// a1=1, b1=0, b2=0, and a2 as given (0.1 by default; 0 reproduces the
// exact-preservation variant).
template <class T>
AdapterState<T> init_adapter(const diff::DenoiserNet<T>& denoiser, int lm_dim, double init_a2,
                             RandomStream init_stream) {
    AdapterState<T> state;
    state.lm_dim = lm_dim;
    state.cond_dim = denoiser.cfg.cond_dim;
    for (const std::string& site : denoiser.site_names()) {
        const int c_site = denoiser.site_channels(site);
        const std::string dn_prefix = site == "mid" ? "dn.mid.site" : "dn." + site.substr(0, site.find('.')) + site.substr(site.find('.') + 1) + ".site";
        AdapterLayerState<T> layer;
        layer.site = site;
        layer.phi = Tensor<T>::zeros({lm_dim, state.cond_dim}, true);
        for (int i = 0; i < std::min(lm_dim, state.cond_dim); ++i)
            (*layer.phi.data)[static_cast<std::size_t>(i) * state.cond_dim + i] = T(1);
        layer.tau_hat_q = denoiser.params.get(dn_prefix + ".wq").detached();
        layer.tau_hat_k = denoiser.params.get(dn_prefix + ".wk").detached();
        layer.tau_hat_v = denoiser.params.get(dn_prefix + ".wv").detached();
        layer.tau_q = nn::randn_scaled<T>(init_stream, {c_site, c_site}, 0.02, true);
        layer.tau_k = nn::randn_scaled<T>(init_stream, {lm_dim, c_site}, 0.02, true);
        layer.tau_v = nn::randn_scaled<T>(init_stream, {lm_dim, c_site}, 0.02, true);
        layer.a1 = Tensor<T>::full({1}, T(1), true);
        layer.b1 = Tensor<T>::zeros({1}, true);
        layer.a2 = Tensor<T>::full({1}, static_cast<T>(init_a2), true);
        layer.b2 = Tensor<T>::zeros({1}, true);
        state.layers.push_back(std::move(layer));
    }
    return state;
}

// f = attn(tau_hat_q(q), tau_hat_k(phi(c)), tau_hat_v(phi(c))) * a1*e^{b1}
//   + attn(tau_q(q),     tau_k(c),          tau_v(c))          * a2*e^{b2}
template <class T>
Tensor<T> adapter_forward(const Tensor<T>& q_tokens, const Tensor<T>& c, const AdapterLayerState<T>& layer) {
    if (q_tokens.shape.size() != 2 || q_tokens.shape[1] != layer.tau_hat_q.shape[0])
        throw std::runtime_error("adapter feature width mismatch at site " + layer.site);
    if (c.shape.size() != 2 || c.shape[1] != layer.phi.shape[0])
        throw std::runtime_error("adapter conditioning width mismatch at site " + layer.site);
    const BoolMask mask = BoolMask::full(q_tokens.shape[0], c.shape[0]);

    Tensor<T> aligned = nn::matmul(c, layer.phi);
    Tensor<T> frozen = nn::scaled_dot_attention(nn::matmul(q_tokens, layer.tau_hat_q),
                                                nn::matmul(aligned, layer.tau_hat_k),
                                                nn::matmul(aligned, layer.tau_hat_v), mask);
    Tensor<T> fresh = nn::scaled_dot_attention(nn::matmul(q_tokens, layer.tau_q),
                                               nn::matmul(c, layer.tau_k),
                                               nn::matmul(c, layer.tau_v), mask);
    Tensor<T> w1 = nn::mul(layer.a1, nn::exp_t(layer.b1));
    Tensor<T> w2 = nn::mul(layer.a2, nn::exp_t(layer.b2));
    return nn::add(nn::scale_by_element(frozen, w1, 0), nn::scale_by_element(fresh, w2, 0));
}

// Site-attention callback routing the denoiser through the adapter.
template <class T>
diff::SiteAttentionFn<T> adapter_site_fn(const AdapterState<T>& state, const Tensor<T>& c) {
    return [&state, c](const std::string& site, const Tensor<T>& q_tokens) {
        return adapter_forward(q_tokens, c, state.layer(site));
    };
}

// Per-site effective branch weights (a1*e^{b1}, a2*e^{b2}) in network order.
template <class T>
std::vector<std::tuple<std::string, double, double>> scale_report(const AdapterState<T>& state) {
    std::vector<std::tuple<std::string, double, double>> rows;
    for (const auto& l : state.layers) {
        const double w1 = static_cast<double>((*l.a1.data)[0]) * std::exp(static_cast<double>((*l.b1.data)[0]));
        const double w2 = static_cast<double>((*l.a2.data)[0]) * std::exp(static_cast<double>((*l.b2.data)[0]));
        rows.emplace_back(l.site, w1, w2);
    }
    return rows;
}

// ------------------------------------------------------------- persistence

template <class T>
void save_adapter_into(const AdapterState<T>& state, CheckpointFile& ckpt) {
    ckpt.add_scalar("meta.adapter.lm_dim", state.lm_dim);
    ckpt.add_scalar("meta.adapter.cond_dim", state.cond_dim);
    ckpt.add_scalar("meta.adapter.n_sites", static_cast<double>(state.layers.size()));
    for (const auto& l : state.layers) {
        const std::string p = "adapter." + l.site + ".";
        ckpt.add_tensor(p + "phi", l.phi);
        ckpt.add_tensor(p + "tau_hat_q", l.tau_hat_q);
        ckpt.add_tensor(p + "tau_hat_k", l.tau_hat_k);
        ckpt.add_tensor(p + "tau_hat_v", l.tau_hat_v);
        ckpt.add_tensor(p + "tau_q", l.tau_q);
        ckpt.add_tensor(p + "tau_k", l.tau_k);
        ckpt.add_tensor(p + "tau_v", l.tau_v);
        ckpt.add_tensor(p + "a1", l.a1);
        ckpt.add_tensor(p + "b1", l.b1);
        ckpt.add_tensor(p + "a2", l.a2);
        ckpt.add_tensor(p + "b2", l.b2);
    }
}

template <class T>
void load_adapter_from(AdapterState<T>& state, const CheckpointFile& ckpt) {
    auto copy_into = [&](const std::string& name, Tensor<T>& dst) {
        Tensor<T> loaded = ckpt.get_tensor<T>(name);
        if (loaded.shape != dst.shape) throw std::runtime_error("checkpoint shape mismatch for " + name);
        std::copy(loaded.data->begin(), loaded.data->end(), dst.data->begin());
    };
    for (auto& l : state.layers) {
        const std::string p = "adapter." + l.site + ".";
        copy_into(p + "phi", l.phi);
        copy_into(p + "tau_hat_q", l.tau_hat_q);
        copy_into(p + "tau_hat_k", l.tau_hat_k);
        copy_into(p + "tau_hat_v", l.tau_hat_v);
        copy_into(p + "tau_q", l.tau_q);
        copy_into(p + "tau_k", l.tau_k);
        copy_into(p + "tau_v", l.tau_v);
        copy_into(p + "a1", l.a1);
        copy_into(p + "b1", l.b1);
        copy_into(p + "a2", l.a2);
        copy_into(p + "b2", l.b2);
    }
}

}  // namespace lmdiff::ad
