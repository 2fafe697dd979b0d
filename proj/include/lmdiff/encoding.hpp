// Text-encoding extraction: per block, the difference between the causal
// ("sentence") residual delta and the self-only ("word") residual delta is
// a score estimate for the context-given-word posterior; Langevin updates
// accumulate these differences, plus optional learned noise, onto the
// embedding to form the conditioning tensor.
#pragma once

#include <cmath>
#include <stdexcept>

#include "lmdiff/lm.hpp"
#include "lmdiff/tensor.hpp"

namespace lmdiff::enc {

using lm::BlockTrace;
using lm::LangModel;
using lm::MaskMode;
using lm::TokenSequence;
using nn::Tensor;

// Per-block scalars of the extraction process. g scales the score term;
// eta scales the injected noise as sqrt(2)*eta_t*eps (the squared value
// plays the role of the step size, and this form stays differentiable at
// eta = 0). Defaults g = 1, eta = 0 make extraction deterministic.
template <class T>
struct ScoreParams {
    Tensor<T> g;
    Tensor<T> eta;

    static ScoreParams init(int n_blocks, bool trainable = true) {
        ScoreParams p;
        p.g = Tensor<T>::full({n_blocks}, T(1), trainable);
        p.eta = Tensor<T>::zeros({n_blocks}, trainable);
        return p;
    }
};

template <class T>
struct TextEncoding {
    Tensor<T> c;  // [D x H_lm]
    int stage = 0;
    TokenSequence source_tokens;
};

namespace detail {
template <class T>
void check_t(const BlockTrace<T>& trace, int t) {
    const int n_blocks = static_cast<int>(trace.deltas.size()) - 1;
    if (t < 1 || t > n_blocks) throw std::runtime_error("block step out of range: " + std::to_string(t));
}
}  // namespace detail

// g(t) * causal block delta at state time t, all positions at once
template <class T>
Tensor<T> sentence_score(const BlockTrace<T>& trace, int t, const ScoreParams<T>& params) {
    if (trace.mask_mode != MaskMode::causal) throw std::runtime_error("sentence_score needs a causal trace");
    detail::check_t(trace, t);
    return nn::scale_by_element(trace.deltas[t], params.g, static_cast<std::size_t>(t - 1));
}

// g(t) * self-only block delta at state time t
template <class T>
Tensor<T> word_score(const BlockTrace<T>& trace, int t, const ScoreParams<T>& params) {
    if (trace.mask_mode != MaskMode::self_only) throw std::runtime_error("word_score needs a self-only trace");
    detail::check_t(trace, t);
    return nn::scale_by_element(trace.deltas[t], params.g, static_cast<std::size_t>(t - 1));
}

// One causal pass and one self-only pass over the original tokens supply
// the scores for every step; c accumulates them from t = T down to 1:
//   c <- c + g_t * (causal_delta_t - self_delta_t) + sqrt(2) * eta_t * eps_t
template <class T>
TextEncoding<T> extract_encoding(const TokenSequence& tokens, const LangModel<T>& model,
                                 const ScoreParams<T>& params, RandomStream& stream) {
    BlockTrace<T> causal = model.forward_trace(tokens, MaskMode::causal);
    BlockTrace<T> self = model.forward_trace(tokens, MaskMode::self_only);
    Tensor<T> c = causal.states[model.cfg.n_blocks];
    for (int t = model.cfg.n_blocks; t >= 1; --t) {
        Tensor<T> diff = nn::sub(causal.deltas[t], self.deltas[t]);
        c = nn::add(c, nn::scale_by_element(diff, params.g, static_cast<std::size_t>(t - 1)));
        Tensor<T> eps = nn::gaussian_sample<T>(stream, c.shape);
        c = nn::add(c, nn::scale_by_element(nn::scale(eps, std::sqrt(2.0)), params.eta, static_cast<std::size_t>(t - 1)));
    }
    if (!nn::all_finite(c)) throw std::runtime_error("encoding diverged");
    TextEncoding<T> out;
    out.c = c;
    out.stage = model.cfg.n_blocks;
    out.source_tokens = tokens;
    return out;
}

}  // namespace lmdiff::enc
