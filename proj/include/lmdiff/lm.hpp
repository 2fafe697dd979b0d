// Decoder-only causal transformer that exposes its full residual stream.
// Each of the T pre-norm blocks is treated as one denoising step over the
// per-position hidden state: block b carries state index t = T-b+1 down to
// t-1, with states[T] = embedding output and states[0] = the final state.
#pragma once

#include <string>
#include <vector>

#include "lmdiff/checkpoint.hpp"
#include "lmdiff/params.hpp"
#include "lmdiff/random.hpp"
#include "lmdiff/tensor.hpp"

namespace lmdiff::lm {

using nn::BoolMask;
using nn::ParamStore;
using nn::Shape;
using nn::Tensor;

struct LMConfig {
    int vocab_size = 0;
    int hidden = 64;
    int n_blocks = 4;
    int n_heads = 4;
    int mlp_ratio = 4;
    int max_len = 32;
    int pad_id = 0;  // targets equal to this id are excluded from the loss

    void validate() const {
        if (vocab_size <= 0) throw std::runtime_error("LMConfig: vocab_size must be positive");
        if (n_blocks < 1) throw std::runtime_error("LMConfig: need at least one block");
        if (hidden % n_heads != 0) throw std::runtime_error("LMConfig: hidden not divisible by n_heads");
        if (max_len < 1) throw std::runtime_error("LMConfig: max_len must be positive");
    }
};

struct TokenSequence {
    std::vector<int> ids;
    int length() const { return static_cast<int>(ids.size()); }
};

enum class MaskMode { causal, self_only };

// Full residual-stream record of one forward pass. Indexed by state time t:
// states[t] for t = T..0, deltas[t] for t = T..1, and by construction
// states[t-1] == states[t] + deltas[t] bit-for-bit.
template <class T>
struct BlockTrace {
    std::vector<Tensor<T>> states;  // size n_blocks+1, states[t]
    std::vector<Tensor<T>> deltas;  // size n_blocks+1, deltas[t], index 0 unused
    MaskMode mask_mode = MaskMode::causal;
};

template <class T>
class LangModel {
public:
    LMConfig cfg;
    ParamStore<T> params;

    LangModel(const LMConfig& config, RandomStream init_stream, bool trainable = true) : cfg(config) {
        cfg.validate();
        const int h = cfg.hidden;
        const int v = cfg.vocab_size;
        const int m = cfg.mlp_ratio * h;
        auto w = [&](const std::string& name, Shape s, double std_dev) {
            params.add(name, nn::randn_scaled<T>(init_stream, s, std_dev, trainable));
        };
        auto ones = [&](const std::string& name, int n) { params.add(name, Tensor<T>::full({n}, T(1), trainable)); };
        auto zeros = [&](const std::string& name, int n) { params.add(name, Tensor<T>::zeros({n}, trainable)); };
        w("lm.embed.token", {v, h}, 0.02);
        w("lm.embed.pos", {cfg.max_len, h}, 0.02);
        for (int b = 1; b <= cfg.n_blocks; ++b) {
            const std::string p = "lm.block" + std::to_string(b) + ".";
            ones(p + "ln1.gain", h);
            zeros(p + "ln1.bias", h);
            w(p + "attn.wq", {h, h}, 0.02);
            w(p + "attn.wk", {h, h}, 0.02);
            w(p + "attn.wv", {h, h}, 0.02);
            w(p + "attn.wo", {h, h}, 0.02);
            ones(p + "ln2.gain", h);
            zeros(p + "ln2.bias", h);
            w(p + "mlp.w1", {h, m}, 0.02);
            zeros(p + "mlp.b1", m);
            w(p + "mlp.w2", {m, h}, 0.02);
            zeros(p + "mlp.b2", h);
        }
        ones("lm.final.gain", h);
        zeros("lm.final.bias", h);
        w("lm.head.w", {h, v}, 0.02);
    }

    // token embedding + positional embedding; this is state x^T
    Tensor<T> embed(const TokenSequence& tokens) const {
        check_len(tokens);
        Tensor<T> tok = nn::embed_rows(params.get("lm.embed.token"), tokens.ids);
        Tensor<T> pos = nn::take_rows(params.get("lm.embed.pos"), 0, tokens.length());
        return nn::add(tok, pos);
    }

    BlockTrace<T> forward_trace(const TokenSequence& tokens, MaskMode mode) const {
        check_len(tokens);
        const int d = tokens.length();
        const BoolMask mask = mode == MaskMode::causal ? BoolMask::causal(d) : BoolMask::self_only(d);
        BlockTrace<T> trace;
        trace.mask_mode = mode;
        trace.states.assign(cfg.n_blocks + 1, Tensor<T>{});
        trace.deltas.assign(cfg.n_blocks + 1, Tensor<T>{});
        trace.states[cfg.n_blocks] = embed(tokens);
        for (int b = 1; b <= cfg.n_blocks; ++b) {
            const int t = cfg.n_blocks - b + 1;  // block b advances state t -> t-1
            const Tensor<T>& x = trace.states[t];
            Tensor<T> delta = block_delta(b, x, mask);
            trace.deltas[t] = delta;
            trace.states[t - 1] = nn::add(x, delta);
        }
        return trace;
    }

    // logits for next-token prediction from the final residual state
    Tensor<T> logits_from_state(const Tensor<T>& final_state) const {
        Tensor<T> normed = nn::layer_norm_rows(final_state, params.get("lm.final.gain"), params.get("lm.final.bias"));
        return nn::matmul(normed, params.get("lm.head.w"));
    }

    // mean next-token cross-entropy over the batch; targets equal to pad_id
    // are excluded so trailing padding never moves the loss
    Tensor<T> lm_loss(const std::vector<TokenSequence>& batch) const {
        std::vector<Tensor<T>> losses;
        std::vector<double> weights;
        double total = 0.0;
        for (const auto& seq : batch) {
            if (seq.length() < 2) throw std::runtime_error("lm_loss: sequence shorter than 2 tokens");
            BlockTrace<T> trace = forward_trace(seq, MaskMode::causal);
            Tensor<T> logits = logits_from_state(trace.states[0]);
            // gather positions whose next token is a real (non-pad) target
            std::vector<int> rows, targets;
            for (int dpos = 0; dpos + 1 < seq.length(); ++dpos) {
                if (seq.ids[dpos + 1] == cfg.pad_id) continue;
                rows.push_back(dpos);
                targets.push_back(seq.ids[dpos + 1]);
            }
            if (rows.empty()) continue;
            // contiguous prefix rows are the common case; slice if possible
            Tensor<T> used;
            if (rows.back() == static_cast<int>(rows.size()) - 1) {
                used = nn::take_rows(logits, 0, static_cast<int>(rows.size()));
            } else {
                std::vector<Tensor<T>> parts;
                for (int r : rows) parts.push_back(nn::take_rows(logits, r, r + 1));
                used = parts.size() == 1 ? parts[0] : concat_rows(parts);
            }
            losses.push_back(nn::cross_entropy_rows(used, targets));
            weights.push_back(static_cast<double>(targets.size()));
            total += static_cast<double>(targets.size());
        }
        if (losses.empty()) throw std::runtime_error("lm_loss: no predictable positions in batch");
        Tensor<T> acc = nn::scale(losses[0], weights[0] / total);
        for (std::size_t i = 1; i < losses.size(); ++i) acc = nn::add(acc, nn::scale(losses[i], weights[i] / total));
        return acc;
    }

    void save_into(CheckpointFile& ckpt) const {
        ckpt.add_scalar("meta.lm.vocab_size", cfg.vocab_size);
        ckpt.add_scalar("meta.lm.hidden", cfg.hidden);
        ckpt.add_scalar("meta.lm.n_blocks", cfg.n_blocks);
        ckpt.add_scalar("meta.lm.n_heads", cfg.n_heads);
        ckpt.add_scalar("meta.lm.mlp_ratio", cfg.mlp_ratio);
        ckpt.add_scalar("meta.lm.max_len", cfg.max_len);
        ckpt.add_scalar("meta.lm.pad_id", cfg.pad_id);
        for (const auto& e : params.entries()) ckpt.add_tensor(e.name, e.tensor);
    }

    static LMConfig config_from(const CheckpointFile& ckpt) {
        LMConfig c;
        c.vocab_size = static_cast<int>(ckpt.get_scalar("meta.lm.vocab_size"));
        c.hidden = static_cast<int>(ckpt.get_scalar("meta.lm.hidden"));
        c.n_blocks = static_cast<int>(ckpt.get_scalar("meta.lm.n_blocks"));
        c.n_heads = static_cast<int>(ckpt.get_scalar("meta.lm.n_heads"));
        c.mlp_ratio = static_cast<int>(ckpt.get_scalar("meta.lm.mlp_ratio"));
        c.max_len = static_cast<int>(ckpt.get_scalar("meta.lm.max_len"));
        c.pad_id = static_cast<int>(ckpt.get_scalar("meta.lm.pad_id"));
        return c;
    }

    void load_from(const CheckpointFile& ckpt) {
        for (auto& e : params.entries()) {
            Tensor<T> loaded = ckpt.get_tensor<T>(e.name);
            if (loaded.shape != e.tensor.shape)
                throw std::runtime_error("checkpoint shape mismatch for " + e.name);
            std::copy(loaded.data->begin(), loaded.data->end(), e.tensor.data->begin());
        }
    }

private:
    void check_len(const TokenSequence& tokens) const {
        if (tokens.length() < 1) throw std::runtime_error("empty token sequence");
        if (tokens.length() > cfg.max_len) throw std::runtime_error("sequence too long");
    }

    static Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
        std::vector<Tensor<T>> cols;
        cols.reserve(parts.size());
        for (const auto& p : parts) cols.push_back(nn::transpose(p));
        return nn::transpose(nn::concat_cols(cols));
    }

    // attention + MLP contribution of block b at input x; the caller adds it
    // back onto x, which keeps states[t-1] == states[t] + delta exact
    Tensor<T> block_delta(int b, const Tensor<T>& x, const BoolMask& mask) const {
        const std::string p = "lm.block" + std::to_string(b) + ".";
        const int h = cfg.hidden;
        const int hd = h / cfg.n_heads;
        Tensor<T> a_in = nn::layer_norm_rows(x, params.get(p + "ln1.gain"), params.get(p + "ln1.bias"));
        Tensor<T> q = nn::matmul(a_in, params.get(p + "attn.wq"));
        Tensor<T> k = nn::matmul(a_in, params.get(p + "attn.wk"));
        Tensor<T> v = nn::matmul(a_in, params.get(p + "attn.wv"));
        std::vector<Tensor<T>> heads;
        for (int hh = 0; hh < cfg.n_heads; ++hh) {
            Tensor<T> qh = nn::slice_cols(q, hh * hd, (hh + 1) * hd);
            Tensor<T> kh = nn::slice_cols(k, hh * hd, (hh + 1) * hd);
            Tensor<T> vh = nn::slice_cols(v, hh * hd, (hh + 1) * hd);
            heads.push_back(nn::scaled_dot_attention(qh, kh, vh, mask));
        }
        Tensor<T> attn_out = nn::matmul(nn::concat_cols(heads), params.get(p + "attn.wo"));
        Tensor<T> mid = nn::add(x, attn_out);
        Tensor<T> m_in = nn::layer_norm_rows(mid, params.get(p + "ln2.gain"), params.get(p + "ln2.bias"));
        Tensor<T> hidden = nn::gelu(nn::linear(m_in, params.get(p + "mlp.w1"), params.get(p + "mlp.b1")));
        Tensor<T> mlp_out = nn::linear(hidden, params.get(p + "mlp.w2"), params.get(p + "mlp.b2"));
        return nn::add(attn_out, mlp_out);
    }
};

}  // namespace lmdiff::lm
