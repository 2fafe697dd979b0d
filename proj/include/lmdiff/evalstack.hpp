// Evaluation models: a small contrastive image-text metric (sigmoid
// pairwise loss, score = 100 * sigmoid(alpha * cos + beta)) and an
// attribute classifier that turns images back into count/color/shape/
// relation claims for exact controllability scoring. Both train only on
// ground-truth corpus renders, never on generator internals.
#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "lmdiff/checkpoint.hpp"
#include "lmdiff/corpus.hpp"
#include "lmdiff/params.hpp"
#include "lmdiff/random.hpp"
#include "lmdiff/tensor.hpp"

namespace lmdiff::eval {

using nn::ParamStore;
using nn::Shape;
using nn::Tensor;

struct EvalNetConfig {
    int img_size = 16;
    int width1 = 16;
    int width2 = 32;
    int emb_dim = 64;
    int vocab_size = 0;

    int flat_dim() const { return width2 * (img_size / 4) * (img_size / 4); }
};

namespace detail {

// v / ||v|| for a [1 x n] row, differentiable through the norm
template <class T>
Tensor<T> unit_norm_row(const Tensor<T>& v) {
    Tensor<T> n = nn::sqrt_t(nn::add_const(nn::dot(v, v), 1e-12));
    Tensor<T> inv = nn::div(Tensor<T>::full({1}, T(1)), n);
    return nn::scale_by_element(v, inv, 0);
}

template <class T>
Tensor<T> conv_trunk(const ParamStore<T>& params, const std::string& prefix, const Tensor<T>& img) {
    // full-resolution layer first: the smallest shapes span only ~3 pixels,
    // so downsampling immediately would erase what distinguishes them
    Tensor<T> h = nn::silu(nn::conv2d(img, params.get(prefix + ".conv0.w"), params.get(prefix + ".conv0.b"), 1, 1));
    h = nn::silu(nn::conv2d(h, params.get(prefix + ".conv1.w"), params.get(prefix + ".conv1.b"), 2, 1));
    h = nn::silu(nn::conv2d(h, params.get(prefix + ".conv2.w"), params.get(prefix + ".conv2.b"), 2, 1));
    return nn::reshape_copy(h, {1, static_cast<int>(h.numel())});
}

template <class T>
void load_store(ParamStore<T>& store, const CheckpointFile& ckpt) {
    for (auto& e : store.entries()) {
        Tensor<T> loaded = ckpt.get_tensor<T>(e.name);
        if (loaded.shape != e.tensor.shape) throw std::runtime_error("checkpoint shape mismatch for " + e.name);
        std::copy(loaded.data->begin(), loaded.data->end(), e.tensor.data->begin());
    }
}

}  // namespace detail

// ------------------------------------------------------------ metric model

template <class T>
class MetricModel {
public:
    EvalNetConfig cfg;
    ParamStore<T> params;

    MetricModel(const EvalNetConfig& config, RandomStream init_stream, bool trainable = true) : cfg(config) {
        if (cfg.vocab_size <= 0) throw std::runtime_error("MetricModel: vocab_size required");
        auto conv = [&](const std::string& name, int co, int ci) {
            params.add(name + ".w", nn::randn_scaled<T>(init_stream, {co, ci, 3, 3}, 1.0 / std::sqrt(9.0 * ci), trainable));
            params.add(name + ".b", Tensor<T>::zeros({co}, trainable));
        };
        auto lin = [&](const std::string& name, int in, int out) {
            params.add(name + ".w", nn::randn_scaled<T>(init_stream, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), trainable));
            params.add(name + ".b", Tensor<T>::zeros({out}, trainable));
        };
        conv("metric.img.conv0", cfg.width1, 3);
        conv("metric.img.conv1", cfg.width1, cfg.width1);
        conv("metric.img.conv2", cfg.width2, cfg.width1);
        lin("metric.img.fc", cfg.flat_dim(), cfg.emb_dim);
        params.add("metric.txt.embed", nn::randn_scaled<T>(init_stream, {cfg.vocab_size, cfg.emb_dim}, 0.02, trainable));
        lin("metric.txt.fc", cfg.emb_dim, cfg.emb_dim);
        params.add("metric.alpha", Tensor<T>::full({1}, T(10), trainable));
        params.add("metric.beta", Tensor<T>::full({1}, T(-10), trainable));
    }

    // [1 x emb_dim], unit norm
    Tensor<T> encode_image(const Tensor<T>& img) const {
        Tensor<T> flat = detail::conv_trunk(params, "metric.img", img);
        Tensor<T> v = nn::linear(flat, params.get("metric.img.fc.w"), params.get("metric.img.fc.b"));
        return detail::unit_norm_row(v);
    }

    Tensor<T> encode_text(const std::vector<int>& ids) const {
        Tensor<T> pooled = nn::mean_rows(nn::embed_rows(params.get("metric.txt.embed"), ids));
        Tensor<T> v = nn::linear(pooled, params.get("metric.txt.fc.w"), params.get("metric.txt.fc.b"));
        return detail::unit_norm_row(v);
    }

    double siglip_score(const Tensor<T>& img, const std::vector<int>& ids) const {
        nn::NoGradGuard guard;
        Tensor<T> iv = encode_image(img);
        Tensor<T> tv = encode_text(ids);
        const double c = static_cast<double>((*nn::dot(iv, tv).data)[0]);
        const double a = static_cast<double>((*params.get("metric.alpha").data)[0]);
        const double b = static_cast<double>((*params.get("metric.beta").data)[0]);
        return 100.0 / (1.0 + std::exp(-(a * c + b)));
    }

    // pairwise sigmoid contrastive loss over all B^2 pairs:
    //   -mean log sigmoid(z_ij * (alpha * cos_ij + beta)), z = +1 on the diagonal
    Tensor<T> contrastive_loss(const std::vector<Tensor<T>>& images,
                               const std::vector<std::vector<int>>& token_ids) const {
        const std::size_t b = images.size();
        if (b < 2) throw std::runtime_error("contrastive loss needs a batch of at least 2");
        if (token_ids.size() != b) throw std::runtime_error("contrastive loss: image/text count mismatch");
        std::vector<Tensor<T>> ivs, tvs;
        for (const auto& img : images) ivs.push_back(encode_image(img));
        for (const auto& ids : token_ids) tvs.push_back(encode_text(ids));
        const Tensor<T>& alpha = params.get("metric.alpha");
        const Tensor<T>& beta = params.get("metric.beta");
        Tensor<T> total;
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < b; ++j) {
                Tensor<T> logit = nn::add(nn::mul(nn::dot(ivs[i], tvs[j]), alpha), beta);
                const double z = i == j ? 1.0 : -1.0;
                Tensor<T> term = nn::softplus(nn::scale(logit, -z));
                total = total.defined() ? nn::add(total, term) : term;
            }
        return nn::scale(total, 1.0 / static_cast<double>(b * b));
    }

    void save_into(CheckpointFile& ckpt) const {
        ckpt.add_scalar("meta.metric.img_size", cfg.img_size);
        ckpt.add_scalar("meta.metric.width1", cfg.width1);
        ckpt.add_scalar("meta.metric.width2", cfg.width2);
        ckpt.add_scalar("meta.metric.emb_dim", cfg.emb_dim);
        ckpt.add_scalar("meta.metric.vocab_size", cfg.vocab_size);
        for (const auto& e : params.entries()) ckpt.add_tensor(e.name, e.tensor);
    }

    static EvalNetConfig config_from(const CheckpointFile& ckpt) {
        EvalNetConfig c;
        c.img_size = static_cast<int>(ckpt.get_scalar("meta.metric.img_size"));
        c.width1 = static_cast<int>(ckpt.get_scalar("meta.metric.width1"));
        c.width2 = static_cast<int>(ckpt.get_scalar("meta.metric.width2"));
        c.emb_dim = static_cast<int>(ckpt.get_scalar("meta.metric.emb_dim"));
        c.vocab_size = static_cast<int>(ckpt.get_scalar("meta.metric.vocab_size"));
        return c;
    }

    void load_from(const CheckpointFile& ckpt) { detail::load_store(params, ckpt); }
};

// ------------------------------------------------------ attribute classifier

struct AttributePrediction {
    int count = 0;                                          // 1..3
    std::array<bool, corpus::kNumColors> colors{};          // presence at threshold 0.5
    std::array<bool, corpus::kNumShapes> shapes{};
    std::array<bool, corpus::kNumRelations> relations{};
};

template <class T>
class AttributeClassifier {
public:
    EvalNetConfig cfg;
    ParamStore<T> params;
    double val_exact_match = 0.0;  // measured on held-out renders at train time

    AttributeClassifier(const EvalNetConfig& config, RandomStream init_stream, bool trainable = true) : cfg(config) {
        auto conv = [&](const std::string& name, int co, int ci) {
            params.add(name + ".w", nn::randn_scaled<T>(init_stream, {co, ci, 3, 3}, 1.0 / std::sqrt(9.0 * ci), trainable));
            params.add(name + ".b", Tensor<T>::zeros({co}, trainable));
        };
        auto lin = [&](const std::string& name, int in, int out) {
            params.add(name + ".w", nn::randn_scaled<T>(init_stream, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), trainable));
            params.add(name + ".b", Tensor<T>::zeros({out}, trainable));
        };
        conv("clf.conv0", cfg.width1, 3);
        conv("clf.conv1", cfg.width1, cfg.width1);
        conv("clf.conv2", cfg.width2, cfg.width1);
        lin("clf.fc", cfg.flat_dim(), 128);
        lin("clf.head.count", 128, corpus::kMaxEntities);
        lin("clf.head.color", 128, corpus::kNumColors);
        lin("clf.head.shape", 128, corpus::kNumShapes);
        lin("clf.head.relation", 128, corpus::kNumRelations);
    }

    struct Logits {
        Tensor<T> count, color, shape, relation;  // each [1 x n]
    };

    Logits forward(const Tensor<T>& img) const {
        Tensor<T> flat = detail::conv_trunk(params, "clf", img);
        Tensor<T> h = nn::silu(nn::linear(flat, params.get("clf.fc.w"), params.get("clf.fc.b")));
        Logits out;
        out.count = nn::linear(h, params.get("clf.head.count.w"), params.get("clf.head.count.b"));
        out.color = nn::linear(h, params.get("clf.head.color.w"), params.get("clf.head.color.b"));
        out.shape = nn::linear(h, params.get("clf.head.shape.w"), params.get("clf.head.shape.b"));
        out.relation = nn::linear(h, params.get("clf.head.relation.w"), params.get("clf.head.relation.b"));
        return out;
    }

    // count cross-entropy + binary cross-entropy on each presence head
    Tensor<T> loss(const Tensor<T>& img, const corpus::CaptionTruth& truth) const {
        Logits lg = forward(img);
        Tensor<T> total = nn::cross_entropy_rows(lg.count, {truth.count - 1});
        auto bce = [](const Tensor<T>& logits, const bool* bits, int n) {
            // -log sigmoid(x) for present bits, -log(1 - sigmoid(x)) for absent:
            // both are softplus(s * x) with s = -1 / +1
            std::vector<T> sign(n);
            for (int i = 0; i < n; ++i) sign[i] = bits[i] ? T(-1) : T(1);
            Tensor<T> s = Tensor<T>::from_data({1, n}, std::move(sign));
            return nn::sum_all(nn::softplus(nn::mul(logits, s)));
        };
        total = nn::add(total, bce(lg.color, truth.colors.data(), corpus::kNumColors));
        total = nn::add(total, bce(lg.shape, truth.shapes.data(), corpus::kNumShapes));
        total = nn::add(total, bce(lg.relation, truth.relations.data(), corpus::kNumRelations));
        return total;
    }

    AttributePrediction predict(const Tensor<T>& img) const {
        nn::NoGradGuard guard;
        Logits lg = forward(img);
        AttributePrediction p;
        int best = 0;
        for (int i = 1; i < corpus::kMaxEntities; ++i)
            if ((*lg.count.data)[i] > (*lg.count.data)[best]) best = i;
        p.count = best + 1;
        for (int i = 0; i < corpus::kNumColors; ++i) p.colors[i] = (*lg.color.data)[i] > T(0);
        for (int i = 0; i < corpus::kNumShapes; ++i) p.shapes[i] = (*lg.shape.data)[i] > T(0);
        for (int i = 0; i < corpus::kNumRelations; ++i) p.relations[i] = (*lg.relation.data)[i] > T(0);
        return p;
    }

    void save_into(CheckpointFile& ckpt) const {
        ckpt.add_scalar("meta.clf.img_size", cfg.img_size);
        ckpt.add_scalar("meta.clf.width1", cfg.width1);
        ckpt.add_scalar("meta.clf.width2", cfg.width2);
        ckpt.add_scalar("meta.clf.emb_dim", cfg.emb_dim);
        ckpt.add_scalar("meta.clf.vocab_size", cfg.vocab_size);
        ckpt.add_scalar("meta.clf.val_exact", val_exact_match);
        for (const auto& e : params.entries()) ckpt.add_tensor(e.name, e.tensor);
    }

    static EvalNetConfig config_from(const CheckpointFile& ckpt) {
        EvalNetConfig c;
        c.img_size = static_cast<int>(ckpt.get_scalar("meta.clf.img_size"));
        c.width1 = static_cast<int>(ckpt.get_scalar("meta.clf.width1"));
        c.width2 = static_cast<int>(ckpt.get_scalar("meta.clf.width2"));
        c.emb_dim = static_cast<int>(ckpt.get_scalar("meta.clf.emb_dim"));
        c.vocab_size = static_cast<int>(ckpt.get_scalar("meta.clf.vocab_size"));
        return c;
    }

    void load_from(const CheckpointFile& ckpt) {
        detail::load_store(params, ckpt);
        val_exact_match = ckpt.get_scalar("meta.clf.val_exact");
    }
};

// ---------------------------------------------------------------- accuracy

struct AttributeReport {
    double count_acc = 0.0;
    double color_acc = 0.0;
    double shape_acc = 0.0;
    double relation_acc = 0.0;
    double exact_match = 0.0;
};

// Scores each image against the attribute claims of its truth entry.
// Count, color set, and shape set must match exactly; every claimed
// relation bit must be present in the prediction (a truth derived from a
// caption only claims the relations the caption states).
template <class T>
AttributeReport attribute_accuracy(const std::vector<Tensor<T>>& images,
                                   const std::vector<corpus::CaptionTruth>& truths,
                                   const AttributeClassifier<T>& clf) {
    if (images.size() != truths.size()) throw std::runtime_error("attribute_accuracy: length mismatch");
    if (images.empty()) throw std::runtime_error("attribute_accuracy: empty input");
    if (clf.val_exact_match < 0.95)
        throw std::runtime_error("classifier validation accuracy below 0.95; attribute scores would be meaningless");
    AttributeReport rep;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const AttributePrediction p = clf.predict(images[i]);
        const corpus::CaptionTruth& t = truths[i];
        const bool count_ok = p.count == t.count;
        bool color_ok = true;
        for (int c = 0; c < corpus::kNumColors; ++c) color_ok = color_ok && p.colors[c] == t.colors[c];
        bool shape_ok = true;
        for (int s = 0; s < corpus::kNumShapes; ++s) shape_ok = shape_ok && p.shapes[s] == t.shapes[s];
        bool rel_ok = true;
        for (int r = 0; r < corpus::kNumRelations; ++r)
            if (t.relations[r] && !p.relations[r]) rel_ok = false;
        rep.count_acc += count_ok;
        rep.color_acc += color_ok;
        rep.shape_acc += shape_ok;
        rep.relation_acc += rel_ok;
        rep.exact_match += count_ok && color_ok && shape_ok && rel_ok;
    }
    const double n = static_cast<double>(images.size());
    rep.count_acc /= n;
    rep.color_acc /= n;
    rep.shape_acc /= n;
    rep.relation_acc /= n;
    rep.exact_match /= n;
    return rep;
}

}  // namespace lmdiff::eval
