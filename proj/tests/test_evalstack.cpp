// Tests for the evaluation stack: the image-text similarity score's exact
// values, contrastive loss mechanics, the attribute scoring rules (exact set
// match vs. subset rule for relations), and the validation gate.
#include <cmath>
#include <vector>

#include "doctest.h"
#include "lmdiff/corpus.hpp"
#include "lmdiff/evalstack.hpp"
#include "lmdiff/random.hpp"

using lmdiff::RandomStream;
using lmdiff::corpus::CaptionTruth;
using lmdiff::eval::attribute_accuracy;
using lmdiff::eval::AttributeClassifier;
using lmdiff::eval::EvalNetConfig;
using lmdiff::eval::MetricModel;
using Td = lmdiff::nn::Tensor<double>;

namespace {

EvalNetConfig tiny_config() {
    EvalNetConfig c;
    c.img_size = 8;
    c.width1 = 2;
    c.width2 = 3;
    c.emb_dim = 6;
    c.vocab_size = 10;
    return c;
}

}  // namespace

TEST_CASE("similarity score is 100*sigmoid(alpha*cos + beta) of the encodings") {
    RandomStream init{121, 0, 0};
    const MetricModel<double> m(tiny_config(), init, false);
    RandomStream ds{122, 0, 0};
    const Td img = lmdiff::nn::randn_scaled<double>(ds, {3, 8, 8}, 1.0, false);
    const std::vector<int> ids{1, 4, 7};

    const Td iv = m.encode_image(img);
    const Td tv = m.encode_text(ids);
    REQUIRE(iv.shape == lmdiff::nn::Shape{1, 6});
    REQUIRE(tv.shape == lmdiff::nn::Shape{1, 6});
    // Encodings are unit rows.
    double ni = 0.0, nt = 0.0, cos = 0.0;
    for (int k = 0; k < 6; ++k) {
        ni += (*iv.data)[static_cast<std::size_t>(k)] * (*iv.data)[static_cast<std::size_t>(k)];
        nt += (*tv.data)[static_cast<std::size_t>(k)] * (*tv.data)[static_cast<std::size_t>(k)];
        cos += (*iv.data)[static_cast<std::size_t>(k)] * (*tv.data)[static_cast<std::size_t>(k)];
    }
    CHECK(ni == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(nt == doctest::Approx(1.0).epsilon(1e-6));

    const double alpha = (*m.params.get("metric.alpha").data)[0];
    const double beta = (*m.params.get("metric.beta").data)[0];
    CHECK(alpha == 10.0);
    CHECK(beta == -10.0);
    const double want = 100.0 / (1.0 + std::exp(-(alpha * cos + beta)));
    CHECK(m.siglip_score(img, ids) == doctest::Approx(want).epsilon(1e-12));

    // Identical encodings would give cos = 1 -> logit 0 -> a score of 50;
    // the known endpoint pins the calibration direction.
    CHECK(m.siglip_score(img, ids) < 50.0);  // random pair scores below the match point
}

TEST_CASE("contrastive loss rejects degenerate batches and rewards matching pairs") {
    RandomStream init{123, 0, 0};
    const MetricModel<double> m(tiny_config(), init, false);
    RandomStream ds{124, 0, 0};
    std::vector<Td> imgs;
    std::vector<std::vector<int>> txts;
    for (int i = 0; i < 3; ++i) {
        imgs.push_back(lmdiff::nn::randn_scaled<double>(ds, {3, 8, 8}, 1.0, false));
        txts.push_back({i + 1, i + 2});
    }
    const Td loss = m.contrastive_loss(imgs, txts);
    CHECK(std::isfinite((*loss.data)[0]));
    CHECK((*loss.data)[0] > 0.0);

    CHECK_THROWS(static_cast<void>(m.contrastive_loss({imgs[0]}, {txts[0]})));
    CHECK_THROWS(static_cast<void>(m.contrastive_loss(imgs, {txts[0], txts[1]})));

    // At init alpha=10, beta=-10 push all pair logits to about -10, so the
    // diagonal term dominates: softplus(10) vs softplus(-10) off-diagonal.
    const double expected_scale = (3 * 10.0 + 6 * std::exp(-10.0)) / 9.0;
    CHECK((*loss.data)[0] == doctest::Approx(expected_scale).epsilon(0.2));
}

TEST_CASE("metric checkpoint round trip") {
    RandomStream init{125, 0, 0};
    const MetricModel<float> m(tiny_config(), init, true);
    lmdiff::CheckpointFile ck;
    m.save_into(ck);
    const EvalNetConfig c2 = MetricModel<float>::config_from(ck);
    CHECK(c2.emb_dim == 6);
    CHECK(c2.vocab_size == 10);
    RandomStream init2{126, 0, 0};
    MetricModel<float> other(c2, init2, true);
    other.load_from(ck);
    for (const auto& e : m.params.entries()) CHECK(*other.params.get(e.name).data == *e.tensor.data);
}

TEST_CASE("attribute scoring: exact sets for count/color/shape, subset rule for relations") {
    RandomStream init{127, 0, 0};
    AttributeClassifier<double> clf(tiny_config(), init, false);
    clf.val_exact_match = 1.0;  // trained-state stand-in; the gate is tested separately

    RandomStream ds{128, 0, 0};
    const Td img = lmdiff::nn::randn_scaled<double>(ds, {3, 8, 8}, 1.0, false);
    const auto pred = clf.predict(img);

    // Build one truth that matches the prediction exactly but claims no
    // relations, and one that claims every relation.
    CaptionTruth match;
    match.count = pred.count;
    for (int c = 0; c < lmdiff::corpus::kNumColors; ++c) match.colors[static_cast<std::size_t>(c)] = pred.colors[static_cast<std::size_t>(c)];
    for (int s = 0; s < lmdiff::corpus::kNumShapes; ++s) match.shapes[static_cast<std::size_t>(s)] = pred.shapes[static_cast<std::size_t>(s)];
    CaptionTruth greedy = match;
    for (auto& b : greedy.relations) b = true;

    const auto rep = attribute_accuracy<double>({img, img}, {match, greedy}, clf);
    CHECK(rep.count_acc == 1.0);
    CHECK(rep.color_acc == 1.0);
    CHECK(rep.shape_acc == 1.0);
    // The no-claim truth always satisfies the subset rule; the all-claims
    // truth can only pass if the prediction asserts every relation bit.
    bool pred_all = true;
    for (bool b : pred.relations) pred_all = pred_all && b;
    CHECK(rep.relation_acc == (pred_all ? 1.0 : 0.5));

    // A wrong count breaks exact match but not the other heads.
    CaptionTruth off = match;
    off.count = pred.count == 1 ? 2 : 1;
    const auto rep2 = attribute_accuracy<double>({img}, {off}, clf);
    CHECK(rep2.count_acc == 0.0);
    CHECK(rep2.color_acc == 1.0);
    CHECK(rep2.exact_match == 0.0);
}

TEST_CASE("attribute accuracy refuses an unvalidated classifier and bad inputs") {
    RandomStream init{129, 0, 0};
    AttributeClassifier<double> clf(tiny_config(), init, false);
    RandomStream ds{130, 0, 0};
    const Td img = lmdiff::nn::randn_scaled<double>(ds, {3, 8, 8}, 1.0, false);
    const CaptionTruth t{};

    clf.val_exact_match = 0.90;  // below the gate
    CHECK_THROWS_WITH_AS(static_cast<void>(attribute_accuracy<double>({img}, {t}, clf)),
                         doctest::Contains("below 0.95"), std::runtime_error);
    clf.val_exact_match = 0.99;
    CHECK_NOTHROW(static_cast<void>(attribute_accuracy<double>({img}, {t}, clf)));
    CHECK_THROWS(static_cast<void>(attribute_accuracy<double>({img, img}, {t}, clf)));
    CHECK_THROWS(static_cast<void>(attribute_accuracy<double>({}, {}, clf)));
}

TEST_CASE("classifier checkpoint carries the validation stamp") {
    RandomStream init{131, 0, 0};
    AttributeClassifier<float> clf(tiny_config(), init, true);
    clf.val_exact_match = 0.987;
    lmdiff::CheckpointFile ck;
    clf.save_into(ck);
    RandomStream init2{132, 0, 0};
    AttributeClassifier<float> other(AttributeClassifier<float>::config_from(ck), init2, true);
    other.load_from(ck);
    CHECK(other.val_exact_match == 0.987);
    for (const auto& e : clf.params.entries()) CHECK(*other.params.get(e.name).data == *e.tensor.data);
}

TEST_CASE("classifier prediction is a pure function with sane ranges") {
    RandomStream init{133, 0, 0};
    AttributeClassifier<double> clf(tiny_config(), init, false);
    RandomStream ds{134, 0, 0};
    const Td img = lmdiff::nn::randn_scaled<double>(ds, {3, 8, 8}, 1.0, false);
    const auto p1 = clf.predict(img);
    const auto p2 = clf.predict(img);
    CHECK(p1.count >= 1);
    CHECK(p1.count <= lmdiff::corpus::kMaxEntities);
    CHECK(p1.count == p2.count);
    CHECK(p1.colors == p2.colors);
    CHECK(p1.shapes == p2.shapes);
    CHECK(p1.relations == p2.relations);
}
