// Tests for the dual cross-attention adapter: initialization contract,
// backbone preservation at a2 = 0, freezing of the original projections,
// scale reporting, and persistence.
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "lmdiff/adapter.hpp"
#include "lmdiff/diffusion.hpp"
#include "lmdiff/random.hpp"

using lmdiff::RandomStream;
using lmdiff::ad::adapter_forward;
using lmdiff::ad::adapter_site_fn;
using lmdiff::ad::AdapterState;
using lmdiff::ad::init_adapter;
using lmdiff::ad::load_adapter_from;
using lmdiff::ad::save_adapter_into;
using lmdiff::ad::scale_report;
using lmdiff::diff::DenoiserConfig;
using lmdiff::diff::DenoiserNet;
using Td = lmdiff::nn::Tensor<double>;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig c;
    c.in_channels = 2;
    c.img_size = 4;
    c.base_width = 3;
    c.n_down = 1;
    c.cond_dim = 5;
    c.time_dim = 6;
    c.n_steps = 8;
    return c;
}

constexpr int kLmDim = 9;

}  // namespace

TEST_CASE("initialization: identity alignment, copied projections, unit frozen weight") {
    RandomStream init{91, 0, 0};
    const DenoiserNet<double> net(tiny_config(), init, true);
    RandomStream as{92, 0, 0};
    const AdapterState<double> state = init_adapter(net, kLmDim, 0.1, as);

    REQUIRE(state.layers.size() == 3);
    CHECK(state.lm_dim == kLmDim);
    CHECK(state.cond_dim == 5);
    for (const auto& l : state.layers) {
        // phi starts as the truncated identity.
        for (int i = 0; i < kLmDim; ++i)
            for (int j = 0; j < 5; ++j)
                CHECK((*l.phi.data)[static_cast<std::size_t>(i) * 5 + j] == (i == j ? 1.0 : 0.0));
        CHECK((*l.a1.data)[0] == 1.0);
        CHECK((*l.b1.data)[0] == 0.0);
        CHECK((*l.a2.data)[0] == 0.1);
        CHECK((*l.b2.data)[0] == 0.0);
        // Frozen copies share storage with the denoiser weights but carry no grad.
        const std::string dn = l.site == "mid" ? "dn.mid.site" : (l.site == "down.0" ? "dn.down0.site" : "dn.up0.site");
        CHECK(l.tau_hat_q.data == net.params.get(dn + ".wq").data);
        CHECK_FALSE(l.tau_hat_q.requires_grad);
        CHECK(l.tau_q.requires_grad);
        CHECK(l.tau_q.shape == lmdiff::nn::Shape{net.site_channels(l.site), net.site_channels(l.site)});
        CHECK(l.tau_k.shape == lmdiff::nn::Shape{kLmDim, net.site_channels(l.site)});
    }
    CHECK_THROWS(static_cast<void>(state.layer("nope")));
}

TEST_CASE("a2 = 0 with identity-aligned phi preserves the original site attention exactly") {
    RandomStream init{93, 0, 0};
    DenoiserConfig cfg = tiny_config();
    cfg.cond_dim = 5;
    const DenoiserNet<double> net(cfg, init, true);
    RandomStream as{94, 0, 0};
    // lm_dim == cond_dim makes phi the exact identity, so phi(c) == c.
    const AdapterState<double> state = init_adapter(net, 5, 0.0, as);

    RandomStream ds{95, 0, 0};
    const Td c = lmdiff::nn::randn_scaled<double>(ds, {2, 5}, 1.0, false);
    const Td z = lmdiff::nn::randn_scaled<double>(ds, {2, 4, 4}, 1.0, false);

    const Td with_adapter = net.forward_sites(z, 3, adapter_site_fn(state, c));
    const Td plain = net.forward(z, 3, c);
    CHECK(*with_adapter.data == *plain.data);
}

TEST_CASE("the fresh branch contributes once a2 is nonzero") {
    RandomStream init{96, 0, 0};
    const DenoiserNet<double> net(tiny_config(), init, true);
    RandomStream a1{97, 0, 0}, a2{97, 0, 0};
    const AdapterState<double> off = init_adapter(net, kLmDim, 0.0, a1);
    const AdapterState<double> on = init_adapter(net, kLmDim, 0.4, a2);

    RandomStream ds{98, 0, 0};
    const Td c = lmdiff::nn::randn_scaled<double>(ds, {3, kLmDim}, 1.0, false);
    const Td q = lmdiff::nn::randn_scaled<double>(ds, {4, 6}, 1.0, false);  // mid site is 2*base_width wide

    const Td y_off = adapter_forward(q, c, off.layer("mid"));
    const Td y_on = adapter_forward(q, c, on.layer("mid"));
    CHECK(y_off.shape == y_on.shape);
    CHECK(*y_off.data != *y_on.data);

    // Width contracts are enforced.
    CHECK_THROWS(static_cast<void>(adapter_forward(q, lmdiff::nn::randn_scaled<double>(ds, {3, 4}, 1.0, false), on.layer("mid"))));
    CHECK_THROWS(static_cast<void>(adapter_forward(lmdiff::nn::randn_scaled<double>(ds, {4, 5}, 1.0, false), c, on.layer("mid"))));
}

TEST_CASE("training the adapter leaves the frozen copies shared and grad-free") {
    RandomStream init{99, 0, 0};
    const DenoiserNet<double> net(tiny_config(), init, true);
    RandomStream as{100, 0, 0};
    const AdapterState<double> state = init_adapter(net, kLmDim, 0.3, as);
    lmdiff::nn::ParamStore<double> store;
    state.register_params(store);
    CHECK(store.size() == 3 * 8);

    RandomStream ds{101, 0, 0};
    const Td c = lmdiff::nn::randn_scaled<double>(ds, {2, kLmDim}, 1.0, false);
    const Td q = lmdiff::nn::randn_scaled<double>(ds, {4, 6}, 1.0, false);
    const Td loss = lmdiff::nn::sum_all(adapter_forward(q, c, state.layer("mid")));
    lmdiff::nn::backward(loss);

    const auto& l = state.layer("mid");
    CHECK_FALSE(l.tau_hat_q.grad);
    CHECK_FALSE(l.tau_hat_k.grad);
    CHECK_FALSE(l.tau_hat_v.grad);
    REQUIRE(l.phi.grad);
    REQUIRE(l.tau_k.grad);
    double phi_mag = 0.0;
    for (double g : *l.phi.grad) phi_mag += std::abs(g);
    CHECK(phi_mag > 0.0);
}

TEST_CASE("scale report exposes a1*e^{b1} and a2*e^{b2} per site in network order") {
    RandomStream init{102, 0, 0};
    const DenoiserNet<double> net(tiny_config(), init, true);
    RandomStream as{103, 0, 0};
    AdapterState<double> state = init_adapter(net, kLmDim, 0.25, as);
    (*state.layers[1].b1.data)[0] = 0.5;
    (*state.layers[1].a2.data)[0] = -0.2;
    (*state.layers[1].b2.data)[0] = 1.0;

    const auto rows = scale_report(state);
    REQUIRE(rows.size() == 3);
    CHECK(std::get<0>(rows[0]) == "down.0");
    CHECK(std::get<0>(rows[1]) == "mid");
    CHECK(std::get<0>(rows[2]) == "up.0");
    CHECK(std::get<1>(rows[0]) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(std::get<2>(rows[0]) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(std::get<1>(rows[1]) == doctest::Approx(std::exp(0.5)).epsilon(1e-15));
    CHECK(std::get<2>(rows[1]) == doctest::Approx(-0.2 * std::exp(1.0)).epsilon(1e-15));
}

TEST_CASE("adapter checkpoint round trip restores every tensor exactly") {
    RandomStream init{104, 0, 0};
    const DenoiserNet<double> net(tiny_config(), init, true);
    RandomStream as{105, 0, 0};
    AdapterState<double> state = init_adapter(net, kLmDim, 0.3, as);
    // Nudge a few values so the round trip is not testing pristine init.
    (*state.layers[0].phi.data)[7] = 0.123;
    (*state.layers[2].tau_v.data)[3] = -0.456;
    (*state.layers[1].b2.data)[0] = 0.789;

    lmdiff::CheckpointFile ck;
    save_adapter_into(state, ck);

    RandomStream as2{106, 0, 0};
    AdapterState<double> other = init_adapter(net, kLmDim, 0.0, as2);
    load_adapter_from(other, ck);
    REQUIRE(other.layers.size() == state.layers.size());
    for (std::size_t i = 0; i < state.layers.size(); ++i) {
        const auto& a = state.layers[i];
        const auto& b = other.layers[i];
        CHECK(*a.phi.data == *b.phi.data);
        CHECK(*a.tau_q.data == *b.tau_q.data);
        CHECK(*a.tau_k.data == *b.tau_k.data);
        CHECK(*a.tau_v.data == *b.tau_v.data);
        CHECK(*a.a1.data == *b.a1.data);
        CHECK(*a.b1.data == *b.b1.data);
        CHECK(*a.a2.data == *b.a2.data);
        CHECK(*a.b2.data == *b.b2.data);
        CHECK(*a.tau_hat_q.data == *b.tau_hat_q.data);
    }
}
