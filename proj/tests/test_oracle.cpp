// Tests for the enumeration oracles: hand-computed posteriors on a frozen
// chain, agreement of the two posterior routes on random chains, mutation
// sensitivity, the encoder-decoder code posterior, and recovery of known
// Gaussian moments by the 1-D Langevin sampler.
#include <cmath>
#include <cstddef>
#include <vector>

#include "doctest.h"
#include "lmdiff/oracle.hpp"
#include "lmdiff/random.hpp"

using lmdiff::RandomStream;
using lmdiff::oracle::DiscreteChain;
using lmdiff::oracle::EncDecChain;
using lmdiff::oracle::langevin_1d;
using lmdiff::oracle::LangevinStats;
using lmdiff::oracle::posterior_bruteforce_context;
using lmdiff::oracle::posterior_encdec;
using lmdiff::oracle::posterior_ratio_context;

namespace {

// Position d of a sequence index is its d-th base-K digit, lowest first.
int digit_of(std::size_t idx, int d, int K) {
    for (int i = 1; i < d; ++i) idx /= static_cast<std::size_t>(K);
    return static_cast<int>(idx % static_cast<std::size_t>(K));
}

// Two positions, two states, one block step. The prior is indexed with
// position 1 as the low digit; the position-2 transition depends on the
// position-1 context, which is what the context posterior recovers.
DiscreteChain frozen_chain() {
    DiscreteChain chain;
    chain.K = 2;
    chain.D = 2;
    chain.T = 1;
    chain.prior = {0.18, 0.12, 0.42, 0.28};
    chain.tables.assign(12, 0.0);
    // position 1: single (empty) context
    chain.table_at(1, 1, 0, 0, 0) = 0.6;
    chain.table_at(1, 1, 0, 0, 1) = 0.4;
    chain.table_at(1, 1, 0, 1, 0) = 0.3;
    chain.table_at(1, 1, 0, 1, 1) = 0.7;
    // position 2: context = position-1 state
    chain.table_at(1, 2, 0, 0, 0) = 0.9;
    chain.table_at(1, 2, 0, 0, 1) = 0.1;
    chain.table_at(1, 2, 0, 1, 0) = 0.2;
    chain.table_at(1, 2, 0, 1, 1) = 0.8;
    chain.table_at(1, 2, 1, 0, 0) = 0.5;
    chain.table_at(1, 2, 1, 0, 1) = 0.5;
    chain.table_at(1, 2, 1, 1, 0) = 0.7;
    chain.table_at(1, 2, 1, 1, 1) = 0.3;
    chain.validate();
    return chain;
}

}  // namespace

TEST_CASE("frozen chain: context posterior matches hand-computed fractions") {
    const DiscreteChain chain = frozen_chain();

    // p(ctx | a=0, b=1) at position 2: weights 0.18*0.1 and 0.12*0.5.
    const std::vector<double> post = posterior_bruteforce_context(chain, 1, 2, 0, 1);
    REQUIRE(post.size() == 2);
    CHECK(post[0] == doctest::Approx(3.0 / 13.0).epsilon(1e-12));
    CHECK(post[1] == doctest::Approx(10.0 / 13.0).epsilon(1e-12));

    const std::vector<double> ratio = posterior_ratio_context(chain, 1, 2, 0, 1);
    REQUIRE(ratio.size() == 2);
    CHECK(ratio[0] == doctest::Approx(3.0 / 13.0).epsilon(1e-12));
    CHECK(ratio[1] == doctest::Approx(10.0 / 13.0).epsilon(1e-12));

    // p(ctx | a=1, b=0): weights 0.42*0.2 and 0.28*0.7.
    const std::vector<double> post2 = posterior_bruteforce_context(chain, 1, 2, 1, 0);
    CHECK(post2[0] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(post2[1] == doctest::Approx(0.7).epsilon(1e-12));

    // Position 1 has an empty context: the posterior is the point mass {1}.
    const std::vector<double> first = posterior_bruteforce_context(chain, 1, 1, 0, 1);
    REQUIRE(first.size() == 1);
    CHECK(first[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("frozen chain: time-0 marginal agrees with direct summation") {
    const DiscreteChain chain = frozen_chain();

    const std::vector<double> at_T = chain.marginal_at(1);
    REQUIRE(at_T.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(at_T[i] == doctest::Approx(chain.prior[i]).epsilon(1e-12));

    const std::vector<double> at_0 = chain.marginal_at(0);
    REQUIRE(at_0.size() == 4);
    double total = 0.0;
    for (double v : at_0) {
        CHECK(v >= 0.0);
        total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

    // Marginal of position 2 at time 0, summed over the prior by hand:
    // sum_x prior(x) * table2(ctx(x), digit2(x), b=0) = 0.502.
    double p2_zero = 0.0;
    for (std::size_t i = 0; i < 4; ++i)
        if (digit_of(i, 2, 2) == 0) p2_zero += at_0[i];
    CHECK(p2_zero == doctest::Approx(0.502).epsilon(1e-12));
}

TEST_CASE("random chains: brute-force and factorized posteriors agree") {
    RandomStream stream{901, 3};
    for (int rep = 0; rep < 4; ++rep) {
        const DiscreteChain chain = DiscreteChain::random(2, 3, 2, stream);
        chain.validate();
        for (int t = 1; t <= chain.T; ++t)
            for (int d = 1; d <= chain.D; ++d)
                for (int a = 0; a < chain.K; ++a)
                    for (int b = 0; b < chain.K; ++b) {
                        const std::vector<double> lhs = posterior_bruteforce_context(chain, t, d, a, b);
                        const std::vector<double> rhs = posterior_ratio_context(chain, t, d, a, b);
                        REQUIRE(lhs.size() == chain.ctx_count(d));
                        REQUIRE(rhs.size() == lhs.size());
                        double sum = 0.0;
                        for (std::size_t i = 0; i < lhs.size(); ++i) {
                            CHECK(std::abs(lhs[i] - rhs[i]) < 1e-10);
                            CHECK(lhs[i] >= 0.0);
                            sum += lhs[i];
                        }
                        CHECK(sum == doctest::Approx(1.0).epsilon(1e-10));
                    }
    }

    // Wider alphabet, one step.
    const DiscreteChain wide = DiscreteChain::random(3, 2, 1, stream);
    wide.validate();
    const std::vector<double> lhs = posterior_bruteforce_context(wide, 1, 2, 2, 1);
    const std::vector<double> rhs = posterior_ratio_context(wide, 1, 2, 2, 1);
    REQUIRE(lhs.size() == 3);
    for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(std::abs(lhs[i] - rhs[i]) < 1e-10);
}

TEST_CASE("perturbing a transition entry moves the posterior and fails validation") {
    DiscreteChain chain = frozen_chain();
    const std::vector<double> before = posterior_bruteforce_context(chain, 1, 2, 0, 1);

    chain.table_at(1, 2, 0, 0, 1) += 1e-3;
    CHECK_THROWS(chain.validate());  // the (ctx=0, a=0) slice no longer sums to 1

    // Both routes still agree with each other (the identity is algebraic),
    // but the posterior itself has visibly moved.
    const std::vector<double> after = posterior_bruteforce_context(chain, 1, 2, 0, 1);
    const std::vector<double> after_ratio = posterior_ratio_context(chain, 1, 2, 0, 1);
    CHECK(std::abs(after[0] - after_ratio[0]) < 1e-10);
    CHECK(std::abs(after[0] - before[0]) > 1e-4);
}

TEST_CASE("chain validation and accessors reject malformed input") {
    DiscreteChain chain = frozen_chain();

    SUBCASE("prior size mismatch") {
        chain.prior.push_back(0.0);
        CHECK_THROWS(chain.validate());
    }
    SUBCASE("negative table entry") {
        chain.table_at(1, 1, 0, 0, 0) = -0.1;
        chain.table_at(1, 1, 0, 0, 1) = 1.1;
        CHECK_THROWS(chain.validate());
    }
    SUBCASE("index range checks") {
        CHECK_THROWS(chain.table_at(0, 1, 0, 0, 0));
        CHECK_THROWS(chain.table_at(2, 1, 0, 0, 0));
        CHECK_THROWS(chain.table_at(1, 3, 0, 0, 0));
        CHECK_THROWS(chain.table_at(1, 1, 0, 2, 0));
        CHECK_THROWS(chain.table_at(1, 1, 0, 0, -1));
    }
    SUBCASE("unreachable evidence") {
        // Give position 2 zero prior mass on state 0.
        chain.prior = {0.0, 0.0, 0.6, 0.4};
        CHECK_THROWS_WITH(posterior_bruteforce_context(chain, 1, 2, 0, 0), "unreachable evidence");
    }
}

TEST_CASE("encoder-decoder posterior: degenerate and code-blind cases") {
    RandomStream stream{902, 1};

    SUBCASE("a single code is always certain") {
        const EncDecChain chain = EncDecChain::random(2, 2, 1, 1, stream);
        const std::vector<double> post = posterior_encdec(chain, 1, 1, 0, 1);
        REQUIRE(post.size() == 1);
        CHECK(post[0] == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("code-independent dynamics return the code prior") {
        EncDecChain chain = EncDecChain::random(2, 2, 1, 3, stream);
        chain.prior_c = {0.2, 0.5, 0.3};
        // Copy code 0's init row and tables into every other code.
        const std::size_t n = chain.n_seq();
        for (int c = 1; c < chain.C; ++c)
            for (std::size_t x = 0; x < n; ++x) chain.init[c * n + x] = chain.init[x];
        for (int c = 1; c < chain.C; ++c)
            for (int d = 1; d <= chain.D; ++d)
                for (int a = 0; a < chain.K; ++a)
                    for (int b = 0; b < chain.K; ++b) chain.table_at(1, d, c, a, b) = chain.table_at(1, d, 0, a, b);
        chain.validate();
        const std::vector<double> post = posterior_encdec(chain, 1, 2, 1, 0);
        REQUIRE(post.size() == 3);
        CHECK(post[0] == doctest::Approx(0.2).epsilon(1e-12));
        CHECK(post[1] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(post[2] == doctest::Approx(0.3).epsilon(1e-12));
    }
}

TEST_CASE("encoder-decoder posterior matches a hand-computed two-code chain") {
    EncDecChain chain;
    chain.K = 2;
    chain.D = 1;
    chain.T = 1;
    chain.C = 2;
    chain.prior_c = {0.5, 0.5};
    chain.init = {0.9, 0.1,   // code 0 strongly prefers state 0
                  0.1, 0.9};  // code 1 strongly prefers state 1
    chain.tables.assign(8, 0.0);
    chain.table_at(1, 1, 0, 0, 0) = 0.8;
    chain.table_at(1, 1, 0, 0, 1) = 0.2;
    chain.table_at(1, 1, 0, 1, 0) = 0.5;
    chain.table_at(1, 1, 0, 1, 1) = 0.5;
    chain.table_at(1, 1, 1, 0, 0) = 0.2;
    chain.table_at(1, 1, 1, 0, 1) = 0.8;
    chain.table_at(1, 1, 1, 1, 0) = 0.5;
    chain.table_at(1, 1, 1, 1, 1) = 0.5;
    chain.validate();

    // Evidence (a=0, b=0): weights 0.5*0.9*0.8 = 0.36 and 0.5*0.1*0.2 = 0.01.
    const std::vector<double> post = posterior_encdec(chain, 1, 1, 0, 0);
    REQUIRE(post.size() == 2);
    CHECK(post[0] == doctest::Approx(36.0 / 37.0).epsilon(1e-12));
    CHECK(post[1] == doctest::Approx(1.0 / 37.0).epsilon(1e-12));

    // Random chains exercise the internal dual-route consistency check.
    RandomStream stream{903, 2};
    for (int rep = 0; rep < 3; ++rep) {
        const EncDecChain rnd = EncDecChain::random(2, 2, 2, 3, stream);
        rnd.validate();
        for (int t = 1; t <= rnd.T; ++t)
            for (int a = 0; a < rnd.K; ++a)
                for (int b = 0; b < rnd.K; ++b) {
                    const std::vector<double> p = posterior_encdec(rnd, t, 1, a, b);
                    double sum = 0.0;
                    for (double v : p) {
                        CHECK(v >= 0.0);
                        sum += v;
                    }
                    CHECK(sum == doctest::Approx(1.0).epsilon(1e-10));
                }
    }
}

TEST_CASE("langevin sampler recovers the moments of a known Gaussian") {
    // Stationary law N(2, 0.25): grad log p(c) = -(c - 2) / 0.25.
    const auto grad = [](double c) { return -(c - 2.0) / 0.25; };
    RandomStream stream{904, 7};
    const LangevinStats stats = langevin_1d(grad, 0.002, 200000, stream, 0.0, 5000);
    CHECK(std::abs(stats.mean - 2.0) < 0.08);
    CHECK(std::abs(stats.var - 0.25) < 0.05);

    // Same seed, same trajectory.
    RandomStream replay{904, 7};
    const LangevinStats again = langevin_1d(grad, 0.002, 200000, replay, 0.0, 5000);
    CHECK(again.mean == stats.mean);
    CHECK(again.var == stats.var);
}

TEST_CASE("langevin sampler rejects empty windows and flags divergence") {
    const auto grad = [](double c) { return -c; };
    RandomStream stream{905, 1};
    CHECK_THROWS_WITH(langevin_1d(grad, 0.01, 100, stream, 0.0, 100), "langevin_1d: no samples after burn-in");

    // A repelling force blows the trajectory past any bound.
    const auto repel = [](double c) { return 1e3 * (c + 1.0); };
    RandomStream stream2{905, 2};
    CHECK_THROWS_WITH(langevin_1d(repel, 0.01, 100000, stream2, 1.0, 0), "langevin_1d: diverged");
}
