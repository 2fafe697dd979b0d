// Exact, network-free verification of the probabilistic identities behind
// the encoding module: fully enumerable discrete block chains where every
// posterior can be computed two independent ways, plus a 1-D Langevin
// sampler checked against a known stationary distribution. All math f64.
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "lmdiff/random.hpp"

namespace lmdiff::oracle {

// A chain over D positions with K states each, evolving through T block
// steps indexed by state time t = T..1 (block t maps x^t to x^{t-1}):
//   p(x^{t-1} | x^t) = prod_d p_t(x^{t-1}_d | x^t_d, x^t_{<d})
struct DiscreteChain {
    int K = 2, D = 1, T = 1;
    std::vector<double> prior;   // joint over x^T, size K^D
    std::vector<double> tables;  // [t-1][d-1][ctx][a][b], ctx in base-K over positions < d

    std::size_t n_seq() const;
    std::size_t ctx_count(int d) const;  // K^(d-1)
    double table_at(int t, int d, std::size_t ctx, int a, int b) const;
    double& table_at(int t, int d, std::size_t ctx, int a, int b);

    void validate() const;  // slices sum to 1 within 1e-12, entries >= 0
    static DiscreteChain random(int K, int D, int T, RandomStream& stream);

    // joint distribution of the full state vector at time t (T..0)
    std::vector<double> marginal_at(int t) const;
};

// p(x^t_{<d} | x^t_d = a, x^{t-1}_d = b) by full joint enumeration and
// Bayes normalization; indexed over base-K context tuples.
std::vector<double> posterior_bruteforce_context(const DiscreteChain& chain, int t, int d, int a, int b);

// The same posterior assembled from three separately enumerated factors:
// p(b | a, ctx) * p(ctx | a) / p(b | a), then renormalized.
std::vector<double> posterior_ratio_context(const DiscreteChain& chain, int t, int d, int a, int b);

// Encoder-decoder variant: a latent code c drives both the initial state
// and every block transition; positions evolve independently given c.
struct EncDecChain {
    int K = 2, D = 1, T = 1, C = 2;
    std::vector<double> prior_c;  // [C]
    std::vector<double> init;     // [c][x^T joint], size C * K^D
    std::vector<double> tables;   // [t-1][d-1][c][a][b]

    std::size_t n_seq() const;
    double table_at(int t, int d, int c, int a, int b) const;
    double& table_at(int t, int d, int c, int a, int b);

    void validate() const;
    static EncDecChain random(int K, int D, int T, int C, RandomStream& stream);

    // joint of the full state vector at time t, given code c
    std::vector<double> marginal_at(int t, int c) const;
};

// p(c | x^t_d = a, x^{t-1}_d = b), computed both as a definitional joint
// enumeration and as the Bayes product p(a, b | c) p(c) / p(a, b); throws
// if the two routes disagree beyond 1e-10, returns the Bayes side.
std::vector<double> posterior_encdec(const EncDecChain& chain, int t, int d, int a, int b);

// ------------------------------------------------------------- Langevin

struct LangevinStats {
    double mean = 0.0;
    double var = 0.0;
};

// c <- c + step * grad_log_p(c) + sqrt(2 * step) * eps, N steps from c0;
// reports moments of the visited trajectory after discarding burn_in steps.
LangevinStats langevin_1d(const std::function<double(double)>& grad_log_p, double step, long long n_steps,
                          RandomStream& stream, double c0 = 0.0, long long burn_in = 0);

}  // namespace lmdiff::oracle
