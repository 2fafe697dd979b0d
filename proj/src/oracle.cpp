#include "lmdiff/oracle.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace lmdiff::oracle {

namespace {

std::size_t ipow(int base, int exp) {
    std::size_t r = 1;
    for (int i = 0; i < exp; ++i) r *= static_cast<std::size_t>(base);
    return r;
}

void check_pos(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

// digits of seq index: position d (1-based) has digit (idx / K^(d-1)) % K
int digit(std::size_t idx, int d, int K) { return static_cast<int>(idx / ipow(K, d - 1) % static_cast<std::size_t>(K)); }

// context tuple (positions < d) of a sequence index is just its low digits
std::size_t ctx_of(std::size_t idx, int d, int K) { return idx % ipow(K, d - 1); }

std::vector<double> normalized_row(RandomStream& stream, int n) {
    std::vector<double> row(n);
    double sum = 0.0;
    for (double& v : row) {
        v = 0.05 + stream.next_uniform();  // bounded away from zero: every event reachable
        sum += v;
    }
    for (double& v : row) v /= sum;
    return row;
}

}  // namespace

// ------------------------------------------------------------ DiscreteChain

std::size_t DiscreteChain::n_seq() const { return ipow(K, D); }

std::size_t DiscreteChain::ctx_count(int d) const { return ipow(K, d - 1); }

namespace {
std::size_t chain_offset(const DiscreteChain& c, int t, int d, std::size_t ctx, int a, int b) {
    check_pos(1 <= t && t <= c.T, "block step out of range");
    check_pos(1 <= d && d <= c.D, "position out of range");
    check_pos(0 <= a && a < c.K && 0 <= b && b < c.K, "state out of range");
    // layout: per (t, d) a [ctx][a][b] sub-table; (t, d) sub-tables concatenated
    std::size_t off = 0;
    for (int tt = 1; tt <= c.T; ++tt)
        for (int dd = 1; dd <= c.D; ++dd) {
            if (tt == t && dd == d) return off + (ctx * c.K + a) * c.K + b;
            off += c.ctx_count(dd) * c.K * c.K;
        }
    throw std::runtime_error("unreachable");
}
}  // namespace

double DiscreteChain::table_at(int t, int d, std::size_t ctx, int a, int b) const {
    return tables[chain_offset(*this, t, d, ctx, a, b)];
}

double& DiscreteChain::table_at(int t, int d, std::size_t ctx, int a, int b) {
    return tables[chain_offset(*this, t, d, ctx, a, b)];
}

void DiscreteChain::validate() const {
    check_pos(prior.size() == n_seq(), "prior size mismatch");
    double psum = 0.0;
    for (double p : prior) {
        check_pos(p >= 0.0, "negative prior entry");
        psum += p;
    }
    check_pos(std::abs(psum - 1.0) <= 1e-12, "prior does not sum to 1");
    for (int t = 1; t <= T; ++t)
        for (int d = 1; d <= D; ++d)
            for (std::size_t ctx = 0; ctx < ctx_count(d); ++ctx)
                for (int a = 0; a < K; ++a) {
                    double s = 0.0;
                    for (int b = 0; b < K; ++b) {
                        const double p = table_at(t, d, ctx, a, b);
                        check_pos(p >= 0.0, "negative table entry");
                        s += p;
                    }
                    check_pos(std::abs(s - 1.0) <= 1e-12, "conditional slice does not sum to 1");
                }
}

DiscreteChain DiscreteChain::random(int K, int D, int T, RandomStream& stream) {
    DiscreteChain c;
    c.K = K;
    c.D = D;
    c.T = T;
    c.prior = normalized_row(stream, static_cast<int>(c.n_seq()));
    std::size_t total = 0;
    for (int d = 1; d <= D; ++d) total += c.ctx_count(d) * K * K;
    c.tables.resize(total * static_cast<std::size_t>(T));
    for (int t = 1; t <= T; ++t)
        for (int d = 1; d <= D; ++d)
            for (std::size_t ctx = 0; ctx < c.ctx_count(d); ++ctx)
                for (int a = 0; a < K; ++a) {
                    const std::vector<double> row = normalized_row(stream, K);
                    for (int b = 0; b < K; ++b) c.table_at(t, d, ctx, a, b) = row[b];
                }
    c.validate();
    return c;
}

std::vector<double> DiscreteChain::marginal_at(int t) const {
    check_pos(0 <= t && t <= T, "state time out of range");
    std::vector<double> joint = prior;  // x^T
    for (int s = T; s > t; --s) {
        std::vector<double> next(n_seq(), 0.0);
        for (std::size_t x = 0; x < n_seq(); ++x) {
            if (joint[x] == 0.0) continue;
            for (std::size_t y = 0; y < n_seq(); ++y) {
                double p = joint[x];
                for (int d = 1; d <= D; ++d) p *= table_at(s, d, ctx_of(x, d, K), digit(x, d, K), digit(y, d, K));
                next[y] += p;
            }
        }
        joint = std::move(next);
    }
    return joint;
}

std::vector<double> posterior_bruteforce_context(const DiscreteChain& chain, int t, int d, int a, int b) {
    check_pos(1 <= t && t <= chain.T, "block step out of range");
    check_pos(1 <= d && d <= chain.D, "position out of range");
    const std::vector<double> state = chain.marginal_at(t);
    // joint p(ctx, x^t_d = a, x^{t-1}_d = b) by summing the full joint of
    // x^t over everything but the context digits
    std::vector<double> joint_ctx(chain.ctx_count(d), 0.0);
    for (std::size_t x = 0; x < chain.n_seq(); ++x) {
        if (digit(x, d, chain.K) != a) continue;
        const std::size_t ctx = ctx_of(x, d, chain.K);
        joint_ctx[ctx] += state[x] * chain.table_at(t, d, ctx, a, b);
    }
    double total = 0.0;
    for (double v : joint_ctx) total += v;
    if (total <= 0.0) throw std::runtime_error("unreachable evidence");
    for (double& v : joint_ctx) v /= total;
    return joint_ctx;
}

std::vector<double> posterior_ratio_context(const DiscreteChain& chain, int t, int d, int a, int b) {
    check_pos(1 <= t && t <= chain.T, "block step out of range");
    check_pos(1 <= d && d <= chain.D, "position out of range");
    const std::vector<double> state = chain.marginal_at(t);

    // factor 1: p(ctx | x^t_d = a)
    std::vector<double> ctx_given_a(chain.ctx_count(d), 0.0);
    double p_a = 0.0;
    for (std::size_t x = 0; x < chain.n_seq(); ++x) {
        if (digit(x, d, chain.K) != a) continue;
        ctx_given_a[ctx_of(x, d, chain.K)] += state[x];
        p_a += state[x];
    }
    if (p_a <= 0.0) throw std::runtime_error("unreachable evidence");
    for (double& v : ctx_given_a) v /= p_a;

    // factor 2: the context-free block prediction p(b | a) = sum_ctx p(b | a, ctx) p(ctx | a)
    double p_b_given_a = 0.0;
    for (std::size_t ctx = 0; ctx < chain.ctx_count(d); ++ctx)
        p_b_given_a += chain.table_at(t, d, ctx, a, b) * ctx_given_a[ctx];
    if (p_b_given_a <= 0.0) throw std::runtime_error("unreachable evidence");

    // combine: posterior(ctx) = p(b | a, ctx) * p(ctx | a) / p(b | a), renormalized
    std::vector<double> post(chain.ctx_count(d));
    double total = 0.0;
    for (std::size_t ctx = 0; ctx < chain.ctx_count(d); ++ctx) {
        post[ctx] = chain.table_at(t, d, ctx, a, b) * ctx_given_a[ctx] / p_b_given_a;
        total += post[ctx];
    }
    for (double& v : post) v /= total;
    return post;
}

// -------------------------------------------------------------- EncDecChain

std::size_t EncDecChain::n_seq() const { return ipow(K, D); }

namespace {
std::size_t encdec_offset(const EncDecChain& c, int t, int d, int code, int a, int b) {
    check_pos(1 <= t && t <= c.T, "block step out of range");
    check_pos(1 <= d && d <= c.D, "position out of range");
    check_pos(0 <= code && code < c.C, "code out of range");
    check_pos(0 <= a && a < c.K && 0 <= b && b < c.K, "state out of range");
    return ((((static_cast<std::size_t>(t - 1) * c.D + (d - 1)) * c.C + code) * c.K + a) * c.K) + b;
}
}  // namespace

double EncDecChain::table_at(int t, int d, int c, int a, int b) const {
    return tables[encdec_offset(*this, t, d, c, a, b)];
}

double& EncDecChain::table_at(int t, int d, int c, int a, int b) {
    return tables[encdec_offset(*this, t, d, c, a, b)];
}

void EncDecChain::validate() const {
    check_pos(prior_c.size() == static_cast<std::size_t>(C), "code prior size mismatch");
    double csum = 0.0;
    for (double p : prior_c) {
        check_pos(p >= 0.0, "negative code prior");
        csum += p;
    }
    check_pos(std::abs(csum - 1.0) <= 1e-12, "code prior does not sum to 1");
    check_pos(init.size() == static_cast<std::size_t>(C) * n_seq(), "init size mismatch");
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t x = 0; x < n_seq(); ++x) s += init[c * n_seq() + x];
        check_pos(std::abs(s - 1.0) <= 1e-12, "init slice does not sum to 1");
    }
    for (int t = 1; t <= T; ++t)
        for (int d = 1; d <= D; ++d)
            for (int c = 0; c < C; ++c)
                for (int a = 0; a < K; ++a) {
                    double s = 0.0;
                    for (int b = 0; b < K; ++b) s += table_at(t, d, c, a, b);
                    check_pos(std::abs(s - 1.0) <= 1e-12, "conditional slice does not sum to 1");
                }
}

EncDecChain EncDecChain::random(int K, int D, int T, int C, RandomStream& stream) {
    EncDecChain c;
    c.K = K;
    c.D = D;
    c.T = T;
    c.C = C;
    c.prior_c = normalized_row(stream, C);
    c.init.resize(static_cast<std::size_t>(C) * c.n_seq());
    for (int code = 0; code < C; ++code) {
        const std::vector<double> row = normalized_row(stream, static_cast<int>(c.n_seq()));
        for (std::size_t x = 0; x < c.n_seq(); ++x) c.init[code * c.n_seq() + x] = row[x];
    }
    c.tables.resize(static_cast<std::size_t>(T) * D * C * K * K);
    for (int t = 1; t <= T; ++t)
        for (int d = 1; d <= D; ++d)
            for (int code = 0; code < C; ++code)
                for (int a = 0; a < K; ++a) {
                    const std::vector<double> row = normalized_row(stream, K);
                    for (int b = 0; b < K; ++b) c.table_at(t, d, code, a, b) = row[b];
                }
    c.validate();
    return c;
}

std::vector<double> EncDecChain::marginal_at(int t, int c) const {
    check_pos(0 <= t && t <= T, "state time out of range");
    check_pos(0 <= c && c < C, "code out of range");
    std::vector<double> joint(init.begin() + c * n_seq(), init.begin() + (c + 1) * n_seq());
    for (int s = T; s > t; --s) {
        std::vector<double> next(n_seq(), 0.0);
        for (std::size_t x = 0; x < n_seq(); ++x) {
            if (joint[x] == 0.0) continue;
            for (std::size_t y = 0; y < n_seq(); ++y) {
                double p = joint[x];
                for (int d = 1; d <= D; ++d) p *= table_at(s, d, c, digit(x, d, K), digit(y, d, K));
                next[y] += p;
            }
        }
        joint = std::move(next);
    }
    return joint;
}

std::vector<double> posterior_encdec(const EncDecChain& chain, int t, int d, int a, int b) {
    check_pos(1 <= t && t <= chain.T, "block step out of range");
    check_pos(1 <= d && d <= chain.D, "position out of range");

    // Bayes route: p(c | a, b) = p(a, b | c) p(c) / sum_c' ...
    std::vector<double> bayes(chain.C, 0.0);
    double z_bayes = 0.0;
    for (int c = 0; c < chain.C; ++c) {
        const std::vector<double> state = chain.marginal_at(t, c);
        double p_a_given_c = 0.0;
        for (std::size_t x = 0; x < chain.n_seq(); ++x)
            if (digit(x, d, chain.K) == a) p_a_given_c += state[x];
        bayes[c] = p_a_given_c * chain.table_at(t, d, c, a, b) * chain.prior_c[c];
        z_bayes += bayes[c];
    }
    if (z_bayes <= 0.0) throw std::runtime_error("unreachable evidence");
    for (double& v : bayes) v /= z_bayes;

    // Definitional route: enumerate the joint over (c, full state vectors
    // at time t, successor value at position d) and condition directly.
    std::vector<double> definitional(chain.C, 0.0);
    double z_def = 0.0;
    for (int c = 0; c < chain.C; ++c) {
        const std::vector<double> state = chain.marginal_at(t, c);
        for (std::size_t x = 0; x < chain.n_seq(); ++x) {
            if (digit(x, d, chain.K) != a) continue;
            const double p = chain.prior_c[c] * state[x] * chain.table_at(t, d, c, a, b);
            definitional[c] += p;
            z_def += p;
        }
    }
    if (z_def <= 0.0) throw std::runtime_error("unreachable evidence");
    for (double& v : definitional) v /= z_def;

    for (int c = 0; c < chain.C; ++c)
        if (std::abs(bayes[c] - definitional[c]) > 1e-10)
            throw std::runtime_error("posterior routes disagree at code " + std::to_string(c));
    return bayes;
}

// ----------------------------------------------------------------- Langevin

LangevinStats langevin_1d(const std::function<double(double)>& grad_log_p, double step, long long n_steps,
                          RandomStream& stream, double c0, long long burn_in) {
    if (n_steps <= burn_in) throw std::runtime_error("langevin_1d: no samples after burn-in");
    double c = c0;
    const double noise_scale = std::sqrt(2.0 * step);
    double sum = 0.0, sum_sq = 0.0;
    long long kept = 0;
    for (long long i = 0; i < n_steps; ++i) {
        c += step * grad_log_p(c) + noise_scale * stream.next_normal();
        if (std::abs(c) > 1e6) throw std::runtime_error("langevin_1d: diverged");
        if (i >= burn_in) {
            sum += c;
            sum_sq += c * c;
            ++kept;
        }
    }
    LangevinStats stats;
    stats.mean = sum / static_cast<double>(kept);
    stats.var = sum_sq / static_cast<double>(kept) - stats.mean * stats.mean;
    return stats;
}

}  // namespace lmdiff::oracle
