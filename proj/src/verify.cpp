#include "lmdiff/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmdiff/adapter.hpp"
#include "lmdiff/corpus.hpp"
#include "lmdiff/diffusion.hpp"
#include "lmdiff/encoding.hpp"
#include "lmdiff/evalstack.hpp"
#include "lmdiff/gradcheck.hpp"
#include "lmdiff/lm.hpp"
#include "lmdiff/oracle.hpp"
#include "lmdiff/random.hpp"
#include "lmdiff/tensor.hpp"

namespace lmdiff::verify {

namespace {

using nn::Tensor;

std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

// Runs a check body, converting any exception into a failed result.
CheckResult guarded(const std::string& name, const std::function<CheckResult()>& body) {
    CheckResult r;
    try {
        r = body();
    } catch (const std::exception& e) {
        r.pass = false;
        r.detail = std::string("exception: ") + e.what();
    }
    r.name = name;
    return r;
}

double rel_gap(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Largest relative element gap between two same-shaped tensors.
template <class T>
double max_rel_gap(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape) throw std::runtime_error("shape mismatch in comparison");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data->size(); ++i)
        m = std::max(m, rel_gap(static_cast<double>((*a.data)[i]), static_cast<double>((*b.data)[i])));
    return m;
}

template <class T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape) return false;
    for (std::size_t i = 0; i < a.data->size(); ++i)
        if ((*a.data)[i] != (*b.data)[i]) return false;
    return true;
}

// Miniature models shared by the gradient and invariant checks. All in f64
// so finite differences resolve well below the 1e-4 acceptance threshold.
lm::LMConfig tiny_lm_config() {
    lm::LMConfig c;
    c.vocab_size = 7;
    c.hidden = 8;
    c.n_blocks = 2;
    c.n_heads = 2;
    c.mlp_ratio = 2;
    c.max_len = 8;
    return c;
}

diff::DenoiserConfig tiny_dn_config(int cond_dim) {
    diff::DenoiserConfig c;
    c.in_channels = 2;
    c.img_size = 4;
    c.base_width = 3;
    c.n_down = 1;
    c.cond_dim = cond_dim;
    c.time_dim = 6;
    c.n_steps = 8;
    return c;
}

std::string worst_row(const nn::GradReport& rep) {
    std::string name = "-";
    double worst = -1.0;
    for (const auto& r : rep.rows)
        if (r.max_rel_err > worst) {
            worst = r.max_rel_err;
            name = r.name;
        }
    return name;
}

CheckResult grad_result(const nn::GradReport& rep, double tol) {
    CheckResult r;
    r.pass = rep.all_below(tol);
    r.detail = std::to_string(rep.rows.size()) + " tensors, max rel err " + sci(rep.max_rel_err()) +
               " (" + worst_row(rep) + "), tol " + sci(tol);
    return r;
}

}  // namespace

// --------------------------------------------------------------- oracle

CheckResult check_block_chain_identity(int n_chains) {
    return guarded("block posterior routes agree", [n_chains]() -> CheckResult {
        RandomStream stream{884422u, 1};
        const int Ks[] = {2, 3};
        const int Ds[] = {1, 2, 3};
        const int Ts[] = {1, 2};
        double max_gap = 0.0;
        long long n_queries = 0;
        for (int i = 0; i < n_chains; ++i) {
            const int K = Ks[i % 2];
            const int D = Ds[(i / 2) % 3];
            const int T = Ts[(i / 6) % 2];
            const oracle::DiscreteChain chain = oracle::DiscreteChain::random(K, D, T, stream);
            for (int t = 1; t <= T; ++t)
                for (int d = 1; d <= D; ++d)
                    for (int a = 0; a < K; ++a)
                        for (int b = 0; b < K; ++b) {
                            const auto brute = oracle::posterior_bruteforce_context(chain, t, d, a, b);
                            const auto ratio = oracle::posterior_ratio_context(chain, t, d, a, b);
                            if (brute.size() != ratio.size())
                                throw std::runtime_error("posterior route sizes differ");
                            for (std::size_t j = 0; j < brute.size(); ++j)
                                max_gap = std::max(max_gap, std::abs(brute[j] - ratio[j]));
                            ++n_queries;
                        }
        }
        CheckResult r;
        r.pass = max_gap <= 1e-10;
        r.detail = std::to_string(n_chains) + " chains, " + std::to_string(n_queries) +
                   " queries, max route gap " + sci(max_gap);
        return r;
    });
}

CheckResult check_code_posterior_identity(int n_chains) {
    return guarded("code posterior routes agree", [n_chains]() -> CheckResult {
        RandomStream stream{553311u, 2};
        const int Ks[] = {2, 3};
        const int Ds[] = {1, 2, 3};
        const int Ts[] = {1, 2};
        const int Cs[] = {2, 3};
        double max_sum_gap = 0.0;
        long long n_queries = 0;
        for (int i = 0; i < n_chains; ++i) {
            const int K = Ks[i % 2];
            const int D = Ds[(i / 2) % 3];
            const int T = Ts[(i / 6) % 2];
            const int C = Cs[(i / 12) % 2];
            const oracle::EncDecChain chain = oracle::EncDecChain::random(K, D, T, C, stream);
            for (int t = 1; t <= T; ++t)
                for (int d = 1; d <= D; ++d)
                    for (int a = 0; a < K; ++a)
                        for (int b = 0; b < K; ++b) {
                            // throws if the definitional and Bayes routes drift apart
                            const auto post = oracle::posterior_encdec(chain, t, d, a, b);
                            if (static_cast<int>(post.size()) != C)
                                throw std::runtime_error("posterior has wrong code count");
                            double s = 0.0;
                            for (double p : post) s += p;
                            max_sum_gap = std::max(max_sum_gap, std::abs(s - 1.0));
                            ++n_queries;
                        }
        }
        CheckResult r;
        r.pass = max_sum_gap <= 1e-10;
        r.detail = std::to_string(n_chains) + " chains, " + std::to_string(n_queries) +
                   " queries, routes agree within 1e-10, max mass gap " + sci(max_sum_gap);
        return r;
    });
}

CheckResult check_fixture_posterior() {
    return guarded("posterior matches hand-computed fixture", []() -> CheckResult {
        // Two binary positions, one update step. Independent start:
        // p(pos1 = 0) = 0.6, p(pos2 = 0) = 0.3; sequence index = x1 + 2 * x2.
        oracle::DiscreteChain chain;
        chain.K = 2;
        chain.D = 2;
        chain.T = 1;
        chain.prior = {0.18, 0.12, 0.42, 0.28};
        chain.tables.assign(12, 0.0);
        // position 1 (no context)
        chain.table_at(1, 1, 0, 0, 0) = 0.8;
        chain.table_at(1, 1, 0, 0, 1) = 0.2;
        chain.table_at(1, 1, 0, 1, 0) = 0.3;
        chain.table_at(1, 1, 0, 1, 1) = 0.7;
        // position 2, context = value at position 1
        chain.table_at(1, 2, 0, 0, 0) = 0.9;
        chain.table_at(1, 2, 0, 0, 1) = 0.1;
        chain.table_at(1, 2, 0, 1, 0) = 0.2;
        chain.table_at(1, 2, 0, 1, 1) = 0.8;
        chain.table_at(1, 2, 1, 0, 0) = 0.5;
        chain.table_at(1, 2, 1, 0, 1) = 0.5;
        chain.table_at(1, 2, 1, 1, 0) = 0.7;
        chain.table_at(1, 2, 1, 1, 1) = 0.3;
        chain.validate();

        // By hand: p(ctx, a=0) = (0.18, 0.12); likelihoods (0.1, 0.5);
        // joint (0.018, 0.060); normalized (3/13, 10/13).
        const double expect0 = 3.0 / 13.0;
        const double expect1 = 10.0 / 13.0;
        const auto brute = oracle::posterior_bruteforce_context(chain, 1, 2, 0, 1);
        const auto ratio = oracle::posterior_ratio_context(chain, 1, 2, 0, 1);
        double gap = 0.0;
        if (brute.size() != 2 || ratio.size() != 2) throw std::runtime_error("unexpected context count");
        gap = std::max(gap, std::abs(brute[0] - expect0));
        gap = std::max(gap, std::abs(brute[1] - expect1));
        gap = std::max(gap, std::abs(ratio[0] - expect0));
        gap = std::max(gap, std::abs(ratio[1] - expect1));
        CheckResult r;
        r.pass = gap <= 1e-12;
        r.detail = "got (" + sci(brute[0]) + ", " + sci(brute[1]) + "), want (3/13, 10/13), gap " + sci(gap);
        return r;
    });
}

CheckResult check_independent_context_posterior() {
    return guarded("independent prior collapses posterior", []() -> CheckResult {
        // When positions start independent and the update at position 2
        // ignores its context, observing that update tells us nothing:
        // the posterior must equal the marginal prior of position 1.
        oracle::DiscreteChain chain;
        chain.K = 2;
        chain.D = 2;
        chain.T = 1;
        const double p1[] = {0.7, 0.3};
        const double p2[] = {0.45, 0.55};
        chain.prior = {p1[0] * p2[0], p1[1] * p2[0], p1[0] * p2[1], p1[1] * p2[1]};
        chain.tables.assign(12, 0.0);
        chain.table_at(1, 1, 0, 0, 0) = 0.6;
        chain.table_at(1, 1, 0, 0, 1) = 0.4;
        chain.table_at(1, 1, 0, 1, 0) = 0.1;
        chain.table_at(1, 1, 0, 1, 1) = 0.9;
        for (std::size_t ctx = 0; ctx < 2; ++ctx) {
            chain.table_at(1, 2, ctx, 0, 0) = 0.6;
            chain.table_at(1, 2, ctx, 0, 1) = 0.4;
            chain.table_at(1, 2, ctx, 1, 0) = 0.25;
            chain.table_at(1, 2, ctx, 1, 1) = 0.75;
        }
        chain.validate();
        double gap = 0.0;
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
                const auto post = oracle::posterior_bruteforce_context(chain, 1, 2, a, b);
                gap = std::max(gap, std::abs(post[0] - p1[0]));
                gap = std::max(gap, std::abs(post[1] - p1[1]));
            }
        CheckResult r;
        r.pass = gap <= 1e-12;
        r.detail = "max gap to marginal prior " + sci(gap) + " over 4 evidence pairs";
        return r;
    });
}

CheckResult check_langevin_moments() {
    return guarded("langevin recovers normal moments", []() -> CheckResult {
        RandomStream stream{777001u, 3};
        const auto stats = oracle::langevin_1d([](double c) { return -c; }, 0.01, 100000, stream, 0.0, 2000);
        CheckResult r;
        r.pass = std::abs(stats.mean) <= 0.05 && std::abs(stats.var - 1.0) <= 0.1;
        r.detail = "mean " + sci(stats.mean) + " (|.| <= 0.05), var " + sci(stats.var) + " (within 0.1 of 1)";
        return r;
    });
}

// ----------------------------------------------------------------- grad

CheckResult check_lm_gradients() {
    return guarded("lm gradients match finite differences", []() -> CheckResult {
        RandomStream init{5101u, 1};
        lm::LangModel<double> model(tiny_lm_config(), init, true);
        const std::vector<lm::TokenSequence> batch = {{{1, 4, 5, 6, 2}}, {{1, 3, 2}}};
        const auto rep = nn::grad_check<double>([&] { return model.lm_loss(batch); }, model.params, 1e-5);
        return grad_result(rep, 1e-4);
    });
}

CheckResult check_denoiser_gradients() {
    return guarded("denoiser gradients match finite differences", []() -> CheckResult {
        RandomStream init{5202u, 1};
        diff::DenoiserNet<double> net(tiny_dn_config(5), init, true);
        RandomStream data{5203u, 1};
        const Tensor<double> z = nn::gaussian_sample<double>(data, {2, 4, 4});
        const Tensor<double> cond = nn::gaussian_sample<double>(data, {1, 5});
        const Tensor<double> target = nn::gaussian_sample<double>(data, {2, 4, 4});
        const auto rep = nn::grad_check<double>([&] { return nn::mse(net.forward(z, 3, cond), target); },
                                                net.params, 1e-5);
        return grad_result(rep, 1e-4);
    });
}

CheckResult check_adapter_gradients() {
    return guarded("adapter gradients match finite differences", []() -> CheckResult {
        RandomStream init{5303u, 1};
        const diff::DenoiserNet<double> net(tiny_dn_config(5), init, false);
        RandomStream astream{5304u, 1};
        ad::AdapterState<double> state = ad::init_adapter<double>(net, 5, 0.3, astream);
        nn::ParamStore<double> store;
        state.register_params(store);
        RandomStream data{5305u, 2};
        const Tensor<double> q = nn::gaussian_sample<double>(data, {3, net.site_channels("mid")});
        const Tensor<double> c = nn::gaussian_sample<double>(data, {2, 5});
        const auto rep = nn::grad_check<double>(
            [&] { return nn::sum_all(ad::adapter_forward(q, c, state.layer("mid"))); }, store, 1e-5);
        return grad_result(rep, 1e-4);
    });
}

CheckResult check_encoding_pipeline_gradients() {
    return guarded("encoding-to-loss gradients match", []() -> CheckResult {
        const lm::LMConfig lc = tiny_lm_config();
        RandomStream lminit{5404u, 1};
        const lm::LangModel<double> lmod(lc, lminit, false);  // frozen
        const diff::DenoiserConfig dc = tiny_dn_config(5);
        RandomStream dninit{5405u, 1};
        const diff::DenoiserNet<double> net(dc, dninit, false);  // frozen
        RandomStream ainit{5406u, 1};
        ad::AdapterState<double> adapter = ad::init_adapter<double>(net, lc.hidden, 0.3, ainit);
        enc::ScoreParams<double> score = enc::ScoreParams<double>::init(lc.n_blocks, true);
        nn::ParamStore<double> store;
        adapter.register_params(store);
        store.add("score.g", score.g);
        store.add("score.eta", score.eta);

        // Move off the near-identity init to a generic operating point:
        // at init the fresh-branch gradients are ~1e-9, too small for
        // finite differences to resolve. Scalars stay clearly nonzero so
        // every branch carries signal.
        RandomStream rnd{5408u, 7};
        for (auto& entry : store.entries()) {
            const bool scalar_weight = entry.tensor.numel() <= 2;
            for (auto& v : *entry.tensor.data)
                v = scalar_weight ? 0.7 + 0.25 * rnd.next_normal() : 0.5 * rnd.next_normal();
        }

        const lm::TokenSequence tokens{{1, 4, 2}};
        const diff::NoiseSchedule sched = diff::make_schedule(dc.n_steps, dc.beta_start, dc.beta_end);
        RandomStream zstream{5407u, 1};
        const Tensor<double> z0 = nn::gaussian_sample<double>(zstream, {dc.in_channels, dc.img_size, dc.img_size});

        auto loss_fn = [&]() {
            RandomStream estream{6001u, 9};
            const enc::TextEncoding<double> e = enc::extract_encoding(tokens, lmod, score, estream);
            RandomStream dstream{6002u, 4};
            return diff::denoise_loss(net, sched, z0, ad::adapter_site_fn(adapter, e.c), dstream);
        };
        // wider step than the shallow checks: the longer computation leaves
        // ~2 ulp of rounding noise on the loss, which 1e-4 keeps far below
        // the analytic gradients while truncation stays ~1e-6
        const auto rep = nn::grad_check<double>(loss_fn, store, 1e-4);
        return grad_result(rep, 1e-4);
    });
}

CheckResult check_eval_model_gradients() {
    return guarded("eval model gradients match finite differences", []() -> CheckResult {
        eval::EvalNetConfig ec;
        ec.img_size = 8;
        ec.width1 = 2;
        ec.width2 = 3;
        ec.emb_dim = 6;
        ec.vocab_size = 10;
        RandomStream minit{5507u, 1};
        eval::MetricModel<double> metric(ec, minit, true);
        RandomStream data{5508u, 1};
        const std::vector<Tensor<double>> imgs = {nn::gaussian_sample<double>(data, {3, 8, 8}),
                                                  nn::gaussian_sample<double>(data, {3, 8, 8})};
        const std::vector<std::vector<int>> ids = {{1, 4, 5, 2}, {1, 6, 2}};
        const auto rep1 =
            nn::grad_check<double>([&] { return metric.contrastive_loss(imgs, ids); }, metric.params, 1e-5);

        RandomStream cinit{5509u, 1};
        eval::AttributeClassifier<double> clf(ec, cinit, true);
        corpus::CaptionTruth truth;
        truth.count = 2;
        truth.colors[0] = truth.colors[2] = true;
        truth.shapes[1] = true;
        truth.relations[3] = true;
        const auto rep2 = nn::grad_check<double>([&] { return clf.loss(imgs[0], truth); }, clf.params, 1e-5);

        const double worst = std::max(rep1.max_rel_err(), rep2.max_rel_err());
        CheckResult r;
        r.pass = rep1.all_below(1e-4) && rep2.all_below(1e-4);
        r.detail = std::to_string(rep1.rows.size() + rep2.rows.size()) + " tensors over two models, max rel err " +
                   sci(worst) + ", tol 1.000e-04";
        return r;
    });
}

// ----------------------------------------------------------- invariants

CheckResult check_residual_telescoping() {
    return guarded("residual stream telescopes exactly", []() -> CheckResult {
        const lm::LMConfig cfg = tiny_lm_config();
        RandomStream init{5601u, 1};
        const lm::LangModel<double> model(cfg, init, false);
        const lm::TokenSequence tokens{{1, 4, 3, 5, 2}};
        const lm::BlockTrace<double> trace = model.forward_trace(tokens, lm::MaskMode::causal);
        if (!bitwise_equal(trace.states[cfg.n_blocks], model.embed(tokens)))
            return {"", false, "top state is not the embedding"};
        Tensor<double> acc = model.embed(tokens);
        for (int t = cfg.n_blocks; t >= 1; --t) acc = nn::add(acc, trace.deltas[t]);
        const bool ok = bitwise_equal(acc, trace.states[0]);
        return {"", ok,
                ok ? "replayed per-block deltas land bit-exactly on the final state"
                   : "replayed delta sum disagrees with the final state"};
    });
}

CheckResult check_degenerate_extraction() {
    return guarded("zero-weight encoding equals embedding", []() -> CheckResult {
        const lm::LMConfig cfg = tiny_lm_config();
        RandomStream init{5602u, 1};
        const lm::LangModel<double> model(cfg, init, false);

        // all per-block weights zero: noise and deltas drop out exactly
        const lm::TokenSequence tokens{{1, 4, 6, 2}};
        enc::ScoreParams<double> zero;
        zero.g = Tensor<double>::zeros({cfg.n_blocks}, false);
        zero.eta = Tensor<double>::zeros({cfg.n_blocks}, false);
        RandomStream s1{91u, 1};
        const auto e1 = enc::extract_encoding(tokens, model, zero, s1);
        if (!bitwise_equal(e1.c, model.embed(tokens)))
            return {"", false, "zero-weight encoding differs from the embedding"};

        // single-position sequence: causal and self-only traces coincide, so
        // the deterministic encoding equals the embedding for any weights
        const lm::TokenSequence single{{1}};
        enc::ScoreParams<double> rnd;
        RandomStream gs{92u, 1};
        rnd.g = nn::randn_scaled<double>(gs, {cfg.n_blocks}, 1.0, false);
        rnd.eta = Tensor<double>::zeros({cfg.n_blocks}, false);
        RandomStream s2{93u, 1};
        const auto e2 = enc::extract_encoding(single, model, rnd, s2);
        const bool ok = bitwise_equal(e2.c, model.embed(single));
        return {"", ok,
                ok ? "both degenerate forms reproduce the embedding bit-exactly"
                   : "single-position encoding differs from the embedding"};
    });
}

CheckResult check_straight_line_agreement() {
    return guarded("straight-line encoding agreement", []() -> CheckResult {
        const lm::LMConfig cfg = tiny_lm_config();
        RandomStream init{5603u, 1};
        const lm::LangModel<double> model(cfg, init, false);
        const lm::TokenSequence tokens{{1, 5, 4, 6, 3, 2}};
        enc::ScoreParams<double> score;
        RandomStream gs{94u, 1};
        score.g = nn::randn_scaled<double>(gs, {cfg.n_blocks}, 1.0, false);
        score.eta = Tensor<double>::zeros({cfg.n_blocks}, false);
        RandomStream s1{95u, 1};
        const auto e = enc::extract_encoding(tokens, model, score, s1);

        // independent re-derivation, accumulated per element in a scalar
        const auto causal = model.forward_trace(tokens, lm::MaskMode::causal);
        const auto self = model.forward_trace(tokens, lm::MaskMode::self_only);
        const Tensor<double>& top = causal.states[cfg.n_blocks];
        double gap = 0.0;
        for (std::size_t i = 0; i < top.data->size(); ++i) {
            double acc = (*top.data)[i];
            for (int t = cfg.n_blocks; t >= 1; --t)
                acc += (*score.g.data)[t - 1] * ((*causal.deltas[t].data)[i] - (*self.deltas[t].data)[i]);
            gap = std::max(gap, rel_gap(acc, (*e.c.data)[i]));
        }
        CheckResult r;
        r.pass = gap <= 1e-6;
        r.detail = "max relative gap to scalar replay " + sci(gap) + ", tol 1.000e-06";
        return r;
    });
}

CheckResult check_prefix_stability() {
    return guarded("appended tokens leave prefix intact", []() -> CheckResult {
        const lm::LMConfig cfg = tiny_lm_config();
        RandomStream init{5604u, 1};
        const lm::LangModel<double> model(cfg, init, false);
        const lm::TokenSequence shorter{{1, 5, 4, 2}};
        const lm::TokenSequence longer{{1, 5, 4, 2, 6, 3, 2}};
        const std::size_t n = shorter.ids.size();
        const std::size_t h = static_cast<std::size_t>(cfg.hidden);

        auto prefix_rows_equal = [&](const Tensor<double>& a, const Tensor<double>& b) {
            for (std::size_t i = 0; i < n * h; ++i)
                if ((*a.data)[i] != (*b.data)[i]) return false;
            return true;
        };

        const auto ta = model.forward_trace(shorter, lm::MaskMode::causal);
        const auto tb = model.forward_trace(longer, lm::MaskMode::causal);
        for (int t = 0; t <= cfg.n_blocks; ++t)
            if (!prefix_rows_equal(ta.states[t], tb.states[t]))
                return {"", false, "state rows change at block step " + std::to_string(t)};
        for (int t = 1; t <= cfg.n_blocks; ++t)
            if (!prefix_rows_equal(ta.deltas[t], tb.deltas[t]))
                return {"", false, "delta rows change at block step " + std::to_string(t)};

        enc::ScoreParams<double> score;
        RandomStream gs{96u, 1};
        score.g = nn::randn_scaled<double>(gs, {cfg.n_blocks}, 1.0, false);
        score.eta = Tensor<double>::zeros({cfg.n_blocks}, false);
        RandomStream s1{97u, 1};
        RandomStream s2{97u, 1};
        const auto ea = enc::extract_encoding(shorter, model, score, s1);
        const auto eb = enc::extract_encoding(longer, model, score, s2);
        const bool ok = prefix_rows_equal(ea.c, eb.c);
        return {"", ok,
                ok ? "states, deltas and deterministic encodings are bit-stable over the prefix"
                   : "encoding rows change when a suffix is appended"};
    });
}

CheckResult check_adapter_preservation() {
    return guarded("silent new branch preserves frozen attention", []() -> CheckResult {
        nn::NoGradGuard guard;
        RandomStream init{5605u, 1};
        const diff::DenoiserNet<double> net(tiny_dn_config(5), init, false);
        RandomStream astream{5606u, 1};
        const ad::AdapterState<double> state = ad::init_adapter<double>(net, 5, 0.0, astream);
        RandomStream data{5607u, 3};
        double gap = 0.0;
        int n_inputs = 0;
        for (int trial = 0; trial < 34; ++trial)
            for (const std::string& site : net.site_names()) {
                const int ch = net.site_channels(site);
                const int rows = 1 + static_cast<int>(data.next_below(5));
                const int nc = 1 + static_cast<int>(data.next_below(4));
                const Tensor<double> q = nn::gaussian_sample<double>(data, {rows, ch});
                const Tensor<double> c = nn::gaussian_sample<double>(data, {nc, 5});
                const auto& layer = state.layer(site);
                const Tensor<double> out = ad::adapter_forward(q, c, layer);
                const Tensor<double> ref = net.site_attention(site, q, nn::matmul(c, layer.phi));
                gap = std::max(gap, max_rel_gap(out, ref));
                ++n_inputs;
            }
        CheckResult r;
        r.pass = gap <= 1e-6;
        r.detail = std::to_string(n_inputs) + " random inputs, max relative gap " + sci(gap) + ", tol 1.000e-06";
        return r;
    });
}

CheckResult check_weight_reparameterization() {
    return guarded("branch weight reparameterization is neutral", []() -> CheckResult {
        nn::NoGradGuard guard;
        RandomStream init{5608u, 1};
        const diff::DenoiserNet<double> net(tiny_dn_config(5), init, false);
        RandomStream astream{5609u, 1};
        ad::AdapterState<double> state = ad::init_adapter<double>(net, 5, 0.37, astream);
        RandomStream data{5610u, 1};
        const int ch = net.site_channels("mid");
        const Tensor<double> q = nn::gaussian_sample<double>(data, {4, ch});
        const Tensor<double> c = nn::gaussian_sample<double>(data, {3, 5});
        auto mid = std::find_if(state.layers.begin(), state.layers.end(),
                                [](const auto& l) { return l.site == "mid"; });
        if (mid == state.layers.end()) return {"", false, "no mid site"};
        ad::AdapterLayerState<double>& layer = *mid;
        const Tensor<double> before = ad::adapter_forward(q, c, layer);
        // shift log-scale into the exponent: (a, b) -> (a * e^d, b - d)
        (*layer.a2.data)[0] *= std::exp(0.3);
        (*layer.b2.data)[0] -= 0.3;
        (*layer.a1.data)[0] *= std::exp(-0.2);
        (*layer.b1.data)[0] += 0.2;
        const Tensor<double> after = ad::adapter_forward(q, c, layer);
        const double gap = max_rel_gap(before, after);
        CheckResult r;
        r.pass = gap <= 1e-12;
        r.detail = "max relative drift " + sci(gap) + " after opposing scale/shift moves, tol 1.000e-12";
        return r;
    });
}

CheckResult check_attention_simplex() {
    return guarded("attention rows form a simplex", []() -> CheckResult {
        RandomStream data{5611u, 1};
        const Tensor<double> x = nn::gaussian_sample<double>(data, {6, 6});
        const Tensor<double> wc = nn::masked_softmax_rows(x, nn::BoolMask::causal(6));
        double sum_gap = 0.0;
        for (int i = 0; i < 6; ++i) {
            double s = 0.0;
            for (int j = 0; j < 6; ++j) {
                const double w = (*wc.data)[static_cast<std::size_t>(i) * 6 + j];
                if (j > i && w != 0.0) return {"", false, "future position receives nonzero weight"};
                if (j <= i && !(w > 0.0)) return {"", false, "visible position receives nonpositive weight"};
                s += w;
            }
            sum_gap = std::max(sum_gap, std::abs(s - 1.0));
        }
        const Tensor<double> ws = nn::masked_softmax_rows(x, nn::BoolMask::self_only(6));
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) {
                const double w = (*ws.data)[static_cast<std::size_t>(i) * 6 + j];
                if (i == j && w != 1.0) return {"", false, "self-only weight is not exactly one"};
                if (i != j && w != 0.0) return {"", false, "self-only mask leaks across positions"};
            }
        CheckResult r;
        r.pass = sum_gap <= 1e-12;
        r.detail = "masked entries exactly zero, row sums within " + sci(sum_gap) + " of 1";
        return r;
    });
}

CheckResult check_stream_reproducibility() {
    return guarded("random streams reproduce and distribute", []() -> CheckResult {
        RandomStream a{123456789u, 42};
        RandomStream b{123456789u, 42};
        for (int i = 0; i < 1000; ++i)
            if (a.next_normal() != b.next_normal()) return {"", false, "identical streams diverge"};
        RandomStream base{9001u, 5};
        RandomStream f1 = base.fork("alpha");
        RandomStream f2 = base.fork("alpha");
        RandomStream f3 = base.fork("beta");
        bool differs = false;
        for (int i = 0; i < 100; ++i) {
            const double v1 = f1.next_normal();
            if (v1 != f2.next_normal()) return {"", false, "same-label forks diverge"};
            if (v1 != f3.next_normal()) differs = true;
        }
        if (!differs) return {"", false, "different-label forks coincide"};

        RandomStream m{20260815u, 0};
        double sum = 0.0, sumsq = 0.0;
        const int n = 100000;
        for (int i = 0; i < n; ++i) {
            const double v = m.next_normal();
            sum += v;
            sumsq += v * v;
        }
        const double mean = sum / n;
        const double var = sumsq / n - mean * mean;
        CheckResult r;
        r.pass = std::abs(mean) <= 0.02 && std::abs(var - 1.0) <= 0.03;
        r.detail = "forks behave; 1e5 draws: mean " + sci(mean) + ", var " + sci(var);
        return r;
    });
}

CheckResult check_schedule_sanity() {
    return guarded("noise schedule is monotone and bounded", []() -> CheckResult {
        const diff::NoiseSchedule sched = diff::make_schedule(200, 1e-4, 0.02);
        if (static_cast<int>(sched.betas.size()) != 200) return {"", false, "wrong number of steps"};
        for (std::size_t i = 0; i < sched.betas.size(); ++i) {
            if (!(sched.betas[i] > 0.0 && sched.betas[i] < 1.0))
                return {"", false, "step variance leaves (0, 1)"};
            if (i > 0 && sched.betas[i] < sched.betas[i - 1])
                return {"", false, "step variances are not increasing"};
            if (!(sched.alphas_bar[i] > 0.0 && sched.alphas_bar[i] < 1.0))
                return {"", false, "cumulative signal leaves (0, 1)"};
            if (i > 0 && sched.alphas_bar[i] >= sched.alphas_bar[i - 1])
                return {"", false, "cumulative signal is not strictly decreasing"};
        }
        // mixing identity at a fixed step: all-ones input and noise
        const int t = 57;
        const Tensor<double> z0 = Tensor<double>::full({1, 2, 2}, 1.0);
        const Tensor<double> eps = Tensor<double>::full({1, 2, 2}, 1.0);
        const Tensor<double> zt = diff::q_sample(z0, t, eps, sched);
        const double want = std::sqrt(sched.alphas_bar[t]) + std::sqrt(1.0 - sched.alphas_bar[t]);
        double gap = 0.0;
        for (double v : *zt.data) gap = std::max(gap, std::abs(v - want));
        CheckResult r;
        r.pass = gap <= 1e-12;
        r.detail = "200 steps monotone; mixing identity gap " + sci(gap);
        return r;
    });
}

// ------------------------------------------------------------------ run

std::vector<CheckResult> run_suite(const std::string& suite) {
    const bool all = suite == "all";
    std::vector<CheckResult> out;
    if (all || suite == "oracle") {
        out.push_back(check_block_chain_identity());
        out.push_back(check_code_posterior_identity());
        out.push_back(check_fixture_posterior());
        out.push_back(check_independent_context_posterior());
        out.push_back(check_langevin_moments());
    }
    if (all || suite == "grad") {
        out.push_back(check_lm_gradients());
        out.push_back(check_denoiser_gradients());
        out.push_back(check_adapter_gradients());
        out.push_back(check_encoding_pipeline_gradients());
        out.push_back(check_eval_model_gradients());
    }
    if (all || suite == "invariants") {
        out.push_back(check_residual_telescoping());
        out.push_back(check_degenerate_extraction());
        out.push_back(check_straight_line_agreement());
        out.push_back(check_prefix_stability());
        out.push_back(check_adapter_preservation());
        out.push_back(check_weight_reparameterization());
        out.push_back(check_attention_simplex());
        out.push_back(check_stream_reproducibility());
        out.push_back(check_schedule_sanity());
    }
    if (out.empty())
        throw std::runtime_error("unknown verify suite '" + suite +
                                 "' (expected oracle, grad, invariants, or all)");
    return out;
}

int print_results(const std::vector<CheckResult>& results) {
    int failed = 0;
    std::printf("%-46s %-6s %s\n", "check", "result", "detail");
    std::printf("%-46s %-6s %s\n", "---------------------------------------------", "------",
                "--------------------------------");
    for (const auto& r : results) {
        std::printf("%-46s %-6s %s\n", r.name.c_str(), r.pass ? "pass" : "FAIL", r.detail.c_str());
        if (!r.pass) ++failed;
    }
    std::printf("%zu checks, %d failed\n", results.size(), failed);
    return failed;
}

}  // namespace lmdiff::verify
