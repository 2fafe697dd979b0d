// Self-contained correctness checks runnable from the CLI: exact oracle
// identities, finite-difference gradient audits of every model family, and
// the structural invariants the encoding/adapter design depends on. Each
// check builds its own miniature models and returns pass/fail plus detail.
#pragma once

#include <string>
#include <vector>

namespace lmdiff::verify {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// oracle suite: enumeration-based probability identities + the 1-D sampler
CheckResult check_block_chain_identity(int n_chains = 100);
CheckResult check_code_posterior_identity(int n_chains = 100);
CheckResult check_fixture_posterior();
CheckResult check_independent_context_posterior();
CheckResult check_langevin_moments();

// grad suite: f64 miniatures vs central differences
CheckResult check_lm_gradients();
CheckResult check_denoiser_gradients();
CheckResult check_adapter_gradients();
CheckResult check_encoding_pipeline_gradients();
CheckResult check_eval_model_gradients();

// invariants suite: exact structural properties
CheckResult check_residual_telescoping();
CheckResult check_degenerate_extraction();
CheckResult check_straight_line_agreement();
CheckResult check_prefix_stability();
CheckResult check_adapter_preservation();
CheckResult check_weight_reparameterization();
CheckResult check_attention_simplex();
CheckResult check_stream_reproducibility();
CheckResult check_schedule_sanity();

// suite is one of "oracle", "grad", "invariants", "all"
std::vector<CheckResult> run_suite(const std::string& suite);

// prints one table row per result plus a summary; returns the failure count
int print_results(const std::vector<CheckResult>& results);

}  // namespace lmdiff::verify
