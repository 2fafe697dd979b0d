// Command-line front end. Subcommands cover the whole workflow: dataset
// generation, the three training phases (language model, conditional
// diffusion baseline, adapter), the evaluation-model trainers, sampling,
// evaluation, the adapter scale report, and the self-check suites.
#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "lmdiff/config.hpp"
#include "lmdiff/pipeline.hpp"
#include "lmdiff/verify.hpp"

namespace {

lmdiff::cfg::RunConfig load_config(const std::string& path) {
    if (path.empty()) return {};
    return lmdiff::cfg::RunConfig::from_file(path);
}

}  // namespace

int main(int argc, char** argv) {
    using namespace lmdiff;

    CLI::App app{"lmdiff: text-conditioned image diffusion driven by a causal language model's per-block residual updates"};
    app.require_subcommand(1);

    std::string cfg_path;
    std::string out;
    std::string data_dir;
    std::string ckpt;
    std::string lm_ckpt;
    std::string base_ckpt;
    std::string metric_ckpt;
    std::string clf_ckpt;
    std::string testset;
    std::string prompt;
    std::string mode;
    std::string suite = "all";
    std::uint64_t seed = 0;
    double guidance = 0.0;
    int n_scenes = -1;
    bool force = false;
    bool resume = false;
    int rc = 0;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a scene/caption/image dataset");
    gen->add_option("--config", cfg_path, "run config JSON (built-in defaults when omitted)");
    gen->add_option("--out", out, "output directory")->required();
    gen->add_option("--n", n_scenes, "number of scenes (default: data.n_scenes)");
    gen->add_flag("--force", force, "overwrite a non-empty output directory");
    gen->callback([&] {
        const cfg::RunConfig c = load_config(cfg_path);
        pipe::cmd_gen_data(c, out, n_scenes < 0 ? c.data.n_scenes : n_scenes, force);
    });

    CLI::App* tlm = app.add_subcommand("train-lm", "train the caption language model");
    tlm->add_option("--config", cfg_path, "run config JSON");
    tlm->add_option("--data", data_dir, "dataset directory from gen-data")->required();
    tlm->add_option("--out", out, "run directory")->required();
    tlm->add_flag("--force", force, "overwrite a non-empty run directory");
    tlm->add_flag("--resume", resume, "continue from the checkpoint in the run directory");
    tlm->callback([&] { pipe::cmd_train_lm(load_config(cfg_path), data_dir, out, force, resume); });

    CLI::App* tbase = app.add_subcommand("train-base", "train the diffusion model with the mean-pooled text embedding");
    tbase->add_option("--config", cfg_path, "run config JSON");
    tbase->add_option("--data", data_dir, "dataset directory from gen-data")->required();
    tbase->add_option("--out", out, "run directory")->required();
    tbase->add_flag("--force", force, "overwrite a non-empty run directory");
    tbase->add_flag("--resume", resume, "continue from the checkpoint in the run directory");
    tbase->callback([&] { pipe::cmd_train_base(load_config(cfg_path), data_dir, out, force, resume); });

    CLI::App* tad = app.add_subcommand("train-adapter",
                                       "train the cross-attention adapter on frozen language and diffusion models");
    tad->add_option("--config", cfg_path, "run config JSON");
    tad->add_option("--data", data_dir, "dataset directory from gen-data")->required();
    tad->add_option("--lm-ckpt", lm_ckpt, "checkpoint from train-lm")->required();
    tad->add_option("--base-ckpt", base_ckpt, "checkpoint from train-base")->required();
    tad->add_option("--out", out, "run directory")->required();
    tad->add_flag("--force", force, "overwrite a non-empty run directory");
    tad->add_flag("--resume", resume, "continue from the checkpoint in the run directory");
    tad->callback(
        [&] { pipe::cmd_train_adapter(load_config(cfg_path), data_dir, lm_ckpt, base_ckpt, out, force, resume); });

    CLI::App* tmet = app.add_subcommand("train-metric", "train the image/text agreement metric");
    tmet->add_option("--config", cfg_path, "run config JSON");
    tmet->add_option("--data", data_dir, "dataset directory from gen-data")->required();
    tmet->add_option("--out", out, "run directory")->required();
    tmet->add_flag("--force", force, "overwrite a non-empty run directory");
    tmet->callback([&] { pipe::cmd_train_metric(load_config(cfg_path), data_dir, out, force); });

    CLI::App* tclf = app.add_subcommand("train-clf", "train the scene attribute classifier");
    tclf->add_option("--config", cfg_path, "run config JSON");
    tclf->add_option("--data", data_dir, "dataset directory from gen-data")->required();
    tclf->add_option("--out", out, "run directory")->required();
    tclf->add_flag("--force", force, "overwrite a non-empty run directory");
    tclf->callback([&] { pipe::cmd_train_clf(load_config(cfg_path), data_dir, out, force); });

    CLI::App* smp = app.add_subcommand("sample", "generate one image from a caption");
    smp->add_option("--ckpt", ckpt, "generation checkpoint (train-base or train-adapter)")->required();
    smp->add_option("--prompt", prompt, "caption text")->required();
    smp->add_option("--seed", seed, "sampling seed")->required();
    smp->add_option("--out", out, "output PPM path")->required();
    smp->add_option("--mode", mode, "baseline or adapter (default: whatever the checkpoint holds)");
    smp->add_option("--guidance", guidance, "classifier-free guidance weight (default 0)");
    smp->callback([&] { pipe::cmd_sample(ckpt, prompt, seed, out, mode, guidance); });

    CLI::App* ev = app.add_subcommand("eval", "score a generation checkpoint against a held-out caption set");
    ev->add_option("--config", cfg_path, "run config JSON");
    ev->add_option("--ckpt", ckpt, "generation checkpoint")->required();
    ev->add_option("--testset", testset, "held-out dataset directory")->required();
    ev->add_option("--metric-ckpt", metric_ckpt, "checkpoint from train-metric")->required();
    ev->add_option("--clf-ckpt", clf_ckpt, "checkpoint from train-clf")->required();
    ev->add_option("--out", out, "report JSON path")->required();
    ev->callback([&] { pipe::cmd_eval(load_config(cfg_path), ckpt, testset, metric_ckpt, clf_ckpt, out); });

    CLI::App* rs = app.add_subcommand("report-scales", "print per-site attention branch scales of an adapter checkpoint");
    rs->add_option("--ckpt", ckpt, "adapter checkpoint")->required();
    rs->add_option("--out", out, "CSV path ('-' or omitted: stdout)");
    rs->callback([&] { pipe::cmd_report_scales(ckpt, out); });

    CLI::App* ver = app.add_subcommand("verify", "run self-checks (probability identities, gradients, invariants)");
    ver->add_option("--suite", suite, "oracle, grad, invariants, or all (default all)");
    ver->callback([&] {
        const int failed = verify::print_results(verify::run_suite(suite));
        if (failed > 0) rc = 1;
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return rc;
}
