// End-to-end tests of the command-line binary: argument validation, run
// directory guards, resume determinism, sampling reproducibility, and the
// evaluation prerequisites. Everything runs on a tiny throwaway workspace
// so the whole suite stays in the seconds range.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

#ifndef LMDIFF_BIN
#error "LMDIFF_BIN must point at the built binary"
#endif

namespace fs = std::filesystem;

namespace {

// run the binary with `args`, capturing stdout+stderr; returns the exit code
int run_cli(const std::string& args, const std::string& log_path) {
    const std::string cmd = std::string(LMDIFF_BIN) + " " + args + " > " + log_path + " 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct Workspace {
    fs::path root;
    fs::path log;           // scratch capture file, reused between calls
    fs::path cfg_full;      // 12 language-model steps
    fs::path cfg_short;     // 6 language-model steps, otherwise identical
    fs::path data;          // 60-scene dataset
    fs::path run_lm_full;   // train-lm, 12 steps in one go
    fs::path run_lm_split;  // train-lm, 6 steps then resumed to 12
    fs::path run_base;      // train-base
    int rc_gen = -1, rc_lm_full = -1, rc_lm_short = -1, rc_lm_resume = -1, rc_base = -1;
};

const char* kTinyBody = R"({
    "data": {"n_scenes": 60},
    "lm": {"hidden": 16, "n_blocks": 2, "n_heads": 2, "mlp_ratio": 2, "steps": %STEPS%,
           "batch_size": 4, "log_every": 6},
    "diffusion": {"base_width": 8, "n_down": 1, "cond_dim": 12, "time_dim": 8, "n_steps": 8,
                  "steps": 6, "batch_size": 2, "log_every": 3},
    "adapter": {"steps": 4, "batch_size": 2, "log_every": 2},
    "eval": {"emb_dim": 8, "width1": 4, "width2": 6, "metric_steps": 4, "clf_steps": 4,
             "metric_batch": 2, "clf_batch": 2, "images_per_caption": 1, "log_every": 2}
})";

void write_config(const fs::path& path, int lm_steps) {
    std::string body = kTinyBody;
    body.replace(body.find("%STEPS%"), 7, std::to_string(lm_steps));
    std::ofstream f(path);
    f << body;
}

// The expensive setup (dataset + three small training runs) happens once,
// lazily, and is shared by every test case below.
const Workspace& ws() {
    static Workspace w = [] {
        Workspace s;
        s.root = fs::temp_directory_path() / "lmdiff_cli_test";
        fs::remove_all(s.root);
        fs::create_directories(s.root);
        s.log = s.root / "cli.log";
        s.cfg_full = s.root / "cfg_full.json";
        s.cfg_short = s.root / "cfg_short.json";
        write_config(s.cfg_full, 12);
        write_config(s.cfg_short, 6);
        s.data = s.root / "data";
        s.run_lm_full = s.root / "run_lm_full";
        s.run_lm_split = s.root / "run_lm_split";
        s.run_base = s.root / "run_base";

        s.rc_gen = run_cli("gen-data --config " + s.cfg_full.string() + " --out " + s.data.string(),
                           s.log.string());
        s.rc_lm_full = run_cli("train-lm --config " + s.cfg_full.string() + " --data " + s.data.string() +
                                   " --out " + s.run_lm_full.string(),
                               s.log.string());
        s.rc_lm_short = run_cli("train-lm --config " + s.cfg_short.string() + " --data " + s.data.string() +
                                    " --out " + s.run_lm_split.string(),
                                s.log.string());
        s.rc_lm_resume = run_cli("train-lm --config " + s.cfg_full.string() + " --data " + s.data.string() +
                                     " --out " + s.run_lm_split.string() + " --resume",
                                 s.log.string());
        s.rc_base = run_cli("train-base --config " + s.cfg_full.string() + " --data " + s.data.string() +
                                " --out " + s.run_base.string(),
                            s.log.string());
        return s;
    }();
    return w;
}

}  // namespace

TEST_CASE("invocation errors exit nonzero") {
    const auto& w = ws();
    CHECK(run_cli("", w.log.string()) != 0);                       // no subcommand
    CHECK(run_cli("gen-data", w.log.string()) != 0);               // missing --out
    CHECK(run_cli("no-such-command", w.log.string()) != 0);
    CHECK(run_cli("--help", w.log.string()) == 0);
    CHECK(run_cli("verify --suite bogus", w.log.string()) != 0);
}

TEST_CASE("self-check suites run clean through the CLI") {
    const auto& w = ws();
    CHECK(run_cli("verify --suite oracle", w.log.string()) == 0);
    const std::string out = slurp(w.log);
    CHECK(out.find("0 failed") != std::string::npos);
}

TEST_CASE("gen-data writes a dataset and respects the run-directory guard") {
    const auto& w = ws();
    REQUIRE(w.rc_gen == 0);
    CHECK(fs::exists(w.data / "scenes.jsonl"));
    CHECK(fs::exists(w.data / "config.resolved.json"));

    // a second run into the same directory must refuse without --force
    CHECK(run_cli("gen-data --config " + w.cfg_full.string() + " --out " + w.data.string(), w.log.string()) != 0);
    CHECK(slurp(w.log).find("--force") != std::string::npos);

    // identical config + seed: --force rerun reproduces the dataset bytes
    const std::string before = slurp(w.data / "scenes.jsonl");
    CHECK(run_cli("gen-data --config " + w.cfg_full.string() + " --out " + w.data.string() + " --force",
                  w.log.string()) == 0);
    CHECK(slurp(w.data / "scenes.jsonl") == before);
}

TEST_CASE("train-lm --resume lands on the uninterrupted trajectory byte for byte") {
    const auto& w = ws();
    REQUIRE(w.rc_lm_full == 0);
    REQUIRE(w.rc_lm_short == 0);
    REQUIRE(w.rc_lm_resume == 0);
    // metrics.jsonl contains wall-clock fields, so only the checkpoint is
    // expected to be identical
    CHECK(slurp(w.run_lm_full / "lm.ckpt") == slurp(w.run_lm_split / "lm.ckpt"));

    // resuming requires an existing checkpoint
    CHECK(run_cli("train-lm --config " + w.cfg_full.string() + " --data " + w.data.string() + " --out " +
                      (w.root / "no_such_run").string() + " --resume",
                  w.log.string()) != 0);
    CHECK(slurp(w.log).find("missing prerequisite checkpoint") != std::string::npos);
}

TEST_CASE("sample is reproducible, warns on unknown words, and checks the mode tag") {
    const auto& w = ws();
    REQUIRE(w.rc_base == 0);
    const std::string ckpt = (w.run_base / "base.ckpt").string();
    const std::string img1 = (w.root / "s1.ppm").string();
    const std::string img2 = (w.root / "s2.ppm").string();

    CHECK(run_cli("sample --ckpt " + ckpt + " --prompt \"a red circle\" --seed 11 --out " + img1,
                  w.log.string()) == 0);
    CHECK(run_cli("sample --ckpt " + ckpt + " --prompt \"a red circle\" --seed 11 --out " + img2,
                  w.log.string()) == 0);
    CHECK(slurp(img1) == slurp(img2));

    // a different seed must not reproduce the image
    CHECK(run_cli("sample --ckpt " + ckpt + " --prompt \"a red circle\" --seed 12 --out " + img2,
                  w.log.string()) == 0);
    CHECK(slurp(img1) != slurp(img2));

    // out-of-grammar words are mapped to <unk> with a warning, not an error
    CHECK(run_cli("sample --ckpt " + ckpt + " --prompt \"a vermilion zeppelin\" --seed 11 --out " + img2,
                  w.log.string()) == 0);
    CHECK(slurp(w.log).find("unknown word") != std::string::npos);

    // the checkpoint knows which conditioning path it was trained for
    CHECK(run_cli("sample --ckpt " + ckpt + " --prompt \"a red circle\" --seed 11 --mode adapter --out " + img2,
                  w.log.string()) != 0);
    CHECK(slurp(w.log).find("baseline") != std::string::npos);
}

TEST_CASE("adapter training and the scale report run end to end") {
    const auto& w = ws();
    const std::string run_ad = (w.root / "run_adapter").string();
    CHECK(run_cli("train-adapter --config " + w.cfg_full.string() + " --data " + w.data.string() +
                      " --lm-ckpt " + (w.run_lm_full / "lm.ckpt").string() + " --base-ckpt " +
                      (w.run_base / "base.ckpt").string() + " --out " + run_ad,
                  w.log.string()) == 0);

    const std::string csv = (w.root / "scales.csv").string();
    CHECK(run_cli("report-scales --ckpt " + run_ad + "/adapter.ckpt --out " + csv, w.log.string()) == 0);
    const std::string report = slurp(csv);
    CHECK(report.find("down.0") != std::string::npos);
    CHECK(report.find("mid") != std::string::npos);
    CHECK(report.find("up.0") != std::string::npos);

    // missing prerequisite checkpoints are reported by name
    CHECK(run_cli("train-adapter --config " + w.cfg_full.string() + " --data " + w.data.string() +
                      " --lm-ckpt /nonexistent/lm.ckpt --base-ckpt " + (w.run_base / "base.ckpt").string() +
                      " --out " + (w.root / "run_adapter2").string(),
                  w.log.string()) != 0);
    CHECK(slurp(w.log).find("missing prerequisite checkpoint") != std::string::npos);
}

TEST_CASE("eval refuses a classifier that failed its validation gate") {
    const auto& w = ws();
    const std::string run_met = (w.root / "run_metric").string();
    const std::string run_clf = (w.root / "run_clf").string();
    CHECK(run_cli("train-metric --config " + w.cfg_full.string() + " --data " + w.data.string() + " --out " + run_met,
                  w.log.string()) == 0);
    CHECK(run_cli("train-clf --config " + w.cfg_full.string() + " --data " + w.data.string() + " --out " + run_clf,
                  w.log.string()) == 0);

    // four training steps cannot reach the 0.95 exact-match gate, and the
    // evaluator must refuse to produce attribute scores from such a model
    const int rc = run_cli("eval --config " + w.cfg_full.string() + " --ckpt " + (w.run_base / "base.ckpt").string() +
                               " --testset " + w.data.string() + " --metric-ckpt " + run_met + "/metric.ckpt" +
                               " --clf-ckpt " + run_clf + "/clf.ckpt --out " + (w.root / "report.json").string(),
                           w.log.string());
    CHECK(rc != 0);
    CHECK(slurp(w.log).find("below 0.95") != std::string::npos);
}
