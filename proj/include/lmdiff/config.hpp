// Run configuration: one JSON document with sections {data, lm, diffusion,
// adapter, eval, seeds}. Unknown keys are rejected so typos cannot silently
// fall back to defaults; the resolved document is echoed into every run
// directory.
#pragma once

#include <cstdint>
#include <string>

namespace lmdiff::cfg {

struct DataConfig {
    int n_scenes = 10000;
    int img_size = 16;
};

struct LMSection {
    int hidden = 64;
    int n_blocks = 4;
    int n_heads = 4;
    int mlp_ratio = 4;
    int max_len = 32;
    int steps = 600;
    int batch_size = 16;
    int log_every = 50;
    double lr = 1e-3;
};

struct DiffusionSection {
    int base_width = 16;
    int n_down = 2;
    int cond_dim = 64;
    int time_dim = 64;
    int n_steps = 200;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int steps = 1200;
    int batch_size = 8;
    int log_every = 50;
    double lr = 1e-3;
};

struct AdapterSection {
    double init_a2 = 0.1;
    int steps = 800;
    int batch_size = 8;
    int log_every = 50;
    double lr = 1e-3;
};

struct EvalSection {
    int emb_dim = 64;
    int width1 = 16;
    int width2 = 32;
    int metric_steps = 1500;
    int clf_steps = 2500;
    int metric_batch = 16;
    int clf_batch = 32;
    double lr = 1e-3;
    int images_per_caption = 10;
    double guidance = 0.0;
    int log_every = 100;
};

struct SeedSection {
    uint64_t data = 1;
    uint64_t lm = 2;
    uint64_t base = 3;
    uint64_t adapter = 4;
    uint64_t metric = 5;
    uint64_t clf = 6;
    uint64_t sample = 7;
    uint64_t eval = 8;
};

struct RunConfig {
    DataConfig data;
    LMSection lm;
    DiffusionSection diffusion;
    AdapterSection adapter;
    EvalSection eval;
    SeedSection seeds;

    // defaults overlaid with the JSON document at `path`; unknown keys or
    // type mismatches are errors naming the offending key
    static RunConfig from_file(const std::string& path);
    static RunConfig from_json_text(const std::string& text);

    std::string to_json_text() const;  // pretty-printed, stable key order
};

}  // namespace lmdiff::cfg
