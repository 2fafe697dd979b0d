// Orchestration behind the CLI: dataset generation, the three-phase
// training pipeline (language model -> conditional diffusion backbone ->
// adapter), the evaluation-model trainers, sampling, evaluation, and the
// adapter scale report. All commands are deterministic functions of
// (config, seeds); wall-clock time appears only in metrics.jsonl.
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "lmdiff/adapter.hpp"
#include "lmdiff/config.hpp"
#include "lmdiff/diffusion.hpp"
#include "lmdiff/encoding.hpp"
#include "lmdiff/lm.hpp"

namespace lmdiff::pipe {

// A generation checkpoint loaded for sampling/eval. Baseline checkpoints
// carry the denoiser plus the mean-pooled text embedding; adapter
// checkpoints carry the frozen language model, the frozen denoiser, the
// adapter tensors, and the extraction scalars, so one file is sufficient.
struct GenModel {
    std::string mode;  // "baseline" or "adapter"
    std::unique_ptr<diff::DenoiserNet<float>> net;
    diff::NoiseSchedule sched;
    std::unique_ptr<diff::BaselineEncoder<float>> baseline;
    std::unique_ptr<lm::LangModel<float>> lmodel;
    std::unique_ptr<ad::AdapterState<float>> adapter;
    enc::ScoreParams<float> score;
};

GenModel load_gen_model(const std::string& ckpt_path);

// One image for one caption. The stream is forked internally into an
// encoding stream and a sampling stream, so baseline and adapter modes
// consume identical diffusion noise for the same input stream.
nn::Tensor<float> sample_image(const GenModel& model, const lm::TokenSequence& tokens, RandomStream stream,
                               double guidance);

// ------------------------------------------------------------- subcommands

void cmd_gen_data(const cfg::RunConfig& cfg, const std::string& out_dir, int n_scenes, bool force);

void cmd_train_lm(const cfg::RunConfig& cfg, const std::string& data_dir, const std::string& out_dir, bool force,
                  bool resume);
void cmd_train_base(const cfg::RunConfig& cfg, const std::string& data_dir, const std::string& out_dir, bool force,
                    bool resume);
void cmd_train_adapter(const cfg::RunConfig& cfg, const std::string& data_dir, const std::string& lm_ckpt,
                       const std::string& base_ckpt, const std::string& out_dir, bool force, bool resume);
void cmd_train_metric(const cfg::RunConfig& cfg, const std::string& data_dir, const std::string& out_dir, bool force);
void cmd_train_clf(const cfg::RunConfig& cfg, const std::string& data_dir, const std::string& out_dir, bool force);

void cmd_sample(const std::string& ckpt, const std::string& prompt, uint64_t seed, const std::string& out_path,
                const std::string& mode, double guidance);

void cmd_eval(const cfg::RunConfig& cfg, const std::string& ckpt, const std::string& testset,
              const std::string& metric_ckpt, const std::string& clf_ckpt, const std::string& out_path);

void cmd_report_scales(const std::string& ckpt, const std::string& out_path);

}  // namespace lmdiff::pipe
