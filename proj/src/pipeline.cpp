#include "lmdiff/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "json.hpp"
#include "lmdiff/checkpoint.hpp"
#include "lmdiff/corpus.hpp"
#include "lmdiff/evalstack.hpp"
#include "lmdiff/optimizer.hpp"

namespace lmdiff::pipe {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using nn::Tensor;

namespace {

// ------------------------------------------------------- run dir & logging

void ensure_run_dir(const std::string& dir, bool force) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw std::runtime_error("run path exists and is not a directory: " + dir);
        if (!fs::is_empty(dir)) {
            if (!force) throw std::runtime_error("run directory '" + dir + "' is not empty (pass --force to overwrite)");
            fs::remove_all(dir);
        }
    }
    fs::create_directories(dir);
}

void echo_config(const cfg::RunConfig& cfg, const std::string& dir) {
    std::ofstream f(dir + "/config.resolved.json", std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + dir + "/config.resolved.json");
    f << cfg.to_json_text();
}

// One JSON object per logged step. The wall_ms field is the only
// non-reproducible artifact any command emits.
class MetricsLogger {
public:
    MetricsLogger(const std::string& path, bool append)
        : out_(path, append ? std::ios::app : std::ios::trunc) {
        if (!out_) throw std::runtime_error("cannot open metrics log: " + path);
    }

    void log(long long step, double loss) {
        const auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(
                              std::chrono::system_clock::now().time_since_epoch())
                              .count();
        json j{{"step", step}, {"loss", loss}, {"wall_ms", wall}};
        out_ << j.dump() << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

bool should_log(long long step, long long total, int every) {
    return step % std::max(1, every) == 0 || step + 1 == total;
}

// --------------------------------------------------------- optimizer state

// Adam moments and the step counters ride inside the checkpoint so a
// resumed run continues the exact parameter trajectory.
void save_train_state(CheckpointFile& ckpt, const nn::Adam<float>& opt, const nn::ParamStore<float>& store,
                      long long next_step) {
    ckpt.add_scalar("train.next_step", static_cast<double>(next_step));
    ckpt.add_scalar("opt.step_count", static_cast<double>(opt.step_count));
    for (const auto& e : store.entries()) {
        if (!e.tensor.requires_grad) continue;
        auto it = opt.slots().find(e.name);
        if (it == opt.slots().end()) continue;
        const auto& slot = it->second;
        ckpt.add_tensor("opt.m." + e.name,
                        Tensor<float>::from_data({static_cast<int>(slot.m.size())}, std::vector<float>(slot.m)));
        ckpt.add_tensor("opt.v." + e.name,
                        Tensor<float>::from_data({static_cast<int>(slot.v.size())}, std::vector<float>(slot.v)));
    }
}

long long load_train_state(const CheckpointFile& ckpt, nn::Adam<float>& opt, const nn::ParamStore<float>& store) {
    opt.step_count = static_cast<long long>(ckpt.get_scalar("opt.step_count"));
    for (const auto& e : store.entries()) {
        if (!e.tensor.requires_grad || !ckpt.has("opt.m." + e.name)) continue;
        Tensor<float> m = ckpt.get_tensor<float>("opt.m." + e.name);
        Tensor<float> v = ckpt.get_tensor<float>("opt.v." + e.name);
        if (m.numel() != e.tensor.numel() || v.numel() != e.tensor.numel())
            throw std::runtime_error("optimizer state size mismatch for " + e.name);
        opt.slots()[e.name] = {*m.data, *v.data};
    }
    return static_cast<long long>(ckpt.get_scalar("train.next_step"));
}

void require_checkpoint(const std::string& path, const char* producer) {
    if (!fs::exists(path))
        throw std::runtime_error("missing prerequisite checkpoint: " + path + " (produce it with " + producer + ")");
}

// --------------------------------------------------------------- datasets

struct LoadedData {
    std::vector<corpus::DatasetItem> items;
    corpus::Vocab vocab = corpus::Vocab::grammar_vocab();
    std::vector<lm::TokenSequence> tokens;  // tokenized captions, same order
};

LoadedData load_data(const std::string& dir, int expect_img_size) {
    LoadedData d;
    d.items = corpus::read_dataset(dir);
    if (d.items.empty()) throw std::runtime_error("dataset is empty: " + dir);
    for (const auto& item : d.items) {
        if (item.image.shape[1] != expect_img_size)
            throw std::runtime_error("dataset image size " + std::to_string(item.image.shape[1]) +
                                     " does not match configured img_size " + std::to_string(expect_img_size));
        d.tokens.push_back(corpus::tokenize(item.caption_text, d.vocab));
    }
    return d;
}

// ------------------------------------------------------- freezing contract

void check_frozen(const nn::ParamStore<float>& store, const char* what) {
    for (const auto& e : store.entries()) {
        if (e.tensor.requires_grad)
            throw std::runtime_error(std::string("freezing violated: ") + what + " parameter " + e.name +
                                     " is marked trainable");
        if (!e.tensor.grad) continue;
        for (float g : *e.tensor.grad)
            if (g != 0.f) throw std::runtime_error(std::string("freezing violated: gradient reached ") + what +
                                                   " parameter " + e.name);
    }
}

// mode tag stored in every generation checkpoint
constexpr double kModeBaseline = 0.0;
constexpr double kModeAdapter = 1.0;

std::string mode_of(const CheckpointFile& ckpt) {
    const double m = ckpt.get_scalar("meta.mode");
    if (m == kModeBaseline) return "baseline";
    if (m == kModeAdapter) return "adapter";
    throw std::runtime_error("checkpoint has unknown mode tag");
}

lm::LMConfig lm_config(const cfg::RunConfig& cfg, int vocab_size) {
    lm::LMConfig c;
    c.vocab_size = vocab_size;
    c.hidden = cfg.lm.hidden;
    c.n_blocks = cfg.lm.n_blocks;
    c.n_heads = cfg.lm.n_heads;
    c.mlp_ratio = cfg.lm.mlp_ratio;
    c.max_len = cfg.lm.max_len;
    c.pad_id = corpus::Vocab::pad_id;
    return c;
}

diff::DenoiserConfig dn_config(const cfg::RunConfig& cfg) {
    diff::DenoiserConfig c;
    c.in_channels = 3;
    c.img_size = cfg.data.img_size;
    c.base_width = cfg.diffusion.base_width;
    c.n_down = cfg.diffusion.n_down;
    c.cond_dim = cfg.diffusion.cond_dim;
    c.time_dim = cfg.diffusion.time_dim;
    c.n_steps = cfg.diffusion.n_steps;
    c.beta_start = cfg.diffusion.beta_start;
    c.beta_end = cfg.diffusion.beta_end;
    return c;
}

}  // namespace

// ---------------------------------------------------------------- gen-data

void cmd_gen_data(const cfg::RunConfig& cfg, const std::string& out_dir, int n_scenes, bool force) {
    if (n_scenes < 1) throw std::runtime_error("gen-data: need at least one scene");
    ensure_run_dir(out_dir, force);
    echo_config(cfg, out_dir);
    const RandomStream root{cfg.seeds.data, 0};
    std::vector<corpus::DatasetItem> items;
    items.reserve(static_cast<std::size_t>(n_scenes));
    for (int i = 0; i < n_scenes; ++i) {
        corpus::DatasetItem item;
        item.id = i;
        RandomStream scene_stream = root.fork("scene").fork(static_cast<uint64_t>(i));
        item.scene = corpus::sample_scene(scene_stream);
        RandomStream caption_stream = root.fork("caption").fork(static_cast<uint64_t>(i));
        item.caption_text = corpus::caption(item.scene, caption_stream);
        item.image = corpus::render(item.scene, cfg.data.img_size);
        items.push_back(std::move(item));
    }
    corpus::write_dataset(out_dir, items);
    std::cout << "wrote " << n_scenes << " scenes to " << out_dir << "\n";
}

// ---------------------------------------------------------------- train-lm

void cmd_train_lm(const cfg::RunConfig& cfg, const std::string& data_dir, const std::string& out_dir, bool force,
                  bool resume) {
    LoadedData data = load_data(data_dir, cfg.data.img_size);
    lm::LMConfig lmc = lm_config(cfg, data.vocab.size());
    lm::LangModel<float> model(lmc, RandomStream{cfg.seeds.lm, 0}.fork("init"), true);
    nn::Adam<float> opt(cfg.lm.lr);

    const std::string ckpt_path = out_dir + "/lm.ckpt";
    long long start = 0;
    if (resume) {
        require_checkpoint(ckpt_path, "train-lm");
        CheckpointFile prev = CheckpointFile::load(ckpt_path);
        model.load_from(prev);
        start = load_train_state(prev, opt, model.params);
    } else {
        ensure_run_dir(out_dir, force);
        echo_config(cfg, out_dir);
    }

    MetricsLogger log(out_dir + "/metrics.jsonl", resume);
    const RandomStream run{cfg.seeds.lm, 0};
    const RandomStream batch_root = run.fork("batch");
    for (long long s = start; s < cfg.lm.steps; ++s) {
        RandomStream bs = batch_root.fork(static_cast<uint64_t>(s));
        std::vector<lm::TokenSequence> batch;
        for (int i = 0; i < cfg.lm.batch_size; ++i)
            batch.push_back(data.tokens[bs.next_below(data.tokens.size())]);
        model.params.zero_grad();
        Tensor<float> loss = model.lm_loss(batch);
        nn::backward(loss);
        opt.step(model.params);
        if (should_log(s, cfg.lm.steps, cfg.lm.log_every)) log.log(s + 1, static_cast<double>((*loss.data)[0]));
    }

    CheckpointFile ckpt;
    model.save_into(ckpt);
    save_train_state(ckpt, opt, model.params, cfg.lm.steps);
    ckpt.save(ckpt_path);
    std::cout << "wrote " << ckpt_path << "\n";
}

// -------------------------------------------------------------- train-base

void cmd_train_base(const cfg::RunConfig& cfg, const std::string& data_dir, const std::string& out_dir, bool force,
                    bool resume) {
    LoadedData data = load_data(data_dir, cfg.data.img_size);
    diff::DenoiserConfig dcfg = dn_config(cfg);
    diff::DenoiserNet<float> net(dcfg, RandomStream{cfg.seeds.base, 0}.fork("init"), true);
    diff::BaselineEncoder<float> baseline(data.vocab.size(), dcfg.cond_dim,
                                          RandomStream{cfg.seeds.base, 0}.fork("init.text"), true);
    const diff::NoiseSchedule sched = diff::make_schedule(dcfg.n_steps, dcfg.beta_start, dcfg.beta_end);

    nn::ParamStore<float> master;
    for (const auto& e : net.params.entries()) master.add(e.name, e.tensor);
    for (const auto& e : baseline.params.entries()) master.add(e.name, e.tensor);
    nn::Adam<float> opt(cfg.diffusion.lr);

    const std::string ckpt_path = out_dir + "/base.ckpt";
    long long start = 0;
    if (resume) {
        require_checkpoint(ckpt_path, "train-base");
        CheckpointFile prev = CheckpointFile::load(ckpt_path);
        net.load_from(prev);
        baseline.load_from(prev);
        start = load_train_state(prev, opt, master);
    } else {
        ensure_run_dir(out_dir, force);
        echo_config(cfg, out_dir);
    }

    MetricsLogger log(out_dir + "/metrics.jsonl", resume);
    const RandomStream run{cfg.seeds.base, 0};
    const RandomStream batch_root = run.fork("batch");
    const RandomStream noise_root = run.fork("noise");
    for (long long s = start; s < cfg.diffusion.steps; ++s) {
        RandomStream bs = batch_root.fork(static_cast<uint64_t>(s));
        RandomStream ns = noise_root.fork(static_cast<uint64_t>(s));
        master.zero_grad();
        Tensor<float> total;
        for (int i = 0; i < cfg.diffusion.batch_size; ++i) {
            const std::size_t idx = bs.next_below(data.items.size());
            Tensor<float> cond = baseline.encode(data.tokens[idx].ids);
            RandomStream sample_stream = ns.fork(static_cast<uint64_t>(i));
            Tensor<float> li = diff::denoise_loss(net, sched, data.items[idx].image, cond, sample_stream);
            total = total.defined() ? nn::add(total, li) : li;
        }
        Tensor<float> loss = nn::scale(total, 1.0 / cfg.diffusion.batch_size);
        nn::backward(loss);
        opt.step(master);
        if (should_log(s, cfg.diffusion.steps, cfg.diffusion.log_every))
            log.log(s + 1, static_cast<double>((*loss.data)[0]));
    }

    CheckpointFile ckpt;
    ckpt.add_scalar("meta.mode", kModeBaseline);
    net.save_into(ckpt);
    baseline.save_into(ckpt);
    save_train_state(ckpt, opt, master, cfg.diffusion.steps);
    ckpt.save(ckpt_path);
    std::cout << "wrote " << ckpt_path << "\n";
}

// ----------------------------------------------------------- train-adapter

void cmd_train_adapter(const cfg::RunConfig& cfg, const std::string& data_dir, const std::string& lm_ckpt,
                       const std::string& base_ckpt, const std::string& out_dir, bool force, bool resume) {
    require_checkpoint(lm_ckpt, "train-lm");
    require_checkpoint(base_ckpt, "train-base");
    LoadedData data = load_data(data_dir, cfg.data.img_size);

    const CheckpointFile lm_file = CheckpointFile::load(lm_ckpt);
    lm::LangModel<float> lmodel(lm::LangModel<float>::config_from(lm_file), RandomStream{0, 0}, false);
    lmodel.load_from(lm_file);

    const CheckpointFile base_file = CheckpointFile::load(base_ckpt);
    diff::DenoiserNet<float> net(diff::DenoiserNet<float>::config_from(base_file), RandomStream{0, 0}, false);
    net.load_from(base_file);
    const diff::NoiseSchedule sched = diff::make_schedule(net.cfg.n_steps, net.cfg.beta_start, net.cfg.beta_end);

    ad::AdapterState<float> adapter = ad::init_adapter(net, lmodel.cfg.hidden, cfg.adapter.init_a2,
                                                       RandomStream{cfg.seeds.adapter, 0}.fork("init"));
    enc::ScoreParams<float> score = enc::ScoreParams<float>::init(lmodel.cfg.n_blocks, true);

    nn::ParamStore<float> master;
    adapter.register_params(master);
    master.add("score.g", score.g);
    master.add("score.eta", score.eta);
    nn::Adam<float> opt(cfg.adapter.lr);

    const std::string ckpt_path = out_dir + "/adapter.ckpt";
    long long start = 0;
    if (resume) {
        require_checkpoint(ckpt_path, "train-adapter");
        CheckpointFile prev = CheckpointFile::load(ckpt_path);
        load_adapter_from(adapter, prev);
        for (const char* name : {"score.g", "score.eta"}) {
            Tensor<float> loaded = prev.get_tensor<float>(name);
            Tensor<float>& dst = master.get(name);
            if (loaded.shape != dst.shape) throw std::runtime_error("checkpoint shape mismatch for " + std::string(name));
            std::copy(loaded.data->begin(), loaded.data->end(), dst.data->begin());
        }
        start = load_train_state(prev, opt, master);
    } else {
        ensure_run_dir(out_dir, force);
        echo_config(cfg, out_dir);
    }

    MetricsLogger log(out_dir + "/metrics.jsonl", resume);
    const RandomStream run{cfg.seeds.adapter, 0};
    const RandomStream batch_root = run.fork("batch");
    const RandomStream noise_root = run.fork("noise");
    const RandomStream enc_root = run.fork("enc");
    for (long long s = start; s < cfg.adapter.steps; ++s) {
        RandomStream bs = batch_root.fork(static_cast<uint64_t>(s));
        RandomStream ns = noise_root.fork(static_cast<uint64_t>(s));
        RandomStream es = enc_root.fork(static_cast<uint64_t>(s));
        master.zero_grad();
        Tensor<float> total;
        for (int i = 0; i < cfg.adapter.batch_size; ++i) {
            const std::size_t idx = bs.next_below(data.items.size());
            RandomStream enc_stream = es.fork(static_cast<uint64_t>(i));
            enc::TextEncoding<float> encoding = enc::extract_encoding(data.tokens[idx], lmodel, score, enc_stream);
            diff::SiteAttentionFn<float> attn = ad::adapter_site_fn(adapter, encoding.c);
            RandomStream sample_stream = ns.fork(static_cast<uint64_t>(i));
            Tensor<float> li = diff::denoise_loss(net, sched, data.items[idx].image, attn, sample_stream);
            total = total.defined() ? nn::add(total, li) : li;
        }
        Tensor<float> loss = nn::scale(total, 1.0 / cfg.adapter.batch_size);
        nn::backward(loss);
        check_frozen(lmodel.params, "language model");
        check_frozen(net.params, "denoiser");
        opt.step(master);
        if (should_log(s, cfg.adapter.steps, cfg.adapter.log_every))
            log.log(s + 1, static_cast<double>((*loss.data)[0]));
    }

    CheckpointFile ckpt;
    ckpt.add_scalar("meta.mode", kModeAdapter);
    lmodel.save_into(ckpt);
    net.save_into(ckpt);
    save_adapter_into(adapter, ckpt);
    ckpt.add_tensor("score.g", score.g);
    ckpt.add_tensor("score.eta", score.eta);
    save_train_state(ckpt, opt, master, cfg.adapter.steps);
    ckpt.save(ckpt_path);
    std::cout << "wrote " << ckpt_path << "\n";
}

// ------------------------------------------------------------ train-metric

void cmd_train_metric(const cfg::RunConfig& cfg, const std::string& data_dir, const std::string& out_dir, bool force) {
    LoadedData data = load_data(data_dir, cfg.data.img_size);
    eval::EvalNetConfig ec;
    ec.img_size = cfg.data.img_size;
    ec.width1 = cfg.eval.width1;
    ec.width2 = cfg.eval.width2;
    ec.emb_dim = cfg.eval.emb_dim;
    ec.vocab_size = data.vocab.size();
    eval::MetricModel<float> metric(ec, RandomStream{cfg.seeds.metric, 0}.fork("init"), true);
    nn::Adam<float> opt(cfg.eval.lr);

    ensure_run_dir(out_dir, force);
    echo_config(cfg, out_dir);
    MetricsLogger log(out_dir + "/metrics.jsonl", false);
    const RandomStream batch_root = RandomStream{cfg.seeds.metric, 0}.fork("batch");
    for (long long s = 0; s < cfg.eval.metric_steps; ++s) {
        RandomStream bs = batch_root.fork(static_cast<uint64_t>(s));
        // a pair (i, j), i != j, is labeled mismatched, so captions inside a
        // batch must be pairwise distinct or the labels would lie
        std::vector<Tensor<float>> images;
        std::vector<std::vector<int>> token_ids;
        std::unordered_set<std::string> seen;
        for (int tries = 0; tries < cfg.eval.metric_batch * 20 &&
                            static_cast<int>(images.size()) < cfg.eval.metric_batch;
             ++tries) {
            const std::size_t idx = bs.next_below(data.items.size());
            if (!seen.insert(data.items[idx].caption_text).second) continue;
            images.push_back(data.items[idx].image);
            token_ids.push_back(data.tokens[idx].ids);
        }
        metric.params.zero_grad();
        Tensor<float> loss = metric.contrastive_loss(images, token_ids);
        nn::backward(loss);
        opt.step(metric.params);
        if (should_log(s, cfg.eval.metric_steps, cfg.eval.log_every))
            log.log(s + 1, static_cast<double>((*loss.data)[0]));
    }

    CheckpointFile ckpt;
    metric.save_into(ckpt);
    ckpt.save(out_dir + "/metric.ckpt");
    std::cout << "wrote " << out_dir << "/metric.ckpt\n";
}

// --------------------------------------------------------------- train-clf

void cmd_train_clf(const cfg::RunConfig& cfg, const std::string& data_dir, const std::string& out_dir, bool force) {
    LoadedData data = load_data(data_dir, cfg.data.img_size);
    eval::EvalNetConfig ec;
    ec.img_size = cfg.data.img_size;
    ec.width1 = cfg.eval.width1;
    ec.width2 = cfg.eval.width2;
    ec.emb_dim = cfg.eval.emb_dim;
    ec.vocab_size = data.vocab.size();
    eval::AttributeClassifier<float> clf(ec, RandomStream{cfg.seeds.clf, 0}.fork("init"), true);
    nn::Adam<float> opt(cfg.eval.lr);

    // deterministic 90/10 train/validation split on scene ground truth
    const std::size_t n_val = std::max<std::size_t>(1, data.items.size() / 10);
    const std::size_t n_train = data.items.size() - n_val;
    if (n_train == 0) throw std::runtime_error("dataset too small to split for validation");
    std::vector<corpus::CaptionTruth> truths;
    truths.reserve(data.items.size());
    for (const auto& item : data.items) truths.push_back(corpus::scene_truth(item.scene));

    ensure_run_dir(out_dir, force);
    echo_config(cfg, out_dir);
    MetricsLogger log(out_dir + "/metrics.jsonl", false);
    const RandomStream batch_root = RandomStream{cfg.seeds.clf, 0}.fork("batch");
    for (long long s = 0; s < cfg.eval.clf_steps; ++s) {
        // cosine decay: exact-match needs late-stage boundary refinement that
        // a constant step size keeps washing out
        opt.lr = cfg.eval.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(s) / static_cast<double>(cfg.eval.clf_steps)));
        RandomStream bs = batch_root.fork(static_cast<uint64_t>(s));
        clf.params.zero_grad();
        Tensor<float> total;
        for (int i = 0; i < cfg.eval.clf_batch; ++i) {
            const std::size_t idx = bs.next_below(n_train);
            Tensor<float> li = clf.loss(data.items[idx].image, truths[idx]);
            total = total.defined() ? nn::add(total, li) : li;
        }
        Tensor<float> loss = nn::scale(total, 1.0 / cfg.eval.clf_batch);
        nn::backward(loss);
        opt.step(clf.params);
        if (should_log(s, cfg.eval.clf_steps, cfg.eval.log_every))
            log.log(s + 1, static_cast<double>((*loss.data)[0]));
    }

    // strict exact match on every head over the held-out renders
    std::size_t hits = 0;
    for (std::size_t i = n_train; i < data.items.size(); ++i) {
        const eval::AttributePrediction p = clf.predict(data.items[i].image);
        const corpus::CaptionTruth& t = truths[i];
        bool ok = p.count == t.count;
        for (int c = 0; c < corpus::kNumColors; ++c) ok = ok && p.colors[c] == t.colors[c];
        for (int sh = 0; sh < corpus::kNumShapes; ++sh) ok = ok && p.shapes[sh] == t.shapes[sh];
        for (int r = 0; r < corpus::kNumRelations; ++r) ok = ok && p.relations[r] == t.relations[r];
        hits += ok;
    }
    clf.val_exact_match = static_cast<double>(hits) / static_cast<double>(n_val);
    std::cout << "validation exact match: " << clf.val_exact_match << " over " << n_val << " renders\n";

    CheckpointFile ckpt;
    clf.save_into(ckpt);
    ckpt.save(out_dir + "/clf.ckpt");
    std::cout << "wrote " << out_dir << "/clf.ckpt\n";
}

// ----------------------------------------------------------------- loading

GenModel load_gen_model(const std::string& ckpt_path) {
    require_checkpoint(ckpt_path, "train-base or train-adapter");
    const CheckpointFile ckpt = CheckpointFile::load(ckpt_path);
    GenModel m;
    m.mode = mode_of(ckpt);
    m.net = std::make_unique<diff::DenoiserNet<float>>(diff::DenoiserNet<float>::config_from(ckpt), RandomStream{0, 0},
                                                       false);
    m.net->load_from(ckpt);
    m.sched = diff::make_schedule(m.net->cfg.n_steps, m.net->cfg.beta_start, m.net->cfg.beta_end);
    if (m.mode == "baseline") {
        m.baseline = std::make_unique<diff::BaselineEncoder<float>>(
            static_cast<int>(ckpt.get_scalar("meta.base.vocab_size")),
            static_cast<int>(ckpt.get_scalar("meta.base.cond_dim")), RandomStream{0, 0}, false);
        m.baseline->load_from(ckpt);
    } else {
        m.lmodel = std::make_unique<lm::LangModel<float>>(lm::LangModel<float>::config_from(ckpt), RandomStream{0, 0},
                                                          false);
        m.lmodel->load_from(ckpt);
        m.adapter = std::make_unique<ad::AdapterState<float>>(
            ad::init_adapter(*m.net, m.lmodel->cfg.hidden, 0.0, RandomStream{0, 0}));
        load_adapter_from(*m.adapter, ckpt);
        m.score.g = ckpt.get_tensor<float>("score.g");
        m.score.eta = ckpt.get_tensor<float>("score.eta");
    }
    return m;
}

Tensor<float> sample_image(const GenModel& model, const lm::TokenSequence& tokens, RandomStream stream,
                           double guidance) {
    nn::NoGradGuard guard;
    RandomStream enc_stream = stream.fork("enc");
    RandomStream ddpm_stream = stream.fork("ddpm");
    const lm::TokenSequence empty_prompt{{corpus::Vocab::bos_id, corpus::Vocab::eos_id}};
    if (model.mode == "baseline") {
        Tensor<float> cond = model.baseline->encode(tokens.ids);
        if (guidance != 0.0) {
            Tensor<float> uncond = model.baseline->encode(empty_prompt.ids);
            return diff::ddpm_sample(*model.net, model.sched, cond, ddpm_stream, guidance, &uncond);
        }
        return diff::ddpm_sample(*model.net, model.sched, cond, ddpm_stream);
    }
    enc::TextEncoding<float> encoding = enc::extract_encoding(tokens, *model.lmodel, model.score, enc_stream);
    diff::SiteAttentionFn<float> attn = ad::adapter_site_fn(*model.adapter, encoding.c);
    if (guidance != 0.0) {
        RandomStream uncond_stream = enc_stream.fork("uncond");
        enc::TextEncoding<float> unc = enc::extract_encoding(empty_prompt, *model.lmodel, model.score, uncond_stream);
        diff::SiteAttentionFn<float> unc_attn = ad::adapter_site_fn(*model.adapter, unc.c);
        return diff::ddpm_sample(*model.net, model.sched, attn, ddpm_stream, guidance, &unc_attn);
    }
    return diff::ddpm_sample(*model.net, model.sched, attn, ddpm_stream);
}

// ------------------------------------------------------------------ sample

void cmd_sample(const std::string& ckpt, const std::string& prompt, uint64_t seed, const std::string& out_path,
                const std::string& mode, double guidance) {
    GenModel model = load_gen_model(ckpt);
    if (!mode.empty() && mode != model.mode)
        throw std::runtime_error("checkpoint is a " + model.mode + " model but --mode asked for " + mode);
    const corpus::Vocab vocab = corpus::Vocab::grammar_vocab();
    {
        std::istringstream in(prompt);
        std::string word;
        while (in >> word)
            if (vocab.id(word) == corpus::Vocab::unk_id && word != "<unk>")
                std::cerr << "warning: unknown word '" << word << "' mapped to <unk>\n";
    }
    const lm::TokenSequence tokens = corpus::tokenize(prompt, vocab);
    Tensor<float> img = sample_image(model, tokens, RandomStream{seed, 0}, guidance);
    corpus::write_ppm(out_path, img);
    std::cout << "wrote " << out_path << "\n";
}

// -------------------------------------------------------------------- eval

void cmd_eval(const cfg::RunConfig& cfg, const std::string& ckpt, const std::string& testset,
              const std::string& metric_ckpt, const std::string& clf_ckpt, const std::string& out_path) {
    GenModel model = load_gen_model(ckpt);

    require_checkpoint(metric_ckpt, "train-metric");
    const CheckpointFile mf = CheckpointFile::load(metric_ckpt);
    eval::MetricModel<float> metric(eval::MetricModel<float>::config_from(mf), RandomStream{0, 0}, false);
    metric.load_from(mf);

    require_checkpoint(clf_ckpt, "train-clf");
    const CheckpointFile cf = CheckpointFile::load(clf_ckpt);
    eval::AttributeClassifier<float> clf(eval::AttributeClassifier<float>::config_from(cf), RandomStream{0, 0}, false);
    clf.load_from(cf);

    LoadedData data = load_data(testset, cfg.data.img_size);
    const int n_cap = static_cast<int>(data.items.size());
    if (n_cap == 0) throw std::runtime_error("testset is empty: " + testset);

    std::vector<Tensor<float>> images;
    std::vector<corpus::CaptionTruth> truths;
    double siglip_sum = 0.0;
    for (int i = 0; i < n_cap; ++i) {
        const corpus::CaptionTruth truth = corpus::parse_caption(data.items[i].caption_text);
        for (int j = 0; j < cfg.eval.images_per_caption; ++j) {
            // per-image stream: seed walks over repeats, stream id over captions,
            // so both generator modes face identical noise for the same (i, j)
            RandomStream stream{cfg.seeds.eval + static_cast<uint64_t>(j), static_cast<uint64_t>(i)};
            Tensor<float> img = sample_image(model, data.tokens[i], stream, cfg.eval.guidance);
            siglip_sum += metric.siglip_score(img, data.tokens[i].ids);
            images.push_back(std::move(img));
            truths.push_back(truth);
        }
    }
    const eval::AttributeReport rep = eval::attribute_accuracy(images, truths, clf);

    json report{{"siglip_mean", siglip_sum / static_cast<double>(images.size())},
                {"count_acc", rep.count_acc},
                {"color_acc", rep.color_acc},
                {"shape_acc", rep.shape_acc},
                {"relation_acc", rep.relation_acc},
                {"exact_match", rep.exact_match}};
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write report: " + out_path);
    f << report.dump(2) << "\n";
    std::cout << report.dump(2) << "\n";
}

// ----------------------------------------------------------- report-scales

void cmd_report_scales(const std::string& ckpt_path, const std::string& out_path) {
    GenModel model = load_gen_model(ckpt_path);
    if (model.mode != "adapter") throw std::runtime_error("report-scales needs an adapter checkpoint");
    std::ostringstream csv;
    csv << "site,frozen_scale,new_scale\n";
    csv.precision(8);
    for (const auto& [site, w1, w2] : ad::scale_report(*model.adapter)) csv << site << "," << w1 << "," << w2 << "\n";
    if (out_path.empty() || out_path == "-") {
        std::cout << csv.str();
    } else {
        std::ofstream f(out_path, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write scales: " + out_path);
        f << csv.str();
        std::cout << "wrote " << out_path << "\n";
    }
}

}  // namespace lmdiff::pipe
