#include "lmdiff/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace lmdiff::cfg {

using json = nlohmann::ordered_json;

namespace {

json defaults_json() {
    RunConfig d;
    json j;
    j["data"] = {{"n_scenes", d.data.n_scenes}, {"img_size", d.data.img_size}};
    j["lm"] = {{"hidden", d.lm.hidden},       {"n_blocks", d.lm.n_blocks},
               {"n_heads", d.lm.n_heads},     {"mlp_ratio", d.lm.mlp_ratio},
               {"max_len", d.lm.max_len},     {"steps", d.lm.steps},
               {"batch_size", d.lm.batch_size}, {"log_every", d.lm.log_every},
               {"lr", d.lm.lr}};
    j["diffusion"] = {{"base_width", d.diffusion.base_width},
                      {"n_down", d.diffusion.n_down},
                      {"cond_dim", d.diffusion.cond_dim},
                      {"time_dim", d.diffusion.time_dim},
                      {"n_steps", d.diffusion.n_steps},
                      {"beta_start", d.diffusion.beta_start},
                      {"beta_end", d.diffusion.beta_end},
                      {"steps", d.diffusion.steps},
                      {"batch_size", d.diffusion.batch_size},
                      {"log_every", d.diffusion.log_every},
                      {"lr", d.diffusion.lr}};
    j["adapter"] = {{"init_a2", d.adapter.init_a2},
                    {"steps", d.adapter.steps},
                    {"batch_size", d.adapter.batch_size},
                    {"log_every", d.adapter.log_every},
                    {"lr", d.adapter.lr}};
    j["eval"] = {{"emb_dim", d.eval.emb_dim},
                 {"width1", d.eval.width1},
                 {"width2", d.eval.width2},
                 {"metric_steps", d.eval.metric_steps},
                 {"clf_steps", d.eval.clf_steps},
                 {"metric_batch", d.eval.metric_batch},
                 {"clf_batch", d.eval.clf_batch},
                 {"lr", d.eval.lr},
                 {"images_per_caption", d.eval.images_per_caption},
                 {"guidance", d.eval.guidance},
                 {"log_every", d.eval.log_every}};
    j["seeds"] = {{"data", d.seeds.data},   {"lm", d.seeds.lm},
                  {"base", d.seeds.base},   {"adapter", d.seeds.adapter},
                  {"metric", d.seeds.metric}, {"clf", d.seeds.clf},
                  {"sample", d.seeds.sample}, {"eval", d.seeds.eval}};
    return j;
}

// overlay `user` onto `base`, rejecting keys that do not exist in the
// defaults and values whose JSON type disagrees with the default's
void merge_checked(json& base, const json& user, const std::string& prefix) {
    if (!user.is_object()) {
        throw std::runtime_error("config: expected an object at '" +
                                 (prefix.empty() ? std::string("<root>") : prefix) + "'");
    }
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key())) {
            throw std::runtime_error("config: unknown key '" + key + "'");
        }
        json& slot = base[it.key()];
        const json& val = it.value();
        if (slot.is_object()) {
            merge_checked(slot, val, key);
        } else if (slot.is_number() && val.is_number()) {
            slot = val;
        } else if (slot.type() == val.type()) {
            slot = val;
        } else {
            throw std::runtime_error("config: wrong type for key '" + key + "'");
        }
    }
}

int get_int(const json& j, const char* key) { return j.at(key).get<int>(); }
double get_f64(const json& j, const char* key) { return j.at(key).get<double>(); }
uint64_t get_u64(const json& j, const char* key) { return j.at(key).get<uint64_t>(); }

RunConfig from_merged(const json& j) {
    RunConfig c;
    const json& jd = j.at("data");
    c.data.n_scenes = get_int(jd, "n_scenes");
    c.data.img_size = get_int(jd, "img_size");

    const json& jl = j.at("lm");
    c.lm.hidden = get_int(jl, "hidden");
    c.lm.n_blocks = get_int(jl, "n_blocks");
    c.lm.n_heads = get_int(jl, "n_heads");
    c.lm.mlp_ratio = get_int(jl, "mlp_ratio");
    c.lm.max_len = get_int(jl, "max_len");
    c.lm.steps = get_int(jl, "steps");
    c.lm.batch_size = get_int(jl, "batch_size");
    c.lm.log_every = get_int(jl, "log_every");
    c.lm.lr = get_f64(jl, "lr");

    const json& jf = j.at("diffusion");
    c.diffusion.base_width = get_int(jf, "base_width");
    c.diffusion.n_down = get_int(jf, "n_down");
    c.diffusion.cond_dim = get_int(jf, "cond_dim");
    c.diffusion.time_dim = get_int(jf, "time_dim");
    c.diffusion.n_steps = get_int(jf, "n_steps");
    c.diffusion.beta_start = get_f64(jf, "beta_start");
    c.diffusion.beta_end = get_f64(jf, "beta_end");
    c.diffusion.steps = get_int(jf, "steps");
    c.diffusion.batch_size = get_int(jf, "batch_size");
    c.diffusion.log_every = get_int(jf, "log_every");
    c.diffusion.lr = get_f64(jf, "lr");

    const json& ja = j.at("adapter");
    c.adapter.init_a2 = get_f64(ja, "init_a2");
    c.adapter.steps = get_int(ja, "steps");
    c.adapter.batch_size = get_int(ja, "batch_size");
    c.adapter.log_every = get_int(ja, "log_every");
    c.adapter.lr = get_f64(ja, "lr");

    const json& je = j.at("eval");
    c.eval.emb_dim = get_int(je, "emb_dim");
    c.eval.width1 = get_int(je, "width1");
    c.eval.width2 = get_int(je, "width2");
    c.eval.metric_steps = get_int(je, "metric_steps");
    c.eval.clf_steps = get_int(je, "clf_steps");
    c.eval.metric_batch = get_int(je, "metric_batch");
    c.eval.clf_batch = get_int(je, "clf_batch");
    c.eval.lr = get_f64(je, "lr");
    c.eval.images_per_caption = get_int(je, "images_per_caption");
    c.eval.guidance = get_f64(je, "guidance");
    c.eval.log_every = get_int(je, "log_every");

    const json& js = j.at("seeds");
    c.seeds.data = get_u64(js, "data");
    c.seeds.lm = get_u64(js, "lm");
    c.seeds.base = get_u64(js, "base");
    c.seeds.adapter = get_u64(js, "adapter");
    c.seeds.metric = get_u64(js, "metric");
    c.seeds.clf = get_u64(js, "clf");
    c.seeds.sample = get_u64(js, "sample");
    c.seeds.eval = get_u64(js, "eval");
    return c;
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    json user;
    try {
        user = json::parse(text);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("config: invalid JSON: ") + e.what());
    }
    json merged = defaults_json();
    merge_checked(merged, user, "");
    return from_merged(merged);
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_json_text(ss.str());
}

std::string RunConfig::to_json_text() const {
    json j = defaults_json();
    // re-serialize the live values (the defaults skeleton fixes key order)
    j["data"]["n_scenes"] = data.n_scenes;
    j["data"]["img_size"] = data.img_size;
    j["lm"]["hidden"] = lm.hidden;
    j["lm"]["n_blocks"] = lm.n_blocks;
    j["lm"]["n_heads"] = lm.n_heads;
    j["lm"]["mlp_ratio"] = lm.mlp_ratio;
    j["lm"]["max_len"] = lm.max_len;
    j["lm"]["steps"] = lm.steps;
    j["lm"]["batch_size"] = lm.batch_size;
    j["lm"]["log_every"] = lm.log_every;
    j["lm"]["lr"] = lm.lr;
    j["diffusion"]["base_width"] = diffusion.base_width;
    j["diffusion"]["n_down"] = diffusion.n_down;
    j["diffusion"]["cond_dim"] = diffusion.cond_dim;
    j["diffusion"]["time_dim"] = diffusion.time_dim;
    j["diffusion"]["n_steps"] = diffusion.n_steps;
    j["diffusion"]["beta_start"] = diffusion.beta_start;
    j["diffusion"]["beta_end"] = diffusion.beta_end;
    j["diffusion"]["steps"] = diffusion.steps;
    j["diffusion"]["batch_size"] = diffusion.batch_size;
    j["diffusion"]["log_every"] = diffusion.log_every;
    j["diffusion"]["lr"] = diffusion.lr;
    j["adapter"]["init_a2"] = adapter.init_a2;
    j["adapter"]["steps"] = adapter.steps;
    j["adapter"]["batch_size"] = adapter.batch_size;
    j["adapter"]["log_every"] = adapter.log_every;
    j["adapter"]["lr"] = adapter.lr;
    j["eval"]["emb_dim"] = eval.emb_dim;
    j["eval"]["width1"] = eval.width1;
    j["eval"]["width2"] = eval.width2;
    j["eval"]["metric_steps"] = eval.metric_steps;
    j["eval"]["clf_steps"] = eval.clf_steps;
    j["eval"]["metric_batch"] = eval.metric_batch;
    j["eval"]["clf_batch"] = eval.clf_batch;
    j["eval"]["lr"] = eval.lr;
    j["eval"]["images_per_caption"] = eval.images_per_caption;
    j["eval"]["guidance"] = eval.guidance;
    j["eval"]["log_every"] = eval.log_every;
    j["seeds"]["data"] = seeds.data;
    j["seeds"]["lm"] = seeds.lm;
    j["seeds"]["base"] = seeds.base;
    j["seeds"]["adapter"] = seeds.adapter;
    j["seeds"]["metric"] = seeds.metric;
    j["seeds"]["clf"] = seeds.clf;
    j["seeds"]["sample"] = seeds.sample;
    j["seeds"]["eval"] = seeds.eval;
    return j.dump(2) + "\n";
}

}  // namespace lmdiff::cfg
