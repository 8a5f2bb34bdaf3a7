#include "rflow/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "rflow/rng.hpp"

namespace rflow {

namespace {

void check_keys(const nlohmann::json& obj, const std::string& ctx, const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw ConfigError("config: " + ctx + " must be an object");
    for (const auto& [key, value] : obj.items()) {
        if (!allowed.count(key)) throw ConfigError("config: unknown key '" + key + "' in " + ctx);
    }
}

template <class T>
T get_or(const nlohmann::json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config: bad value for '" + key + "'");
    }
}

LossWeights weights_from(const nlohmann::json& j, const LossWeights& fallback) {
    check_keys(j, "weights", {"diff", "route", "holder"});
    LossWeights w = fallback;
    w.diff = get_or(j, "diff", w.diff);
    w.route = get_or(j, "route", w.route);
    w.holder = get_or(j, "holder", w.holder);
    return w;
}

std::vector<StageConfig> default_stages() {
    StageConfig s0;
    s0.stage = 0;
    s0.iterations = 2000;
    s0.policy = TrainPolicy::FullModel;
    s0.weights = {1.0, 0.0, 0.0};
    s0.lr = 1e-3;
    StageConfig s1;
    s1.stage = 1;
    s1.iterations = 2000;
    s1.weights = {1.0, 0.1, 0.1};
    s1.lr = 1e-3;
    StageConfig s2 = s1;
    s2.stage = 2;
    s2.iterations = 6000;
    StageConfig s3;
    s3.stage = 3;
    s3.iterations = 500;
    s3.weights = {1.0, 0.0, 0.0};
    s3.drop_rate = 0.95;
    s3.lr = 1e-3;
    return {s0, s1, s2, s3};
}

nlohmann::json echo_config(const RunConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.trainer.seed;
    j["out"] = cfg.out_root;
    j["vocab_file"] = cfg.vocab_file;
    j["model"] = {{"dim", cfg.trainer.model.dim},
                  {"n_layers", cfg.trainer.model.n_layers},
                  {"n_heads", cfg.trainer.model.n_heads},
                  {"patch", cfg.trainer.model.patch},
                  {"lora_rank", cfg.trainer.model.lora_rank},
                  {"max_conditions", cfg.trainer.model.max_conditions},
                  {"mlp_ratio", cfg.trainer.model.mlp_ratio},
                  {"rope_base", cfg.trainer.model.rope_base},
                  {"lora_scale", cfg.trainer.model.lora_scale}};
    j["data"] = {{"image_size", cfg.trainer.image_size}, {"cond_size", cfg.trainer.cond_size}};
    j["train"] = {{"batch_size", cfg.trainer.batch_size},
                  {"beta1", cfg.trainer.beta1},
                  {"beta2", cfg.trainer.beta2},
                  {"adam_eps", cfg.trainer.adam_eps},
                  {"clip_norm", cfg.trainer.clip_norm},
                  {"checkpoint_every", cfg.trainer.checkpoint_every},
                  {"placeholder_free_prob", cfg.trainer.placeholder_free_prob},
                  {"minimal_prompt_prob", cfg.trainer.minimal_prompt_prob},
                  {"base_checkpoint", cfg.trainer.base_checkpoint}};
    j["stages"] = nlohmann::json::array();
    for (const auto& s : cfg.trainer.stages) {
        j["stages"].push_back({{"stage", s.stage},
                               {"iterations", s.iterations},
                               {"lr", s.lr},
                               {"drop_rate", s.drop_rate},
                               {"policy", s.policy == TrainPolicy::FullModel ? "full" : "adapter"},
                               {"weights", {{"diff", s.weights.diff}, {"route", s.weights.route}, {"holder", s.weights.holder}}}});
    }
    j["sampler"] = {{"steps", cfg.sampler_steps}};
    j["eval"] = {{"n", cfg.eval_n}, {"seed", cfg.eval_seed}};
    j["ablate"] = nlohmann::json::array();
    if (cfg.ablations.no_ce) j["ablate"].push_back("no_ce");
    if (cfg.ablations.no_rc) j["ablate"].push_back("no_rc");
    if (cfg.ablations.no_pt) j["ablate"].push_back("no_pt");
    return j;
}

}  // namespace

RunConfig default_run_config() {
    RunConfig cfg;
    cfg.trainer.model = ModelConfig{};
    cfg.trainer.stages = default_stages();
    cfg.effective = echo_config(cfg);
    return cfg;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig cfg = default_run_config();
    check_keys(j, "config", {"seed", "out", "vocab_file", "model", "data", "train", "stages", "sampler", "eval", "ablate"});

    cfg.trainer.seed = get_or<uint64_t>(j, "seed", cfg.trainer.seed);
    cfg.out_root = get_or<std::string>(j, "out", cfg.out_root);
    cfg.vocab_file = get_or<std::string>(j, "vocab_file", cfg.vocab_file);

    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, "model", {"dim", "n_layers", "n_heads", "patch", "lora_rank", "max_conditions", "mlp_ratio",
                                "rope_base", "lora_scale"});
        auto& mc = cfg.trainer.model;
        mc.dim = get_or(m, "dim", mc.dim);
        mc.n_layers = get_or(m, "n_layers", mc.n_layers);
        mc.n_heads = get_or(m, "n_heads", mc.n_heads);
        mc.patch = get_or(m, "patch", mc.patch);
        mc.lora_rank = get_or(m, "lora_rank", mc.lora_rank);
        mc.max_conditions = get_or(m, "max_conditions", mc.max_conditions);
        mc.mlp_ratio = get_or(m, "mlp_ratio", mc.mlp_ratio);
        mc.rope_base = get_or(m, "rope_base", mc.rope_base);
        mc.lora_scale = get_or(m, "lora_scale", mc.lora_scale);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d, "data", {"image_size", "cond_size"});
        cfg.trainer.image_size = get_or(d, "image_size", cfg.trainer.image_size);
        cfg.trainer.cond_size = get_or(d, "cond_size", cfg.trainer.cond_size);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t, "train", {"batch_size", "beta1", "beta2", "adam_eps", "clip_norm", "checkpoint_every",
                                "placeholder_free_prob", "minimal_prompt_prob", "base_checkpoint"});
        auto& tr = cfg.trainer;
        tr.batch_size = get_or(t, "batch_size", tr.batch_size);
        tr.beta1 = get_or(t, "beta1", tr.beta1);
        tr.beta2 = get_or(t, "beta2", tr.beta2);
        tr.adam_eps = get_or(t, "adam_eps", tr.adam_eps);
        tr.clip_norm = get_or(t, "clip_norm", tr.clip_norm);
        tr.checkpoint_every = get_or(t, "checkpoint_every", tr.checkpoint_every);
        tr.placeholder_free_prob = get_or(t, "placeholder_free_prob", tr.placeholder_free_prob);
        tr.minimal_prompt_prob = get_or(t, "minimal_prompt_prob", tr.minimal_prompt_prob);
        tr.base_checkpoint = get_or(t, "base_checkpoint", tr.base_checkpoint);
    }
    if (j.contains("stages")) {
        if (!j.at("stages").is_array() || j.at("stages").empty()) throw ConfigError("config: stages must be a non-empty array");
        std::vector<StageConfig> stages;
        for (const auto& s : j.at("stages")) {
            check_keys(s, "stage entry", {"stage", "iterations", "lr", "drop_rate", "policy", "weights"});
            StageConfig sc;
            sc.stage = get_or(s, "stage", -1);
            StageConfig defaults;
            for (const auto& d : default_stages())
                if (d.stage == sc.stage) defaults = d;
            sc.iterations = get_or(s, "iterations", defaults.stage == sc.stage ? defaults.iterations : 0);
            sc.lr = get_or(s, "lr", defaults.lr);
            sc.drop_rate = get_or(s, "drop_rate", defaults.stage == sc.stage ? defaults.drop_rate : 0.0);
            sc.weights = s.contains("weights") ? weights_from(s.at("weights"), defaults.weights) : defaults.weights;
            std::string policy = get_or<std::string>(s, "policy", sc.stage == 0 ? "full" : "adapter");
            if (policy != "full" && policy != "adapter") throw ConfigError("config: policy must be 'full' or 'adapter'");
            sc.policy = policy == "full" ? TrainPolicy::FullModel : TrainPolicy::AdapterOnly;
            stages.push_back(sc);
        }
        cfg.trainer.stages = std::move(stages);
    }
    if (j.contains("sampler")) {
        check_keys(j.at("sampler"), "sampler", {"steps"});
        cfg.sampler_steps = get_or(j.at("sampler"), "steps", cfg.sampler_steps);
        if (cfg.sampler_steps < 1) throw ConfigError("config: sampler steps must be >= 1");
    }
    if (j.contains("eval")) {
        check_keys(j.at("eval"), "eval", {"n", "seed"});
        cfg.eval_n = get_or(j.at("eval"), "n", cfg.eval_n);
        cfg.eval_seed = get_or<uint64_t>(j.at("eval"), "seed", cfg.eval_seed);
        if (cfg.eval_n < 1) throw ConfigError("config: eval n must be >= 1");
    }
    if (j.contains("ablate")) {
        for (const auto& a : j.at("ablate")) override_ablate(cfg, a.get<std::string>());
    }

    // derived fields
    auto& mc = cfg.trainer.model;
    mc.token_dim = 3 * mc.patch * mc.patch;
    Vocab vocab = cfg.vocab_file.empty() ? Vocab::builtin() : Vocab::from_file(cfg.vocab_file);
    mc.vocab_size = vocab.size();

    try {
        cfg.trainer.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    cfg.effective = echo_config(cfg);
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    if (path.empty()) return default_run_config();
    std::ifstream in(path);
    if (!in) throw MissingInput("config file not found: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    return run_config_from_json(j);
}

uint64_t RunConfig::hash() const { return fnv1a(effective.dump()); }

std::string RunConfig::run_dir() const {
    std::ostringstream os;
    os << out_root << "/" << std::hex << std::setw(16) << std::setfill('0') << hash();
    return os.str();
}

void override_seed(RunConfig& cfg, uint64_t seed) {
    cfg.trainer.seed = seed;
    cfg.effective = echo_config(cfg);
}

void override_out(RunConfig& cfg, const std::string& out) {
    cfg.out_root = out;
    cfg.effective = echo_config(cfg);
}

void override_ablate(RunConfig& cfg, const std::string& list) {
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        if (item == "no_ce")
            cfg.ablations.no_ce = true;
        else if (item == "no_rc")
            cfg.ablations.no_rc = true;
        else if (item == "no_pt")
            cfg.ablations.no_pt = true;
        else
            throw ConfigError("config: unknown ablation '" + item + "' (use no_ce, no_rc, no_pt)");
    }
    cfg.effective = echo_config(cfg);
}

}  // namespace rflow
