#include "rflow/trainer.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <stdexcept>

namespace rflow {

namespace {

uint64_t mix_hash(uint64_t h, uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
}

uint64_t double_bits(double v) {
    uint64_t b;
    std::memcpy(&b, &v, sizeof(b));
    return b;
}

double bits_double(uint64_t b) {
    double v;
    std::memcpy(&v, &b, sizeof(v));
    return v;
}

uint64_t stage_step_key(int stage_index, int64_t step) {
    return (static_cast<uint64_t>(stage_index) << 40) | static_cast<uint64_t>(step);
}

}  // namespace

void StageConfig::validate() const {
    if (stage < 0 || stage > 3) throw std::invalid_argument("stage config: recipe id must be 0..3");
    if (iterations <= 0) throw std::invalid_argument("stage config: iterations must be positive");
    if (drop_rate < 0.0 || drop_rate >= 1.0) throw std::invalid_argument("stage config: drop_rate must be in [0,1)");
    if (lr <= 0.0) throw std::invalid_argument("stage config: learning rate must be positive");
    weights.validate();
    if (mixed_recipe && mix_shares.size() != 3) throw std::invalid_argument("stage config: mixed recipe needs 3 shares");
}

void TrainerConfig::validate() const {
    model.validate();
    if (stages.empty()) throw std::invalid_argument("trainer config: no stages");
    for (const auto& s : stages) s.validate();
    if (batch_size < 1) throw std::invalid_argument("trainer config: batch size must be >= 1");
    if (image_size % model.patch != 0 || cond_size % model.patch != 0)
        throw std::invalid_argument("trainer config: image sizes must be divisible by the patch size");
    if (cond_size > image_size) throw std::invalid_argument("trainer config: condition image larger than the target");
    if (model.token_dim != 3 * model.patch * model.patch)
        throw std::invalid_argument("trainer config: token_dim must equal 3*patch^2");
    if (checkpoint_every < 1) throw std::invalid_argument("trainer config: checkpoint_every must be >= 1");
}

uint64_t TrainerConfig::hash() const {
    uint64_t h = model.hash();
    for (const auto& s : stages) {
        h = mix_hash(h, static_cast<uint64_t>(s.stage));
        h = mix_hash(h, static_cast<uint64_t>(s.iterations));
        h = mix_hash(h, double_bits(s.weights.diff));
        h = mix_hash(h, double_bits(s.weights.route));
        h = mix_hash(h, double_bits(s.weights.holder));
        h = mix_hash(h, double_bits(s.drop_rate));
        h = mix_hash(h, static_cast<uint64_t>(s.policy));
        h = mix_hash(h, double_bits(s.lr));
        h = mix_hash(h, s.mixed_recipe ? 1 : 0);
        for (double v : s.mix_shares) h = mix_hash(h, double_bits(v));
    }
    h = mix_hash(h, static_cast<uint64_t>(batch_size));
    h = mix_hash(h, double_bits(beta1));
    h = mix_hash(h, double_bits(beta2));
    h = mix_hash(h, double_bits(adam_eps));
    h = mix_hash(h, double_bits(clip_norm));
    h = mix_hash(h, static_cast<uint64_t>(image_size));
    h = mix_hash(h, static_cast<uint64_t>(cond_size));
    h = mix_hash(h, seed);
    h = mix_hash(h, double_bits(placeholder_free_prob));
    h = mix_hash(h, double_bits(minimal_prompt_prob));
    return h;
}

uint64_t Ablations::hash() const {
    return (no_ce ? 1u : 0u) | (no_rc ? 2u : 0u) | (no_pt ? 4u : 0u);
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (auto* p : params) {
        const auto& g = *p->value.grad;
        auto& m = state.m[p->name];
        auto& v = state.v[p->name];
        if (m.empty()) m.assign(g.size(), 0.0);
        if (v.empty()) v.assign(g.size(), 0.0);
        auto& w = *p->value.data;
        for (size_t i = 0; i < g.size(); ++i) {
            if (!std::isfinite(g[i]))
                throw std::runtime_error("adam_step: non-finite gradient in " + p->name + " at element " +
                                         std::to_string(i));
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
}

double smoothed_total(const std::vector<MetricPoint>& history, int window) {
    if (history.empty()) throw std::invalid_argument("smoothed_total: empty history");
    const size_t n = std::min<size_t>(static_cast<size_t>(window), history.size());
    double acc = 0;
    for (size_t i = history.size() - n; i < history.size(); ++i) acc += history[i].total;
    return acc / static_cast<double>(n);
}

double smoothed_total_first(const std::vector<MetricPoint>& history, int window) {
    if (history.empty()) throw std::invalid_argument("smoothed_total_first: empty history");
    const size_t n = std::min<size_t>(static_cast<size_t>(window), history.size());
    double acc = 0;
    for (size_t i = 0; i < n; ++i) acc += history[i].total;
    return acc / static_cast<double>(n);
}

TrainerConfig apply_ablations(TrainerConfig cfg, const Ablations& ablations) {
    if (ablations.no_rc) {
        for (auto& s : cfg.stages) {
            s.weights.route = 0.0;
            s.weights.holder = 0.0;
        }
    }
    if (ablations.no_pt) {
        std::vector<StageConfig> kept;
        StageConfig mixed;
        mixed.mixed_recipe = true;
        mixed.stage = 2;  // nominal id for logging
        mixed.iterations = 0;
        mixed.mix_shares = {0, 0, 0};
        bool any = false;
        for (const auto& s : cfg.stages) {
            if (s.stage == 0) {
                kept.push_back(s);
                continue;
            }
            if (!any) {
                mixed.weights = s.weights;
                mixed.policy = s.policy;
                mixed.lr = s.lr;
            }
            // keep stage 2's weights when present (the full-data stage)
            if (s.stage == 2) {
                mixed.weights = s.weights;
                mixed.policy = s.policy;
                mixed.lr = s.lr;
            }
            if (s.stage >= 1 && s.stage <= 3) {
                mixed.mix_shares[static_cast<size_t>(s.stage - 1)] += s.iterations;
                if (s.stage == 3) mixed.drop_rate = std::max(mixed.drop_rate, s.drop_rate);
            }
            mixed.iterations += s.iterations;
            any = true;
        }
        if (any) kept.push_back(mixed);
        cfg.stages = std::move(kept);
    }
    return cfg;
}

Trainer::Trainer(TrainerConfig cfg, Ablations ablations)
    : cfg_(apply_ablations(std::move(cfg), ablations)), ablations_(ablations), vocab_(Vocab::builtin()),
      model_(cfg_.model, cfg_.seed) {
    cfg_.validate();
    if (cfg_.model.vocab_size < vocab_.size()) throw std::invalid_argument("trainer: model vocab smaller than vocabulary");
    if (!cfg_.base_checkpoint.empty()) {
        restore_model(model_, Checkpoint::load(cfg_.base_checkpoint));
        // the warm start replaces stage 0
        std::vector<StageConfig> rest;
        for (const auto& s : cfg_.stages)
            if (s.stage != 0) rest.push_back(s);
        cfg_.stages = std::move(rest);
        if (cfg_.stages.empty()) throw std::invalid_argument("trainer: nothing to run after the warm start");
    }
    if (ablations_.no_ce) model_.zero_condition_embedding();
    if (!cfg_.out_dir.empty()) {
        std::filesystem::create_directories(cfg_.out_dir);
        metrics_file_.open(cfg_.out_dir + "/metrics.jsonl", std::ios::trunc);
        if (!metrics_file_) throw std::runtime_error("trainer: cannot open metrics file");
    }
}

std::vector<Parameter*> Trainer::trainable_for(const StageConfig& sc) {
    return model_.trainable_parameters(sc.policy, !ablations_.no_ce);
}

Sample Trainer::draw_sample(const StageConfig& sc, int64_t index) const {
    int recipe = sc.stage;
    if (sc.mixed_recipe) {
        Rng rng = Rng::stream(cfg_.seed, "mix", static_cast<uint64_t>(index));
        const double total = sc.mix_shares[0] + sc.mix_shares[1] + sc.mix_shares[2];
        double u = rng.uniform() * total;
        recipe = u < sc.mix_shares[0] ? 1 : (u < sc.mix_shares[0] + sc.mix_shares[1] ? 2 : 3);
    }
    return stage_sample(recipe, cfg_.seed, index, cfg_.image_size, cfg_.cond_size, sc.drop_rate);
}

int64_t Trainer::global_step() const {
    int64_t base = 0;
    for (int i = 0; i < state_.stage_index && i < static_cast<int>(cfg_.stages.size()); ++i)
        base += cfg_.stages[static_cast<size_t>(i)].iterations;
    return base + state_.step;
}

void Trainer::append_metrics(const MetricPoint& p) {
    state_.history.push_back(p);
    if (metrics_file_.is_open()) {
        std::ostringstream line;
        line.precision(17);
        line << "{\"step\":" << p.step << ",\"stage\":" << p.stage << ",\"l_diff\":" << p.l_diff
             << ",\"l_route\":" << p.l_route << ",\"l_holder\":" << p.l_holder << ",\"total\":" << p.total << "}\n";
        metrics_file_ << line.str();
        metrics_file_.flush();
    }
}

void Trainer::run_stage(int64_t max_steps) {
    if (finished()) return;
    const StageConfig& sc = cfg_.stages[static_cast<size_t>(state_.stage_index)];
    auto trainable = trainable_for(sc);
    // frozen parameters drop their grad buffers so the tape skips their vjps
    for (auto* p : model_.parameters()) p->value.grad.reset();
    for (auto* p : trainable) p->value.enable_grad();
    CombinedLossConfig lc;
    lc.weights = sc.weights;
    lc.placeholder_free_prob = cfg_.placeholder_free_prob;
    lc.minimal_prompt_prob = cfg_.minimal_prompt_prob;
    lc.use_conditions = sc.stage != 0;
    lc.extra_drop_rate = sc.mixed_recipe ? 0.0 : sc.drop_rate;

    // frozen weights must stay bit-identical, so only trainable grads exist
    int64_t done = 0;
    while (state_.step < sc.iterations && (max_steps < 0 || done < max_steps)) {
        for (auto* p : trainable) p->value.zero_grad();

        MetricPoint point;
        point.step = global_step() + 1;
        point.stage = sc.stage;
        int route_n = 0, holder_n = 0;
        for (int b = 0; b < cfg_.batch_size; ++b) {
            const int64_t index = state_.step * cfg_.batch_size + b;
            Sample sample = draw_sample(sc, index);
            Rng rng = Rng::stream(cfg_.seed, "train", stage_step_key(state_.stage_index, state_.step),
                                  static_cast<uint64_t>(b));
            LossBreakdown bd;
            TapeScope scope;
            Tensor total = combined_loss(sample, model_, vocab_, lc, rng, &bd);
            if (!std::isfinite(bd.total)) throw std::runtime_error("trainer: non-finite loss at step " + std::to_string(point.step));
            backward(scale(total, 1.0 / cfg_.batch_size));
            point.l_diff += bd.diff;
            point.total += bd.total;
            if (bd.has_route) {
                point.l_route += bd.route;
                ++route_n;
            }
            if (bd.has_holder) {
                point.l_holder += bd.holder;
                ++holder_n;
            }
        }
        point.l_diff /= cfg_.batch_size;
        point.total /= cfg_.batch_size;
        point.l_route = route_n ? point.l_route / route_n : 0.0;
        point.l_holder = holder_n ? point.l_holder / holder_n : 0.0;

        if (cfg_.clip_norm > 0.0) {
            double norm2 = 0.0;
            for (auto* p : trainable)
                for (double g : *p->value.grad) norm2 += g * g;
            const double norm = std::sqrt(norm2);
            if (norm > cfg_.clip_norm) {
                const double s = cfg_.clip_norm / norm;
                for (auto* p : trainable)
                    for (double& g : *p->value.grad) g *= s;
            }
        }
        adam_step(trainable, state_.adam, sc.lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps);

        ++state_.step;
        ++done;
        append_metrics(point);

        if (!cfg_.out_dir.empty() && (state_.step % cfg_.checkpoint_every == 0)) {
            std::ostringstream name;
            name << cfg_.out_dir << "/stage" << sc.stage << "_step" << state_.step << ".ckpt";
            save_train_checkpoint(name.str());
        }
    }

    if (state_.step >= sc.iterations) {
        if (!cfg_.out_dir.empty())
            save_train_checkpoint(cfg_.out_dir + "/stage" + std::to_string(sc.stage) + ".ckpt");
        ++state_.stage_index;
        state_.step = 0;
    }
}

void Trainer::run_all() {
    while (!finished()) run_stage();
    if (!cfg_.out_dir.empty()) save_train_checkpoint(cfg_.out_dir + "/final.ckpt");
}

Checkpoint Trainer::train_checkpoint() const {
    Checkpoint ckpt = snapshot_model(model_);
    for (const auto& [name, m] : state_.adam.m) ckpt.arrays["opt.m." + name] = Tensor::from({static_cast<int>(m.size())}, m);
    for (const auto& [name, v] : state_.adam.v) ckpt.arrays["opt.v." + name] = Tensor::from({static_cast<int>(v.size())}, v);
    ckpt.set_meta("train.adam_t", static_cast<double>(state_.adam.t));
    ckpt.set_meta("train.stage_index", static_cast<double>(state_.stage_index));
    ckpt.set_meta("train.step", static_cast<double>(state_.step));
    ckpt.set_meta("train.seed", bits_double(cfg_.seed));
    ckpt.set_meta("train.config_hash", bits_double(cfg_.hash()));
    ckpt.set_meta("train.ablations", static_cast<double>(ablations_.hash()));
    return ckpt;
}

void Trainer::save_train_checkpoint(const std::string& path) const { train_checkpoint().save(path); }

void Trainer::resume_from(const Checkpoint& ckpt) {
    if (!ckpt.has("train.config_hash")) throw CheckpointMismatch("resume: not a training checkpoint");
    if (double_bits(ckpt.meta("train.config_hash")) != cfg_.hash())
        throw CheckpointMismatch("resume: training configuration does not match the checkpoint");
    if (static_cast<uint64_t>(ckpt.meta("train.ablations")) != ablations_.hash())
        throw CheckpointMismatch("resume: ablation switches do not match the checkpoint");
    restore_model(model_, ckpt);
    state_ = TrainState{};
    state_.stage_index = static_cast<int>(ckpt.meta("train.stage_index"));
    state_.step = static_cast<int64_t>(ckpt.meta("train.step"));
    state_.adam.t = static_cast<int64_t>(ckpt.meta("train.adam_t"));
    for (const auto& [name, tensor] : ckpt.arrays) {
        if (name.rfind("opt.m.", 0) == 0) state_.adam.m[name.substr(6)] = *tensor.data;
        if (name.rfind("opt.v.", 0) == 0) state_.adam.v[name.substr(6)] = *tensor.data;
    }
}

double Trainer::eval_flow_mse(int stage, int n, uint64_t eval_seed) const {
    return rflow::eval_flow_mse(model_, stage, n, eval_seed, cfg_.image_size, cfg_.cond_size);
}

double eval_flow_mse(const Model& model, int stage, int n, uint64_t eval_seed, int image_size, int cond_size) {
    const Vocab vocab = Vocab::builtin();
    CombinedLossConfig lc;
    lc.weights = LossWeights{1.0, 0.0, 0.0};
    lc.use_conditions = stage != 0;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        Sample sample = stage_sample(stage, eval_seed, i, image_size, cond_size);
        Rng rng = Rng::stream(eval_seed, "eval-mse", static_cast<uint64_t>(i));
        LossBreakdown bd;
        combined_loss(sample, model, vocab, lc, rng, &bd);
        acc += bd.diff;
    }
    return acc / n;
}

}  // namespace rflow
