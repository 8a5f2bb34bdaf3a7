#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rflow/checkpoint.hpp"
#include "rflow/losses.hpp"
#include "rflow/model.hpp"
#include "rflow/scenes.hpp"

namespace rflow {

struct StageConfig {
    int stage = 1;  // data recipe id, 0..3
    int iterations = 0;
    LossWeights weights;
    double drop_rate = 0.0;  // reference-token dropping (0.95 for stage 3)
    TrainPolicy policy = TrainPolicy::AdapterOnly;
    double lr = 1e-3;
    bool mixed_recipe = false;            // draw from recipes 1..3 instead
    std::vector<double> mix_shares = {};  // sampling weights for recipes 1..3

    void validate() const;
};

struct TrainerConfig {
    ModelConfig model;
    std::vector<StageConfig> stages;
    int batch_size = 8;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    int image_size = 16;
    int cond_size = 8;
    uint64_t seed = 0;
    double placeholder_free_prob = 0.5;
    double minimal_prompt_prob = 0.5;
    int checkpoint_every = 1000;
    std::string out_dir;          // empty: keep everything in memory
    std::string base_checkpoint;  // optional warm start replacing stage 0

    void validate() const;
    uint64_t hash() const;  // covers every field that affects the run
};

struct Ablations {
    bool no_ce = false;  // zero and freeze the condition embedding table
    bool no_rc = false;  // drop both routing losses
    bool no_pt = false;  // collapse stages 1..3 into one mixed stage

    uint64_t hash() const;
};

struct MetricPoint {
    int64_t step = 0;  // global step across stages
    int stage = 0;
    double l_diff = 0, l_route = 0, l_holder = 0, total = 0;
};

struct AdamState {
    std::map<std::string, std::vector<double>> m, v;
    int64_t t = 0;
};

// Bias-corrected Adam over the given parameters; gradients are read from the
// parameters' grad buffers. Throws on non-finite gradients.
void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

struct TrainState {
    int stage_index = 0;
    int64_t step = 0;  // within the current stage
    AdamState adam;
    std::vector<MetricPoint> history;
};

// Mean total loss over the last `window` points of history (or fewer).
double smoothed_total(const std::vector<MetricPoint>& history, int window = 100);
double smoothed_total_first(const std::vector<MetricPoint>& history, int window = 100);

struct CheckpointMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Trainer {
public:
    Trainer(TrainerConfig cfg, Ablations ablations = {});

    Model& model() { return model_; }
    const TrainerConfig& config() const { return cfg_; }  // effective, post-ablation
    TrainState& state() { return state_; }
    const Ablations& ablations() const { return ablations_; }

    // Runs the current stage to completion (or max_steps more steps).
    void run_stage(int64_t max_steps = -1);
    // Runs every remaining stage.
    void run_all();
    bool finished() const { return state_.stage_index >= static_cast<int>(cfg_.stages.size()); }

    Sample draw_sample(const StageConfig& sc, int64_t index) const;

    Checkpoint train_checkpoint() const;
    void save_train_checkpoint(const std::string& path) const;
    void resume_from(const Checkpoint& ckpt);

    // Deterministic flow-matching MSE of the current weights on a held-out
    // slice of a stage recipe.
    double eval_flow_mse(int stage, int n, uint64_t eval_seed) const;


    int64_t global_step() const;

private:
    void append_metrics(const MetricPoint& p);
    std::vector<Parameter*> trainable_for(const StageConfig& sc);

    TrainerConfig cfg_;
    Ablations ablations_;
    Vocab vocab_;
    Model model_;
    TrainState state_;
    std::ofstream metrics_file_;
};

// Applies the ablation switches to a schedule: no_rc zeroes the routing
// weights, no_pt collapses the adapter stages into one mixed stage of equal
// total iterations (data mixed in the original stages' proportions).
TrainerConfig apply_ablations(TrainerConfig cfg, const Ablations& ablations);

// Held-out flow-matching MSE of a model on a stage recipe, independent of any
// trainer instance.
double eval_flow_mse(const Model& model, int stage, int n, uint64_t eval_seed, int image_size = 16, int cond_size = 8);

}  // namespace rflow
