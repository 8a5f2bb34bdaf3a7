#pragma once

#include <vector>

#include "rflow/model.hpp"
#include "rflow/rng.hpp"
#include "rflow/scenes.hpp"
#include "rflow/sequence.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

struct LossWeights {
    double diff = 1.0;
    double route = 0.1;
    double holder = 0.1;

    void validate() const;
};

// Pixel mask [1,H,W] -> token-grid mask [gh*gw] by majority pooling over each
// patch (ties count as inside), binarized to {0,1}.
Tensor mask_to_token_grid(const Tensor& pixel_mask, int patch);

struct FlowPair {
    Tensor z_t;     // (1-t) z0 + t noise
    Tensor target;  // z0 - noise, the regression target for the velocity
};

FlowPair flow_sample(const Tensor& z0, const Tensor& noise, double t);

Tensor loss_diff(const Tensor& pred, const Tensor& target);

// Mean over layers and conditions of the MSE between the per-condition
// response map (condition-to-noisy logits averaged over condition tokens)
// and the binary token-grid mask.
Tensor loss_route(const std::vector<AttentionRecord>& records, const std::vector<Tensor>& masks);

// Softmax over the concatenated placeholder columns per condition token,
// squared error against the one-hot row of the matching placeholder
// (uniform-zero when a condition has no placeholder), averaged over tokens,
// conditions and layers.
Tensor loss_holder(const std::vector<AttentionRecord>& records);

struct LossBreakdown {
    double diff = 0.0;
    double route = 0.0;
    double holder = 0.0;
    double total = 0.0;
    bool has_route = false;
    bool has_holder = false;
    bool used_placeholders = false;
};

struct CombinedLossConfig {
    LossWeights weights;
    double placeholder_free_prob = 0.5;  // probability of the plain-text prompt
    double minimal_prompt_prob = 0.5;    // within placeholder prompts: appearance-free variant
    bool use_conditions = true;          // text-to-image pretraining turns this off
    double extra_drop_rate = 0.0;        // stage-level drop on top of the sample's own rate
};

// One training term for one sample: draws the timestep, noise, prompt variant
// and condition-token dropping from `rng` (in that order), runs the model and
// combines the three losses. The returned scalar stays on the active tape.
Tensor combined_loss(const Sample& sample, const Model& model, const Vocab& vocab, const CombinedLossConfig& cfg,
                     Rng& rng, LossBreakdown* breakdown = nullptr);

}  // namespace rflow
