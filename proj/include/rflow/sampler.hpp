#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rflow/losses.hpp"
#include "rflow/model.hpp"
#include "rflow/scenes.hpp"

namespace rflow {

struct SamplerConfig {
    int steps = 20;
    uint64_t seed = 0;
    bool capture = false;  // record attention at the final step

    void validate() const;
};

// Velocity provider over token values; lets tests drop in exact oracles.
using VelocityFn = std::function<Tensor(const Tensor& z_t, double t)>;

// Euler integration of dz/dt = -v from t=1 (pure noise) to t=0 in `steps`
// uniform sub-intervals: z_{t-dt} = z_t + dt * v(z_t, t). With the exact
// velocity z0 - eps the path is a straight line and any step count lands on
// z0.
Tensor euler_solve(const VelocityFn& velocity, const Tensor& noise, int steps);

struct GenResult {
    Tensor image;                          // [3,H,W]
    Tensor z0_tokens;                      // [T, token_dim]
    std::vector<AttentionRecord> records;  // final-step capture
};

GenResult sample_image(const Model& model, const PromptSpec& prompt, const std::vector<Tensor>& cond_images,
                       int image_size, const SamplerConfig& cfg);

// ---- metrics --------------------------------------------------------------

// Response map for one condition: head-averaged condition-to-noisy logits,
// averaged over the condition-token axis, min-max normalized per layer and
// averaged over layers. Values lie in [0,1].
Tensor attention_response_map(const std::vector<AttentionRecord>& records, int cond_index, int n_noisy);

// The response map thresholded at 0.5, compared to the token mask by IoU.
double attention_iou(const std::vector<AttentionRecord>& records, int cond_index, const Tensor& token_mask);

// 1 - clamped mean absolute RGB error inside the mask.
double color_fidelity(const Tensor& image, const Tensor& mask, Color expected);

// Fraction of (layer, condition, token) argmaxes over the concatenated
// placeholder columns that select the bound placeholder; ties resolve toward
// the lower placeholder index.
double binding_accuracy(const std::vector<AttentionRecord>& records);

// Generator abstraction for the swap tests: returns the generated image for
// (scene, condition images in slot order, prompt).
using GenerateFn = std::function<Tensor(const SceneSpec& scene, const std::vector<Tensor>& conds,
                                        const PromptSpec& prompt)>;

struct SwapStats {
    double accuracy = 0.0;
    int ties = 0;
    int trials = 0;
};

// Generates each two-subject scene with conditions (A,B) and (B,A) under a
// fixed spatial-word/placeholder pairing. A generation counts as correct when
// every cell's mean color is nearest to the subject its placeholder
// references; the returned accuracy is the fraction of correct generations.
SwapStats swap_decoupling(const GenerateFn& generate, const std::vector<SceneSpec>& scenes);
SwapStats swap_decoupling(const Model& model, const std::vector<SceneSpec>& scenes, const SamplerConfig& cfg);

// Swaps the placeholders in the prompt while holding the conditions fixed;
// a trial succeeds when the subjects' cell assignment swaps accordingly
// (all four cell checks correct).
SwapStats placeholder_swap(const GenerateFn& generate, const std::vector<SceneSpec>& scenes);
SwapStats placeholder_swap(const Model& model, const std::vector<SceneSpec>& scenes, const SamplerConfig& cfg);

GenerateFn model_generator(const Model& model, const SamplerConfig& cfg);

struct EvalReport {
    std::vector<double> attention_iou_per_condition;
    double attention_iou_mean = 0.0;
    double subject_color_fidelity = 0.0;
    double swap_decoupling_accuracy = 0.0;
    double placeholder_binding_accuracy = 0.0;
    double placeholder_swap_rate = 0.0;
    std::vector<std::string> sample_files;

    void validate() const;  // every score in [0,1]
};

// Runs the whole metric suite on held-out scenes; when out_dir is non-empty,
// sampled images and attention heatmaps are written there.
EvalReport run_eval_suite(const Model& model, int n, uint64_t seed, const SamplerConfig& cfg, int image_size = 16,
                          const std::string& out_dir = "");

}  // namespace rflow
