#pragma once

#include <deque>
#include <map>
#include <string>
#include <vector>

#include "rflow/sequence.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

struct ModelConfig {
    int dim = 36;
    int n_layers = 4;
    int n_heads = 2;
    int patch = 2;
    int lora_rank = 8;
    int max_conditions = kMaxConditions;
    int mlp_ratio = 3;
    int token_dim = 12;  // raw token width: image channels * patch^2
    int vocab_size = 25;
    double rope_base = 10000.0;
    double lora_scale = 1.0;

    int head_dim() const { return dim / n_heads; }
    void validate() const;
    uint64_t hash() const;
    bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup { Base, Lora, CondMap, CondEmbed };

struct Parameter {
    std::string name;
    ParamGroup group = ParamGroup::Base;
    Tensor value;  // grad-enabled
};

enum class TrainPolicy { FullModel, AdapterOnly };

// Per-layer capture of the joint-attention logit sub-blocks, averaged over
// heads and scaled by 1/sqrt(head_dim). Tensors stay connected to the tape,
// so routing losses backpropagate through them.
struct AttentionRecord {
    std::vector<Tensor> cond_to_noisy;        // per condition: [l_cond_k, l_noisy]
    std::vector<Tensor> cond_to_placeholder;  // per condition: [l_cond_k, n_placeholders]
    std::vector<int> placeholder_conditions;  // condition index per concatenated column
};

struct ForwardResult {
    Tensor velocity;  // [l_noisy, token_dim]
    std::vector<AttentionRecord> records;
};

// Applies the 3-axis rotary embedding to a [L, n_heads*head_dim] tensor.
// head_dim is split evenly across the axes; each axis uses a geometric
// frequency schedule with the given base. Position (0,0,0) is the identity.
Tensor apply_rope(const Tensor& qk, const std::vector<Pos3>& positions, int n_heads, double base = 10000.0);

// Sinusoidal features of a timestep in [0,1], shape [1, dim].
Tensor timestep_features(double t, int dim);

// Miniature diffusion transformer over a unified token sequence. Text, noisy
// and condition tokens enter through separate input maps; condition tokens
// additionally receive a trainable per-index embedding row. Joint pre-norm
// attention runs over the whole sequence with timestep shift/scale
// modulation, and the output head reads the noisy tokens back into patch
// space. LoRA adapters sit on every base linear layer.
class Model {
public:
    Model(ModelConfig cfg, uint64_t seed);

    ForwardResult forward(const TokenSequence& seq, double t, bool capture = false) const;

    const ModelConfig& config() const { return cfg_; }
    const Tensor& embedding_table() const;

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    std::vector<Parameter*> trainable_parameters(TrainPolicy policy, bool include_cond_embed = true);
    Parameter& param(const std::string& name);
    const Parameter& param(const std::string& name) const;
    bool has_param(const std::string& name) const;

    void zero_condition_embedding();

private:
    struct Linear {
        Parameter* w = nullptr;
        Parameter* b = nullptr;
        Parameter* lora_a = nullptr;
        Parameter* lora_b = nullptr;
    };

    Parameter& add_param(const std::string& name, ParamGroup group, Tensor value);
    Linear make_linear(const std::string& name, int out, int in, Rng& rng, bool with_lora);
    Tensor run_linear(const Linear& lin, const Tensor& x) const;

    ModelConfig cfg_;
    std::deque<Parameter> params_;
    std::map<std::string, Parameter*> index_;

    Linear txt_in_, img_in_, cond_map_, time_fc1_, time_fc2_, head_;
    struct Block {
        Linear q, k, v, o, fc1, fc2, mod;
    };
    std::vector<Block> blocks_;
    Linear final_mod_;
    Parameter* embed_ = nullptr;
    Parameter* cond_embed_ = nullptr;
};

}  // namespace rflow
