#pragma once

#include <map>
#include <string>

#include "rflow/model.hpp"

namespace rflow {

// Little-endian binary container. Layout (see docs/checkpoint.md):
//   magic "RFLW" | version u32 | config block | array count u32 |
//   repeated { name_len u32, name bytes, ndim u32, dims u32..., f64 data }
// Arrays are written in name order, so identical contents give identical
// bytes.
struct Checkpoint {
    static constexpr uint32_t kVersion = 1;

    ModelConfig config;
    std::map<std::string, Tensor> arrays;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

    // Convenience for scalar metadata stored as 1-element arrays.
    void set_meta(const std::string& name, double v);
    double meta(const std::string& name) const;
    bool has(const std::string& name) const { return arrays.count(name) > 0; }
};

// Weights-only checkpoint of a model.
Checkpoint snapshot_model(const Model& model);

// Restores every model parameter from the checkpoint; shapes and the config
// hash must match.
void restore_model(Model& model, const Checkpoint& ckpt);

// Builds a fresh model from a checkpoint (seed only affects construction
// scratch, every parameter is overwritten).
Model model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace rflow
