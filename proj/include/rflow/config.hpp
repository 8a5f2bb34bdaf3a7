#pragma once

#include <stdexcept>
#include <string>

#include "json.hpp"
#include "rflow/trainer.hpp"

namespace rflow {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Everything one command needs, merged from built-in defaults, the config
// file and flag overrides. `effective` holds the merged JSON echo.
struct RunConfig {
    TrainerConfig trainer;
    Ablations ablations;
    int sampler_steps = 20;
    int eval_n = 50;
    uint64_t eval_seed = 1234;
    std::string out_root = "runs";
    std::string vocab_file;
    nlohmann::json effective;

    uint64_t hash() const;
    std::string run_dir() const;  // out_root/<16-hex config hash>
};

RunConfig default_run_config();

// Parses and validates the JSON config; unknown keys are rejected.
RunConfig load_run_config(const std::string& path);
RunConfig run_config_from_json(const nlohmann::json& j);

// Applies command-line overrides and recomputes the echo.
void override_seed(RunConfig& cfg, uint64_t seed);
void override_out(RunConfig& cfg, const std::string& out);
void override_ablate(RunConfig& cfg, const std::string& list);  // "no_ce,no_rc,no_pt"

}  // namespace rflow
