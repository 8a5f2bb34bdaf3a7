#include "rflow/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "rflow/checkpoint.hpp"
#include "rflow/config.hpp"
#include "rflow/image_io.hpp"
#include "rflow/sampler.hpp"
#include "rflow/trainer.hpp"

namespace rflow {

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitCheckpoint = 3;
constexpr int kExitMissing = 4;

void append_log(const std::string& run_dir, const std::string& message) {
    std::ofstream log(run_dir + "/run.log", std::ios::app);
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[64];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
    log << buf << " " << message << "\n";
}

void write_config_echo(const RunConfig& cfg, const std::string& run_dir) {
    std::filesystem::create_directories(run_dir);
    write_text_file(run_dir + "/config.json", cfg.effective.dump(2) + "\n");
}

Checkpoint load_checkpoint_or_missing(const std::string& path) {
    if (!std::filesystem::exists(path)) throw MissingInput("checkpoint not found: " + path);
    return Checkpoint::load(path);
}

struct CommonFlags {
    std::string config_path;
    std::string out;
    int64_t seed = -1;
    std::string ablate;
};

RunConfig resolve_config(const CommonFlags& flags) {
    RunConfig cfg = load_run_config(flags.config_path);
    if (flags.seed >= 0) override_seed(cfg, static_cast<uint64_t>(flags.seed));
    if (!flags.out.empty()) override_out(cfg, flags.out);
    if (!flags.ablate.empty()) override_ablate(cfg, flags.ablate);
    return cfg;
}

int cmd_train(const CommonFlags& flags, const std::string& resume_path, const std::string& base_path, int max_stage,
              bool pretrain_only) {
    RunConfig cfg = resolve_config(flags);
    if (!base_path.empty()) cfg.trainer.base_checkpoint = base_path;
    if (pretrain_only) {
        std::vector<StageConfig> kept;
        for (const auto& s : cfg.trainer.stages)
            if (s.stage == 0) kept.push_back(s);
        if (kept.empty()) throw ConfigError("pretrain: configuration has no stage 0");
        cfg.trainer.stages = kept;
    } else if (max_stage >= 0) {
        std::vector<StageConfig> kept;
        for (const auto& s : cfg.trainer.stages)
            if (s.stage <= max_stage) kept.push_back(s);
        if (kept.empty()) throw ConfigError("train: --stage filter removed every stage");
        cfg.trainer.stages = kept;
    }

    const std::string run_dir = cfg.run_dir();
    write_config_echo(cfg, run_dir);
    append_log(run_dir, pretrain_only ? "pretrain start" : "train start");
    cfg.trainer.out_dir = run_dir;

    Trainer trainer(cfg.trainer, cfg.ablations);
    if (!resume_path.empty()) trainer.resume_from(load_checkpoint_or_missing(resume_path));
    while (!trainer.finished()) {
        trainer.run_stage();
        std::cout << "stage complete; global step " << trainer.global_step() << "\n";
    }
    trainer.save_train_checkpoint(run_dir + "/final.ckpt");
    append_log(run_dir, "train end");
    std::cout << "run dir: " << run_dir << "\n";
    std::cout << "final checkpoint: " << run_dir + "/final.ckpt" << "\n";
    return 0;
}

int cmd_sample(const CommonFlags& flags, const std::string& checkpoint, uint64_t scene_seed, int subjects,
               const std::string& prompt_words, int steps) {
    RunConfig cfg = resolve_config(flags);
    Checkpoint ckpt = load_checkpoint_or_missing(checkpoint);
    Model model = model_from_checkpoint(ckpt);

    const std::string run_dir = cfg.run_dir() + "/sample";
    write_config_echo(cfg, cfg.run_dir());
    std::filesystem::create_directories(run_dir);

    SceneSpec scene = eval_scene(subjects, cfg.trainer.image_size, scene_seed);
    Sample sample = generate(scene, cfg.trainer.cond_size);
    PromptSpec prompt = sample.prompt_full_ph;
    if (!prompt_words.empty()) {
        Vocab vocab = cfg.vocab_file.empty() ? Vocab::builtin() : Vocab::from_file(cfg.vocab_file);
        prompt.word_ids.clear();
        std::stringstream ss(prompt_words);
        std::string word;
        bool any_ph = false;
        while (ss >> word) {
            int id = vocab.id(word);
            prompt.word_ids.push_back(id);
            any_ph = any_ph || vocab.is_placeholder(id);
        }
        prompt.has_placeholders = any_ph;
    }

    SamplerConfig sc;
    sc.steps = steps > 0 ? steps : cfg.sampler_steps;
    sc.seed = cfg.trainer.seed;
    sc.capture = true;
    GenResult gen = sample_image(model, prompt, sample.cond_images, cfg.trainer.image_size, sc);

    write_ppm(run_dir + "/generated.ppm", gen.image);
    write_ppm(run_dir + "/target.ppm", sample.target);
    for (size_t k = 0; k < sample.cond_images.size(); ++k)
        write_ppm(run_dir + "/condition" + std::to_string(k) + ".ppm", sample.cond_images[k]);
    const int grid = cfg.trainer.image_size / model.config().patch;
    for (size_t k = 0; k < sample.cond_images.size(); ++k) {
        Tensor rmap = attention_response_map(gen.records, static_cast<int>(k), grid * grid);
        write_pgm(run_dir + "/attention" + std::to_string(k) + ".pgm", Tensor::from({grid, grid}, *rmap.data));
    }
    std::cout << "wrote " << run_dir << "/generated.ppm\n";
    return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint, int n, int steps) {
    RunConfig cfg = resolve_config(flags);
    Checkpoint ckpt = load_checkpoint_or_missing(checkpoint);
    Model model = model_from_checkpoint(ckpt);

    const std::string run_dir = cfg.run_dir() + "/eval";
    write_config_echo(cfg, cfg.run_dir());

    SamplerConfig sc;
    sc.steps = steps > 0 ? steps : cfg.sampler_steps;
    sc.seed = cfg.trainer.seed;
    EvalReport report = run_eval_suite(model, n > 0 ? n : cfg.eval_n, cfg.eval_seed, sc, cfg.trainer.image_size, run_dir);

    nlohmann::json j;
    j["attention_iou"] = report.attention_iou_per_condition;
    j["attention_iou_mean"] = report.attention_iou_mean;
    j["subject_color_fidelity"] = report.subject_color_fidelity;
    j["swap_decoupling_accuracy"] = report.swap_decoupling_accuracy;
    j["placeholder_binding_accuracy"] = report.placeholder_binding_accuracy;
    j["placeholder_swap_rate"] = report.placeholder_swap_rate;
    j["samples"] = report.sample_files;
    write_text_file(run_dir + "/report.json", j.dump(2) + "\n");

    std::cout << "metric                         value\n";
    std::cout << "attention_iou_mean             " << report.attention_iou_mean << "\n";
    std::cout << "subject_color_fidelity         " << report.subject_color_fidelity << "\n";
    std::cout << "swap_decoupling_accuracy       " << report.swap_decoupling_accuracy << "\n";
    std::cout << "placeholder_binding_accuracy   " << report.placeholder_binding_accuracy << "\n";
    std::cout << "placeholder_swap_rate          " << report.placeholder_swap_rate << "\n";
    std::cout << "report: " << run_dir << "/report.json\n";
    return 0;
}

int cmd_gen_data(const CommonFlags& flags, int stage, int n) {
    RunConfig cfg = resolve_config(flags);
    const std::string run_dir = cfg.run_dir() + "/data_stage" + std::to_string(stage);
    write_config_echo(cfg, cfg.run_dir());
    std::filesystem::create_directories(run_dir);
    for (int i = 0; i < n; ++i) {
        Sample s = stage_sample(stage, cfg.trainer.seed, i, cfg.trainer.image_size, cfg.trainer.cond_size);
        std::ostringstream name;
        name << run_dir << "/sample_" << std::setw(5) << std::setfill('0') << i;
        export_sample(s, name.str());
        write_ppm(name.str() + "_target.ppm", s.target);
        for (size_t k = 0; k < s.masks.size(); ++k)
            write_pgm(name.str() + "_mask" + std::to_string(k) + ".pgm", s.masks[k]);
    }
    std::cout << "wrote " << n << " samples to " << run_dir << "\n";
    return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
    CLI::App app{"conditioned flow-matching transformer testbed"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::string resume_path, base_path, checkpoint, prompt_words;
    uint64_t scene_seed = 0;
    int subjects = 1, steps = -1, n = -1, stage = 1, max_stage = -1;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", flags.config_path, "JSON config file");
        cmd->add_option("--seed", flags.seed, "master seed override");
        cmd->add_option("--out", flags.out, "output root directory");
        cmd->add_option("--ablate", flags.ablate, "comma list: no_ce,no_rc,no_pt");
    };

    auto* pretrain = app.add_subcommand("pretrain", "train the text-to-image base (stage 0 only)");
    add_common(pretrain);
    pretrain->add_option("--resume", resume_path, "resume from a training checkpoint");

    auto* train = app.add_subcommand("train", "run the progressive schedule");
    add_common(train);
    train->add_option("--resume", resume_path, "resume from a training checkpoint");
    train->add_option("--base", base_path, "base checkpoint replacing stage 0");
    train->add_option("--stage", max_stage, "run stages up to this id only");

    auto* sample = app.add_subcommand("sample", "generate an image from a checkpoint");
    add_common(sample);
    sample->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    sample->add_option("--scene-seed", scene_seed, "scene seed");
    sample->add_option("--subjects", subjects, "number of subjects (1 or 2)");
    sample->add_option("--prompt", prompt_words, "space-separated prompt words");
    sample->add_option("--steps", steps, "sampler steps");

    auto* eval = app.add_subcommand("eval", "run the metric suite");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    eval->add_option("--n", n, "held-out scenes per metric");
    eval->add_option("--steps", steps, "sampler steps");

    auto* gen = app.add_subcommand("gen-data", "export synthetic samples");
    add_common(gen);
    gen->add_option("--stage", stage, "dataset recipe (0..3)");
    gen->add_option("--n", n, "sample count")->required();

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        if (pretrain->parsed()) return cmd_train(flags, resume_path, "", -1, true);
        if (train->parsed()) return cmd_train(flags, resume_path, base_path, max_stage, false);
        if (sample->parsed()) return cmd_sample(flags, checkpoint, scene_seed, subjects, prompt_words, steps);
        if (eval->parsed()) return cmd_eval(flags, checkpoint, n, steps);
        if (gen->parsed()) return cmd_gen_data(flags, stage, n);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const CheckpointMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckpoint;
    } catch (const MissingInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissing;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

int cli_main(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return cli_main(args);
}

}  // namespace rflow
