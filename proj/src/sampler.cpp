#include "rflow/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "rflow/image_io.hpp"
#include "rflow/rng.hpp"

namespace rflow {

void SamplerConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
}

Tensor euler_solve(const VelocityFn& velocity, const Tensor& noise, int steps) {
    if (steps < 1) throw std::invalid_argument("euler_solve: steps must be >= 1");
    Tensor z = Tensor::from(noise.shape, *noise.data);
    const double dt = 1.0 / steps;
    for (int i = 0; i < steps; ++i) {
        const double t = 1.0 - i * dt;
        Tensor v = velocity(z, t);
        if (v.shape != z.shape) throw std::runtime_error("euler_solve: velocity shape mismatch");
        for (int64_t j = 0; j < z.size(); ++j) (*z.data)[j] += dt * v[j];
    }
    return z;
}

GenResult sample_image(const Model& model, const PromptSpec& prompt, const std::vector<Tensor>& cond_images,
                       int image_size, const SamplerConfig& cfg) {
    cfg.validate();
    const ModelConfig& mc = model.config();
    const Vocab vocab = Vocab::builtin();
    const Grid noisy_grid{image_size / mc.patch, image_size / mc.patch};

    EncodedPrompt enc = encode_prompt(prompt, model.embedding_table(), vocab);
    std::vector<Tensor> cond_tokens;
    std::vector<Grid> cond_grids;
    for (const auto& img : cond_images) {
        cond_tokens.push_back(patchify(img, mc.patch));
        cond_grids.push_back({img.dim(1) / mc.patch, img.dim(2) / mc.patch});
    }

    Rng rng = Rng::stream(cfg.seed, "sample-noise");
    Tensor noise = Tensor::zeros({noisy_grid.count(), mc.token_dim});
    for (int64_t i = 0; i < noise.size(); ++i) (*noise.data)[i] = rng.normal();

    GenResult result;
    const double dt = 1.0 / cfg.steps;
    Tensor z = noise;
    for (int i = 0; i < cfg.steps; ++i) {
        const double t = 1.0 - i * dt;
        const bool last = i == cfg.steps - 1;
        TokenSequence seq = compose_sequence(enc, z, noisy_grid, cond_tokens, cond_grids);
        ForwardResult out = model.forward(seq, t, cfg.capture && last);
        Tensor next = Tensor::from(z.shape, *z.data);
        for (int64_t j = 0; j < z.size(); ++j) (*next.data)[j] += dt * out.velocity[j];
        z = std::move(next);
        if (cfg.capture && last) result.records = std::move(out.records);
    }
    result.z0_tokens = z;
    result.image = unpatchify(z, 3, image_size, image_size, mc.patch);
    return result;
}

Tensor attention_response_map(const std::vector<AttentionRecord>& records, int cond_index, int n_noisy) {
    if (records.empty()) throw std::invalid_argument("attention response: no captured records");
    Tensor avg = Tensor::zeros({n_noisy});
    for (const auto& rec : records) {
        if (cond_index >= static_cast<int>(rec.cond_to_noisy.size()))
            throw std::invalid_argument("attention response: condition index out of range");
        const Tensor& block = rec.cond_to_noisy[static_cast<size_t>(cond_index)];
        if (block.dim(1) != n_noisy) throw std::invalid_argument("attention response: size mismatch");
        const int rows = block.dim(0);
        std::vector<double> resp(static_cast<size_t>(n_noisy), 0.0);
        for (int r = 0; r < rows; ++r)
            for (int j = 0; j < n_noisy; ++j) resp[static_cast<size_t>(j)] += block[int64_t(r) * n_noisy + j];
        for (double& v : resp) v /= rows;
        const double lo = *std::min_element(resp.begin(), resp.end());
        const double hi = *std::max_element(resp.begin(), resp.end());
        const double span = hi - lo;
        for (int j = 0; j < n_noisy; ++j) avg[j] += span > 1e-12 ? (resp[static_cast<size_t>(j)] - lo) / span : 0.0;
    }
    for (int j = 0; j < n_noisy; ++j) avg[j] /= static_cast<double>(records.size());
    return avg;
}

double attention_iou(const std::vector<AttentionRecord>& records, int cond_index, const Tensor& token_mask) {
    Tensor avg = attention_response_map(records, cond_index, static_cast<int>(token_mask.size()));
    int inter = 0, uni = 0;
    for (int64_t j = 0; j < avg.size(); ++j) {
        const bool pred = avg[j] >= 0.5;
        const bool truth = token_mask[j] != 0.0;
        inter += pred && truth;
        uni += pred || truth;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

double color_fidelity(const Tensor& image, const Tensor& mask, Color expected) {
    const int H = image.dim(1), W = image.dim(2);
    const double want[3] = {expected.r, expected.g, expected.b};
    double err = 0.0;
    int count = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (mask[int64_t(y) * W + x] == 0.0) continue;
            for (int c = 0; c < 3; ++c) err += std::abs(image[int64_t(c) * H * W + int64_t(y) * W + x] - want[c]);
            count += 3;
        }
    if (count == 0) return 0.0;
    return 1.0 - std::clamp(err / count, 0.0, 1.0);
}

double binding_accuracy(const std::vector<AttentionRecord>& records) {
    int64_t hits = 0, total = 0;
    for (const auto& rec : records) {
        if (rec.cond_to_placeholder.empty()) throw std::invalid_argument("binding_accuracy: no placeholder capture");
        for (size_t i = 0; i < rec.cond_to_placeholder.size(); ++i) {
            const Tensor& block = rec.cond_to_placeholder[i];
            const int P = block.dim(1);
            for (int r = 0; r < block.dim(0); ++r) {
                int best = 0;
                for (int c = 1; c < P; ++c)
                    if (block[int64_t(r) * P + c] > block[int64_t(r) * P + best]) best = c;  // ties keep the lower index
                hits += rec.placeholder_conditions[static_cast<size_t>(best)] == static_cast<int>(i);
                ++total;
            }
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / total;
}

namespace {

Color subject_color(const SubjectSpec& sub) { return color_table()[static_cast<size_t>(sub.color_id)].second; }

// nearest-subject classification of one cell; ties prefer the lower index
int nearest_subject(const Tensor& image, Cell cell, int image_size, const SceneSpec& scene, bool* tie) {
    auto [c0, c1] = cell_columns(cell, image_size);
    Color mean = mean_color_in_columns(image, c0, c1);
    double best = 0;
    int best_i = -1;
    for (size_t i = 0; i < scene.subjects.size(); ++i) {
        Color want = subject_color(scene.subjects[i]);
        double d = (mean.r - want.r) * (mean.r - want.r) + (mean.g - want.g) * (mean.g - want.g) +
                   (mean.b - want.b) * (mean.b - want.b);
        if (best_i < 0 || d < best) {
            best = d;
            best_i = static_cast<int>(i);
        } else if (d == best && tie) {
            *tie = true;
        }
    }
    return best_i;
}

void check_two_distinct(const SceneSpec& scene, const char* who) {
    if (scene.subjects.size() != 2) throw std::invalid_argument(std::string(who) + ": two-subject scenes required");
    if (scene.subjects[0].color_id == scene.subjects[1].color_id)
        throw std::invalid_argument(std::string(who) + ": subjects must have distinct colors");
}

}  // namespace

SwapStats swap_decoupling(const GenerateFn& gen_fn, const std::vector<SceneSpec>& scenes) {
    SwapStats stats;
    int correct = 0, total = 0;
    for (const auto& scene : scenes) {
        check_two_distinct(scene, "swap_decoupling");
        Sample s = generate(scene);
        for (int order = 0; order < 2; ++order) {
            std::vector<Tensor> conds = order == 0 ? std::vector<Tensor>{s.cond_images[0], s.cond_images[1]}
                                                   : std::vector<Tensor>{s.cond_images[1], s.cond_images[0]};
            Tensor img = gen_fn(scene, conds, s.prompt_minimal_ph);
            // ref#(k+1) is bound to condition slot k, which holds subject k
            // (order 0) or subject 1-k (order 1)
            bool ok = true;
            for (size_t k = 0; k < 2; ++k) {
                const int expect = order == 0 ? static_cast<int>(k) : static_cast<int>(1 - k);
                bool tie = false;
                const int got = nearest_subject(img, scene.placements[k], scene.image_size, scene, &tie);
                if (tie) ++stats.ties;
                ok = ok && got == expect;
            }
            correct += ok;
            ++total;
        }
        ++stats.trials;
    }
    stats.accuracy = total ? static_cast<double>(correct) / total : 0.0;
    return stats;
}

SwapStats placeholder_swap(const GenerateFn& gen_fn, const std::vector<SceneSpec>& scenes) {
    const Vocab vocab = Vocab::builtin();
    SwapStats stats;
    int correct = 0;
    for (const auto& scene : scenes) {
        check_two_distinct(scene, "placeholder_swap");
        Sample s = generate(scene);
        PromptSpec swapped = s.prompt_minimal_ph;
        for (auto& id : swapped.word_ids) {
            if (id == vocab.placeholder_id(0))
                id = vocab.placeholder_id(1);
            else if (id == vocab.placeholder_id(1))
                id = vocab.placeholder_id(0);
        }
        bool ok = true;
        for (int variant = 0; variant < 2; ++variant) {
            Tensor img = gen_fn(scene, s.cond_images, variant == 0 ? s.prompt_minimal_ph : swapped);
            for (size_t k = 0; k < 2; ++k) {
                // the swapped prompt routes the other subject into the cell
                const int expect = variant == 0 ? static_cast<int>(k) : static_cast<int>(1 - k);
                bool tie = false;
                const int got = nearest_subject(img, scene.placements[k], scene.image_size, scene, &tie);
                if (tie) ++stats.ties;
                ok = ok && got == expect;
            }
        }
        correct += ok;
        ++stats.trials;
    }
    stats.accuracy = stats.trials ? static_cast<double>(correct) / stats.trials : 0.0;
    return stats;
}

GenerateFn model_generator(const Model& model, const SamplerConfig& cfg) {
    return [&model, cfg](const SceneSpec& scene, const std::vector<Tensor>& conds, const PromptSpec& prompt) {
        SamplerConfig local = cfg;
        uint64_t x = cfg.seed ^ (scene.seed * 0x9e3779b97f4a7c15ULL);
        local.seed = splitmix64(x);
        return sample_image(model, prompt, conds, scene.image_size, local).image;
    };
}

SwapStats swap_decoupling(const Model& model, const std::vector<SceneSpec>& scenes, const SamplerConfig& cfg) {
    return swap_decoupling(model_generator(model, cfg), scenes);
}

SwapStats placeholder_swap(const Model& model, const std::vector<SceneSpec>& scenes, const SamplerConfig& cfg) {
    return placeholder_swap(model_generator(model, cfg), scenes);
}

void EvalReport::validate() const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    for (double v : attention_iou_per_condition)
        if (!in01(v)) throw std::runtime_error("eval report: score out of [0,1]");
    if (!in01(attention_iou_mean) || !in01(subject_color_fidelity) || !in01(swap_decoupling_accuracy) ||
        !in01(placeholder_binding_accuracy) || !in01(placeholder_swap_rate))
        throw std::runtime_error("eval report: score out of [0,1]");
}

EvalReport run_eval_suite(const Model& model, int n, uint64_t seed, const SamplerConfig& cfg, int image_size,
                          const std::string& out_dir) {
    if (n < 1) throw std::invalid_argument("eval suite: n must be >= 1");
    EvalReport report;
    SamplerConfig capture_cfg = cfg;
    capture_cfg.capture = true;
    const int grid = image_size / model.config().patch;
    const bool save = !out_dir.empty();
    if (save) std::filesystem::create_directories(out_dir);

    // single-subject: routing focus and subject color fidelity
    double iou_acc = 0.0, fid_acc = 0.0;
    for (int i = 0; i < n; ++i) {
        SceneSpec scene = eval_scene(1, image_size, Rng::stream(seed, "eval-single", static_cast<uint64_t>(i)).next_u64());
        Sample s = generate(scene);
        SamplerConfig sc = capture_cfg;
        sc.seed = Rng::stream(seed, "eval-noise", static_cast<uint64_t>(i)).next_u64();
        GenResult gen = sample_image(model, s.prompt_full_ph, s.cond_images, image_size, sc);
        Tensor token_mask = mask_to_token_grid(s.masks[0], model.config().patch);
        const double iou = attention_iou(gen.records, 0, token_mask);
        iou_acc += iou;
        fid_acc += color_fidelity(gen.image, s.masks[0], color_table()[static_cast<size_t>(scene.subjects[0].color_id)].second);
        if (save && i < 8) {
            const std::string base = out_dir + "/single_" + std::to_string(i);
            write_ppm(base + "_target.ppm", s.target);
            write_ppm(base + "_generated.ppm", gen.image);
            Tensor rmap = attention_response_map(gen.records, 0, grid * grid);
            write_pgm(base + "_attention.pgm", Tensor::from({grid, grid}, *rmap.data));
            report.sample_files.push_back(base + "_generated.ppm");
        }
    }
    report.attention_iou_per_condition = {iou_acc / n};
    report.attention_iou_mean = iou_acc / n;
    report.subject_color_fidelity = fid_acc / n;

    // two-subject: decoupling, binding and placeholder control
    std::vector<SceneSpec> pairs;
    for (int i = 0; i < n; ++i)
        pairs.push_back(eval_scene(2, image_size, Rng::stream(seed, "eval-pair", static_cast<uint64_t>(i)).next_u64()));

    report.swap_decoupling_accuracy = swap_decoupling(model, pairs, cfg).accuracy;
    report.placeholder_swap_rate = placeholder_swap(model, pairs, cfg).accuracy;

    double bind_acc = 0.0;
    for (size_t i = 0; i < pairs.size(); ++i) {
        Sample s = generate(pairs[i]);
        SamplerConfig sc = capture_cfg;
        sc.seed = Rng::stream(seed, "eval-bind", static_cast<uint64_t>(i)).next_u64();
        GenResult gen = sample_image(model, s.prompt_minimal_ph, s.cond_images, image_size, sc);
        bind_acc += binding_accuracy(gen.records);
        if (save && i < 4) {
            const std::string base = out_dir + "/pair_" + std::to_string(i);
            write_ppm(base + "_target.ppm", s.target);
            write_ppm(base + "_generated.ppm", gen.image);
            report.sample_files.push_back(base + "_generated.ppm");
        }
    }
    report.placeholder_binding_accuracy = bind_acc / static_cast<double>(pairs.size());
    report.validate();
    return report;
}

}  // namespace rflow
