#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rflow/sequence.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

enum class ShapeId { Square, Disk, Cross, Ring };
enum class TextureId { Flat, Stripes };
enum class Cell { Left, Right, Center };

struct Color {
    double r = 0, g = 0, b = 0;
};

// Palette in vocabulary order; word id of entry i is i.
const std::vector<std::pair<std::string, Color>>& color_table();

struct SubjectSpec {
    ShapeId shape = ShapeId::Square;
    int color_id = 0;  // palette index
    TextureId texture = TextureId::Flat;
};

struct SceneSpec {
    std::vector<SubjectSpec> subjects;  // 1 or 2
    std::vector<Cell> placements;       // one cell per subject
    int image_size = 16;
    uint64_t seed = 0;

    void validate() const;
};

// One synthetic supervision item. Prompts come in three variants: the full
// description with placeholders, the same without placeholders, and a
// minimal spatial+placeholder form that names no appearance words so the
// reference images are the only source of subject appearance.
struct Sample {
    SceneSpec scene;
    Tensor target;                    // [3,H,W]
    std::vector<Tensor> cond_images;  // per condition [3,h,w]
    std::vector<Tensor> masks;        // per condition [1,H,W], {0,1}
    PromptSpec prompt_full_ph;
    PromptSpec prompt_full;
    PromptSpec prompt_minimal_ph;
    bool self_reference = false;  // condition group is the target image itself
    double drop_rate = 0.0;       // applied when composing the sequence
};

SceneSpec random_scene(int n_subjects, int image_size, uint64_t seed);

// Like random_scene but with flat textures only, so subject colors are exact;
// used by the held-out evaluation sets.
SceneSpec eval_scene(int n_subjects, int image_size, uint64_t seed);

Sample generate(const SceneSpec& scene, int cond_size = 8);

// Stage recipes. Stage 0/1: single-subject; stage 2: an even mix of one- and
// two-subject scenes; stage 3: self-reconstruction pairs carrying the given
// drop rate. Element i of a stream depends only on (stage, seed, i).
Sample stage_sample(int stage, uint64_t seed, int64_t index, int image_size = 16, int cond_size = 8,
                    double stage3_drop = 0.95);
std::vector<Sample> make_stage_dataset(int stage, int n, uint64_t seed, int image_size = 16, int cond_size = 8,
                                       double stage3_drop = 0.95);

// Geometry of a placement cell in pixels: [col_begin, col_end) x full height.
std::pair<int, int> cell_columns(Cell cell, int image_size);

// Mean RGB of `image` restricted to mask (mask empty -> whole image).
Color mean_color(const Tensor& image, const Tensor& mask);
Color mean_color_in_columns(const Tensor& image, int col_begin, int col_end);

}  // namespace rflow
