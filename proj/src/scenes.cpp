#include "rflow/scenes.hpp"

#include <cmath>
#include <stdexcept>

namespace rflow {

namespace {

constexpr double kBackground = 0.5;
constexpr double kStripeScale = 0.45;  // dark rows of the striped texture

bool in_shape(ShapeId shape, int y, int x, int side) {
    const double c = side / 2.0;
    const double dx = x + 0.5 - c, dy = y + 0.5 - c;
    const double r = side / 2.0;
    switch (shape) {
        case ShapeId::Square:
            return true;
        case ShapeId::Disk:
            return dx * dx + dy * dy <= r * r;
        case ShapeId::Cross: {
            const double arm = side / 6.0;
            return std::abs(dx) <= arm || std::abs(dy) <= arm;
        }
        case ShapeId::Ring: {
            const double d2 = dx * dx + dy * dy;
            const double inner = r * 0.5;
            return d2 <= r * r && d2 >= inner * inner;
        }
    }
    return false;
}

void paint_subject(Tensor& img, Tensor* mask, const SubjectSpec& sub, int row0, int col0, int side) {
    const auto& pal = color_table();
    const Color base = pal[static_cast<size_t>(sub.color_id)].second;
    const int H = img.dim(1), W = img.dim(2);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            if (!in_shape(sub.shape, y, x, side)) continue;
            const int r = row0 + y, c = col0 + x;
            double s = (sub.texture == TextureId::Stripes && (r % 2 == 1)) ? kStripeScale : 1.0;
            img[int64_t(0) * H * W + int64_t(r) * W + c] = base.r * s;
            img[int64_t(1) * H * W + int64_t(r) * W + c] = base.g * s;
            img[int64_t(2) * H * W + int64_t(r) * W + c] = base.b * s;
            if (mask) (*mask)[int64_t(r) * W + c] = 1.0;
        }
}

int color_word(const Vocab& v, int color_id) { return v.id(color_table()[static_cast<size_t>(color_id)].first); }

int shape_word(const Vocab& v, ShapeId s) {
    switch (s) {
        case ShapeId::Square: return v.id("square");
        case ShapeId::Disk: return v.id("disk");
        case ShapeId::Cross: return v.id("cross");
        case ShapeId::Ring: return v.id("ring");
    }
    throw std::logic_error("bad shape");
}

int cell_word(const Vocab& v, Cell c) {
    switch (c) {
        case Cell::Left: return v.id("left");
        case Cell::Right: return v.id("right");
        case Cell::Center: return v.id("center");
    }
    throw std::logic_error("bad cell");
}

}  // namespace

const std::vector<std::pair<std::string, Color>>& color_table() {
    static const std::vector<std::pair<std::string, Color>> table = {
        {"red", {1, 0, 0}},    {"green", {0, 1, 0}},   {"blue", {0, 0, 1}},
        {"yellow", {1, 1, 0}}, {"magenta", {1, 0, 1}}, {"cyan", {0, 1, 1}},
    };
    return table;
}

void SceneSpec::validate() const {
    if (subjects.empty() || subjects.size() > 2) throw std::invalid_argument("scene: 1 or 2 subjects required");
    if (placements.size() != subjects.size()) throw std::invalid_argument("scene: one placement per subject");
    if (image_size < 8 || image_size % 4 != 0) throw std::invalid_argument("scene: image size must be a multiple of 4, >= 8");
    if (subjects.size() == 2) {
        bool lr = (placements[0] == Cell::Left && placements[1] == Cell::Right) ||
                  (placements[0] == Cell::Right && placements[1] == Cell::Left);
        if (!lr) throw std::invalid_argument("scene: two-subject scenes use the left and right cells");
        if (subjects[0].color_id == subjects[1].color_id || subjects[0].shape == subjects[1].shape)
            throw std::invalid_argument("scene: subjects must differ in color and shape");
    }
    for (const auto& s : subjects)
        if (s.color_id < 0 || s.color_id >= static_cast<int>(color_table().size()))
            throw std::invalid_argument("scene: color id out of range");
}

std::pair<int, int> cell_columns(Cell cell, int image_size) {
    switch (cell) {
        case Cell::Left: return {0, image_size / 2};
        case Cell::Right: return {image_size / 2, image_size};
        case Cell::Center: return {image_size / 4, 3 * image_size / 4};
    }
    throw std::logic_error("bad cell");
}

SceneSpec random_scene(int n_subjects, int image_size, uint64_t seed) {
    if (n_subjects < 1 || n_subjects > 2) throw std::invalid_argument("random_scene: 1 or 2 subjects");
    Rng rng = Rng::stream(seed, "scene");
    SceneSpec scene;
    scene.image_size = image_size;
    scene.seed = seed;
    const int n_colors = static_cast<int>(color_table().size());
    if (n_subjects == 1) {
        SubjectSpec s;
        s.shape = static_cast<ShapeId>(rng.uniform_int(4));
        s.color_id = rng.uniform_int(n_colors);
        s.texture = rng.coin(0.25) ? TextureId::Stripes : TextureId::Flat;
        scene.subjects = {s};
        scene.placements = {static_cast<Cell>(rng.uniform_int(3))};
    } else {
        SubjectSpec a, b;
        a.shape = static_cast<ShapeId>(rng.uniform_int(4));
        b.shape = static_cast<ShapeId>((static_cast<int>(a.shape) + 1 + rng.uniform_int(3)) % 4);
        a.color_id = rng.uniform_int(n_colors);
        b.color_id = (a.color_id + 1 + rng.uniform_int(n_colors - 1)) % n_colors;
        a.texture = rng.coin(0.25) ? TextureId::Stripes : TextureId::Flat;
        b.texture = rng.coin(0.25) ? TextureId::Stripes : TextureId::Flat;
        scene.subjects = {a, b};
        // subject order is independent of cell order
        scene.placements = rng.coin() ? std::vector<Cell>{Cell::Left, Cell::Right}
                                      : std::vector<Cell>{Cell::Right, Cell::Left};
    }
    scene.validate();
    return scene;
}

SceneSpec eval_scene(int n_subjects, int image_size, uint64_t seed) {
    SceneSpec scene = random_scene(n_subjects, image_size, seed);
    for (auto& s : scene.subjects) s.texture = TextureId::Flat;
    return scene;
}

Sample generate(const SceneSpec& scene, int cond_size) {
    scene.validate();
    if (cond_size < 4 || cond_size % 2 != 0) throw std::invalid_argument("generate: bad condition image size");
    const int S = scene.image_size;
    const Vocab vocab = Vocab::builtin();

    Sample sample;
    sample.scene = scene;
    sample.target = Tensor::full({3, S, S}, kBackground);

    const int side = S / 2 - 2;
    for (size_t i = 0; i < scene.subjects.size(); ++i) {
        auto [c0, c1] = cell_columns(scene.placements[i], S);
        const int col0 = c0 + ((c1 - c0) - side) / 2;
        const int row0 = (S - side) / 2;
        Tensor mask = Tensor::zeros({1, S, S});
        paint_subject(sample.target, &mask, scene.subjects[i], row0, col0, side);
        sample.masks.push_back(std::move(mask));

        Tensor cond = Tensor::full({3, cond_size, cond_size}, kBackground);
        const int cside = cond_size - 2;
        paint_subject(cond, nullptr, scene.subjects[i], (cond_size - cside) / 2, (cond_size - cside) / 2, cside);
        sample.cond_images.push_back(std::move(cond));
    }

    for (size_t i = 0; i < scene.subjects.size(); ++i) {
        const auto& sub = scene.subjects[i];
        std::vector<int> clause = {color_word(vocab, sub.color_id)};
        if (sub.texture == TextureId::Stripes) clause.push_back(vocab.id("striped"));
        clause.push_back(shape_word(vocab, sub.shape));
        clause.push_back(cell_word(vocab, scene.placements[i]));

        auto& full = sample.prompt_full.word_ids;
        full.insert(full.end(), clause.begin(), clause.end());

        auto& fph = sample.prompt_full_ph.word_ids;
        fph.insert(fph.end(), clause.begin(), clause.end());
        fph.push_back(vocab.placeholder_id(static_cast<int>(i)));
    }

    // the minimal prompt shuffles the clause order so placeholder identity,
    // not text position, is what binds a clause to a condition
    std::vector<size_t> order(scene.subjects.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (order.size() == 2 && Rng::stream(scene.seed, "clause-order").coin()) std::swap(order[0], order[1]);
    for (size_t i : order) {
        auto& mph = sample.prompt_minimal_ph.word_ids;
        mph.push_back(cell_word(vocab, scene.placements[i]));
        mph.push_back(vocab.placeholder_id(static_cast<int>(i)));
    }
    sample.prompt_full_ph.has_placeholders = true;
    sample.prompt_minimal_ph.has_placeholders = true;
    sample.prompt_full.has_placeholders = false;
    sample.prompt_full.validate(vocab);
    sample.prompt_full_ph.validate(vocab);
    sample.prompt_minimal_ph.validate(vocab);
    return sample;
}

Sample stage_sample(int stage, uint64_t seed, int64_t index, int image_size, int cond_size, double stage3_drop) {
    Rng rng = Rng::stream(seed, "data", static_cast<uint64_t>(stage), static_cast<uint64_t>(index));
    const uint64_t scene_seed = rng.next_u64();
    switch (stage) {
        case 1: {
            return generate(random_scene(1, image_size, scene_seed), cond_size);
        }
        case 0:  // base pretraining sees the full scene variety
        case 2: {
            int n = rng.coin() ? 1 : 2;
            return generate(random_scene(n, image_size, scene_seed), cond_size);
        }
        case 3: {
            int n = rng.coin() ? 1 : 2;
            Sample s = generate(random_scene(n, image_size, scene_seed), cond_size);
            // reconstruct the target from itself; heavy token dropping happens
            // at sequence composition
            s.cond_images = {s.target};
            s.masks.clear();
            s.self_reference = true;
            s.drop_rate = stage3_drop;
            return s;
        }
        default:
            throw std::invalid_argument("stage_sample: stage must be 0..3");
    }
}

std::vector<Sample> make_stage_dataset(int stage, int n, uint64_t seed, int image_size, int cond_size,
                                       double stage3_drop) {
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(stage_sample(stage, seed, i, image_size, cond_size, stage3_drop));
    return out;
}

Color mean_color(const Tensor& image, const Tensor& mask) {
    const int H = image.dim(1), W = image.dim(2);
    double acc[3] = {0, 0, 0};
    double count = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (mask.size() > 0 && mask[int64_t(y) * W + x] == 0.0) continue;
            for (int ch = 0; ch < 3; ++ch) acc[ch] += image[int64_t(ch) * H * W + int64_t(y) * W + x];
            count += 1;
        }
    if (count == 0) return {kBackground, kBackground, kBackground};
    return {acc[0] / count, acc[1] / count, acc[2] / count};
}

Color mean_color_in_columns(const Tensor& image, int col_begin, int col_end) {
    const int H = image.dim(1), W = image.dim(2);
    double acc[3] = {0, 0, 0};
    double count = 0;
    for (int y = 0; y < H; ++y)
        for (int x = col_begin; x < col_end; ++x) {
            for (int ch = 0; ch < 3; ++ch) acc[ch] += image[int64_t(ch) * H * W + int64_t(y) * W + x];
            count += 1;
        }
    return {acc[0] / count, acc[1] / count, acc[2] / count};
}

}  // namespace rflow
