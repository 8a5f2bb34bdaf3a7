#include "rflow/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace rflow {

namespace {

uint8_t to_byte(double v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

std::ofstream open_binary(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    return out;
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("write_ppm: expected [3,H,W]");
    const int H = image.dim(1), W = image.dim(2);
    auto out = open_binary(path);
    out << "P6\n" << W << " " << H << "\n255\n";
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) out.put(static_cast<char>(to_byte(image[int64_t(c) * H * W + int64_t(y) * W + x])));
}

void write_pgm(const std::string& path, const Tensor& image) {
    int H, W;
    if (image.rank() == 3 && image.dim(0) == 1) {
        H = image.dim(1);
        W = image.dim(2);
    } else if (image.rank() == 2) {
        H = image.dim(0);
        W = image.dim(1);
    } else {
        throw std::invalid_argument("write_pgm: expected [1,H,W] or [H,W]");
    }
    auto out = open_binary(path);
    out << "P5\n" << W << " " << H << "\n255\n";
    for (int64_t i = 0; i < int64_t(H) * W; ++i) out.put(static_cast<char>(to_byte(image[i])));
}

void export_sample(const Sample& sample, const std::string& path_prefix) {
    nlohmann::json side;
    side["image_size"] = sample.scene.image_size;
    side["seed"] = sample.scene.seed;
    side["self_reference"] = sample.self_reference;
    side["drop_rate"] = sample.drop_rate;
    side["subjects"] = nlohmann::json::array();
    for (size_t i = 0; i < sample.scene.subjects.size(); ++i) {
        const auto& s = sample.scene.subjects[i];
        side["subjects"].push_back({{"shape", static_cast<int>(s.shape)},
                                    {"color", static_cast<int>(s.color_id)},
                                    {"texture", static_cast<int>(s.texture)},
                                    {"cell", static_cast<int>(sample.scene.placements[i])}});
    }
    side["prompt_full"] = sample.prompt_full.word_ids;
    side["prompt_full_ph"] = sample.prompt_full_ph.word_ids;
    side["prompt_minimal_ph"] = sample.prompt_minimal_ph.word_ids;

    auto bin = open_binary(path_prefix + ".bin");
    int64_t offset = 0;
    nlohmann::json tensors = nlohmann::json::array();
    auto dump = [&](const std::string& name, const Tensor& t) {
        tensors.push_back({{"name", name}, {"offset", offset}, {"shape", t.shape}});
        bin.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        offset += t.size();
    };
    dump("target", sample.target);
    for (size_t k = 0; k < sample.cond_images.size(); ++k) dump("cond" + std::to_string(k), sample.cond_images[k]);
    for (size_t k = 0; k < sample.masks.size(); ++k) dump("mask" + std::to_string(k), sample.masks[k]);
    side["tensors"] = tensors;

    write_text_file(path_prefix + ".json", side.dump(2) + "\n");
}

Tensor read_tensor_slice(const std::string& bin_path, int64_t offset, const Shape& shape) {
    std::ifstream in(bin_path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read file: " + bin_path);
    Tensor t = Tensor::zeros(shape);
    in.seekg(offset * static_cast<int64_t>(sizeof(double)));
    in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw std::runtime_error("short read from " + bin_path);
    return t;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read file: " + path);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_text_file(const std::string& path, const std::string& content) {
    auto out = open_binary(path);
    out << content;
}

}  // namespace rflow
