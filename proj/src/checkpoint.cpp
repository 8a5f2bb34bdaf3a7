#include "rflow/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rflow {

namespace {

constexpr char kMagic[4] = {'R', 'F', 'L', 'W'};

template <class T>
void write_raw(std::ostream& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

void write_config(std::ostream& out, const ModelConfig& c) {
    for (int v : {c.dim, c.n_layers, c.n_heads, c.patch, c.lora_rank, c.max_conditions, c.mlp_ratio, c.token_dim,
                  c.vocab_size})
        write_raw<uint32_t>(out, static_cast<uint32_t>(v));
    write_raw<double>(out, c.rope_base);
    write_raw<double>(out, c.lora_scale);
}

ModelConfig read_config(std::istream& in) {
    ModelConfig c;
    c.dim = static_cast<int>(read_raw<uint32_t>(in));
    c.n_layers = static_cast<int>(read_raw<uint32_t>(in));
    c.n_heads = static_cast<int>(read_raw<uint32_t>(in));
    c.patch = static_cast<int>(read_raw<uint32_t>(in));
    c.lora_rank = static_cast<int>(read_raw<uint32_t>(in));
    c.max_conditions = static_cast<int>(read_raw<uint32_t>(in));
    c.mlp_ratio = static_cast<int>(read_raw<uint32_t>(in));
    c.token_dim = static_cast<int>(read_raw<uint32_t>(in));
    c.vocab_size = static_cast<int>(read_raw<uint32_t>(in));
    c.rope_base = read_raw<double>(in);
    c.lora_scale = read_raw<double>(in);
    return c;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out.write(kMagic, 4);
    write_raw<uint32_t>(out, kVersion);
    write_config(out, config);
    write_raw<uint32_t>(out, static_cast<uint32_t>(arrays.size()));
    for (const auto& [name, tensor] : arrays) {
        write_raw<uint32_t>(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_raw<uint32_t>(out, static_cast<uint32_t>(tensor.shape.size()));
        for (int d : tensor.shape) write_raw<uint32_t>(out, static_cast<uint32_t>(d));
        out.write(reinterpret_cast<const char*>(tensor.ptr()),
                  static_cast<std::streamsize>(tensor.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("checkpoint: bad magic in " + path);
    const uint32_t version = read_raw<uint32_t>(in);
    if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version");
    Checkpoint ckpt;
    ckpt.config = read_config(in);
    const uint32_t n = read_raw<uint32_t>(in);
    for (uint32_t i = 0; i < n; ++i) {
        const uint32_t name_len = read_raw<uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const uint32_t ndim = read_raw<uint32_t>(in);
        Shape shape(ndim);
        for (auto& d : shape) d = static_cast<int>(read_raw<uint32_t>(in));
        Tensor t = Tensor::zeros(shape);
        in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint: truncated array data");
        ckpt.arrays.emplace(std::move(name), std::move(t));
    }
    return ckpt;
}

void Checkpoint::set_meta(const std::string& name, double v) { arrays[name] = Tensor::scalar(v); }

double Checkpoint::meta(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw std::out_of_range("checkpoint: missing meta " + name);
    return it->second.value();
}

Checkpoint snapshot_model(const Model& model) {
    Checkpoint ckpt;
    ckpt.config = model.config();
    for (const auto* p : model.parameters())
        ckpt.arrays.emplace(p->name, Tensor::from(p->value.shape, *p->value.data));
    return ckpt;
}

void restore_model(Model& model, const Checkpoint& ckpt) {
    if (ckpt.config.hash() != model.config().hash())
        throw std::runtime_error("checkpoint: model config mismatch");
    for (auto* p : model.parameters()) {
        auto it = ckpt.arrays.find(p->name);
        if (it == ckpt.arrays.end()) throw std::runtime_error("checkpoint: missing parameter " + p->name);
        if (it->second.shape != p->value.shape) throw std::runtime_error("checkpoint: shape mismatch for " + p->name);
        *p->value.data = *it->second.data;
    }
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
    Model model(ckpt.config, 0);
    restore_model(model, ckpt);
    return model;
}

}  // namespace rflow
