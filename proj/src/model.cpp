#include "rflow/model.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "rflow/rng.hpp"

namespace rflow {

void ModelConfig::validate() const {
    if (dim <= 0 || n_layers <= 0 || n_heads <= 0 || patch <= 0 || token_dim <= 0 || vocab_size <= 0)
        throw std::invalid_argument("model config: dimensions must be positive");
    if (dim % n_heads != 0) throw std::invalid_argument("model config: dim must be divisible by n_heads");
    if (head_dim() % 6 != 0)
        throw std::invalid_argument("model config: head_dim must be divisible by 6 (2 per rotary pair x 3 axes)");
    if (lora_rank < 1) throw std::invalid_argument("model config: lora_rank must be >= 1");
    if (max_conditions < 1 || max_conditions > kMaxConditions)
        throw std::invalid_argument("model config: max_conditions out of range");
    if (mlp_ratio < 1) throw std::invalid_argument("model config: mlp_ratio must be >= 1");
}

uint64_t ModelConfig::hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](uint64_t v) {
        h ^= v;
        h *= 0x100000001b3ULL;
    };
    mix(static_cast<uint64_t>(dim));
    mix(static_cast<uint64_t>(n_layers));
    mix(static_cast<uint64_t>(n_heads));
    mix(static_cast<uint64_t>(patch));
    mix(static_cast<uint64_t>(lora_rank));
    mix(static_cast<uint64_t>(max_conditions));
    mix(static_cast<uint64_t>(mlp_ratio));
    mix(static_cast<uint64_t>(token_dim));
    mix(static_cast<uint64_t>(vocab_size));
    uint64_t bits;
    static_assert(sizeof(double) == sizeof(uint64_t));
    std::memcpy(&bits, &rope_base, sizeof(bits));
    mix(bits);
    std::memcpy(&bits, &lora_scale, sizeof(bits));
    mix(bits);
    return h;
}

Tensor apply_rope(const Tensor& qk, const std::vector<Pos3>& positions, int n_heads, double base) {
    if (qk.rank() != 2) throw std::invalid_argument("apply_rope: expected [L, dim]");
    const int L = qk.dim(0), dim = qk.dim(1);
    if (dim % n_heads != 0) throw std::invalid_argument("apply_rope: dim not divisible by n_heads");
    const int hd = dim / n_heads;
    if (hd % 6 != 0) throw std::invalid_argument("apply_rope: head_dim must be divisible by 2*3");
    if (static_cast<int>(positions.size()) != L) throw std::invalid_argument("apply_rope: position count mismatch");

    const int axis_dim = hd / 3;       // feature dims per axis
    const int axis_pairs = axis_dim / 2;
    const int half = hd / 2;           // rotation pairs per head
    Tensor cos_t = Tensor::zeros({L, half});
    Tensor sin_t = Tensor::zeros({L, half});
    for (int i = 0; i < L; ++i) {
        const int pos[3] = {positions[static_cast<size_t>(i)].axis0, positions[static_cast<size_t>(i)].row,
                            positions[static_cast<size_t>(i)].col};
        for (int a = 0; a < 3; ++a)
            for (int j = 0; j < axis_pairs; ++j) {
                const double freq = std::pow(base, -2.0 * j / axis_dim);
                const double angle = pos[a] * freq;
                cos_t[int64_t(i) * half + a * axis_pairs + j] = std::cos(angle);
                sin_t[int64_t(i) * half + a * axis_pairs + j] = std::sin(angle);
            }
    }
    return rope_rotate(qk, cos_t, sin_t);
}

Tensor timestep_features(double t, int dim) {
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("timestep must lie in [0,1]");
    if (dim % 2 != 0) throw std::invalid_argument("timestep feature dim must be even");
    const int half = dim / 2;
    Tensor out = Tensor::zeros({1, dim});
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[i] = std::cos(1000.0 * t * freq);
        out[half + i] = std::sin(1000.0 * t * freq);
    }
    return out;
}

Model::Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng::stream(seed, "model-init");

    auto randn = [&rng](Shape shape, double scl) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (int64_t i = 0; i < t.size(); ++i) (*t.data)[i] = scl * rng.normal();
        return t;
    };

    embed_ = &add_param("embed.table", ParamGroup::Base, randn({cfg_.vocab_size, cfg_.token_dim}, 1.0));

    txt_in_ = make_linear("txt_in", cfg_.dim, cfg_.token_dim, rng, true);
    img_in_ = make_linear("img_in", cfg_.dim, cfg_.token_dim, rng, true);

    // the condition path starts as a copy of the image input map
    cond_map_.w = &add_param("cond_map.w", ParamGroup::CondMap, Tensor::from(img_in_.w->value.shape, *img_in_.w->value.data));
    cond_map_.b = &add_param("cond_map.b", ParamGroup::CondMap, Tensor::zeros({cfg_.dim}));
    cond_embed_ = &add_param("cond_embed.table", ParamGroup::CondEmbed, Tensor::zeros({cfg_.max_conditions, cfg_.dim}));

    time_fc1_ = make_linear("time_mlp.fc1", cfg_.dim, cfg_.dim, rng, false);
    time_fc2_ = make_linear("time_mlp.fc2", cfg_.dim, cfg_.dim, rng, false);

    const int hidden = cfg_.mlp_ratio * cfg_.dim;
    blocks_.resize(static_cast<size_t>(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        auto& blk = blocks_[static_cast<size_t>(l)];
        blk.q = make_linear(p + "attn.q", cfg_.dim, cfg_.dim, rng, true);
        blk.k = make_linear(p + "attn.k", cfg_.dim, cfg_.dim, rng, true);
        blk.v = make_linear(p + "attn.v", cfg_.dim, cfg_.dim, rng, true);
        blk.o = make_linear(p + "attn.o", cfg_.dim, cfg_.dim, rng, true);
        blk.fc1 = make_linear(p + "mlp.fc1", hidden, cfg_.dim, rng, true);
        blk.fc2 = make_linear(p + "mlp.fc2", cfg_.dim, hidden, rng, true);
        // modulation starts at identity (zero shift/scale)
        blk.mod.w = &add_param(p + "mod.w", ParamGroup::Base, Tensor::zeros({4 * cfg_.dim, cfg_.dim}));
        blk.mod.b = &add_param(p + "mod.b", ParamGroup::Base, Tensor::zeros({4 * cfg_.dim}));
    }
    final_mod_.w = &add_param("final_mod.w", ParamGroup::Base, Tensor::zeros({2 * cfg_.dim, cfg_.dim}));
    final_mod_.b = &add_param("final_mod.b", ParamGroup::Base, Tensor::zeros({2 * cfg_.dim}));

    // zero-init output head keeps the initial velocity at zero
    head_.w = &add_param("head.w", ParamGroup::Base, Tensor::zeros({cfg_.token_dim, cfg_.dim}));
    head_.b = &add_param("head.b", ParamGroup::Base, Tensor::zeros({cfg_.token_dim}));
    head_.lora_a = &add_param("head.lora_a", ParamGroup::Lora, randn({cfg_.lora_rank, cfg_.dim}, 1.0 / std::sqrt(cfg_.dim)));
    head_.lora_b = &add_param("head.lora_b", ParamGroup::Lora, Tensor::zeros({cfg_.token_dim, cfg_.lora_rank}));
}

Parameter& Model::add_param(const std::string& name, ParamGroup group, Tensor value) {
    value.enable_grad();
    params_.push_back(Parameter{name, group, std::move(value)});
    index_[name] = &params_.back();
    return params_.back();
}

Model::Linear Model::make_linear(const std::string& name, int out, int in, Rng& rng, bool with_lora) {
    Linear lin;
    Tensor w = Tensor::zeros({out, in});
    const double scl = 1.0 / std::sqrt(static_cast<double>(in));
    for (int64_t i = 0; i < w.size(); ++i) (*w.data)[i] = scl * rng.normal();
    lin.w = &add_param(name + ".w", ParamGroup::Base, std::move(w));
    lin.b = &add_param(name + ".b", ParamGroup::Base, Tensor::zeros({out}));
    if (with_lora) {
        Tensor a = Tensor::zeros({cfg_.lora_rank, in});
        for (int64_t i = 0; i < a.size(); ++i) (*a.data)[i] = scl * rng.normal();
        lin.lora_a = &add_param(name + ".lora_a", ParamGroup::Lora, std::move(a));
        lin.lora_b = &add_param(name + ".lora_b", ParamGroup::Lora, Tensor::zeros({out, cfg_.lora_rank}));
    }
    return lin;
}

Tensor Model::run_linear(const Linear& lin, const Tensor& x) const {
    Tensor y = add_rowwise(matmul_nt(x, lin.w->value), lin.b->value);
    if (lin.lora_a) {
        Tensor low = matmul_nt(matmul_nt(x, lin.lora_a->value), lin.lora_b->value);
        y = add(y, scale(low, cfg_.lora_scale));
    }
    return y;
}

const Tensor& Model::embedding_table() const { return embed_->value; }

std::vector<Parameter*> Model::parameters() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
}

std::vector<const Parameter*> Model::parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
}

std::vector<Parameter*> Model::trainable_parameters(TrainPolicy policy, bool include_cond_embed) {
    std::vector<Parameter*> out;
    for (auto& p : params_) {
        const bool adapter = p.group == ParamGroup::Lora || p.group == ParamGroup::CondMap ||
                             (p.group == ParamGroup::CondEmbed && include_cond_embed);
        if (policy == TrainPolicy::FullModel) {
            if (p.group == ParamGroup::Base || adapter) out.push_back(&p);
        } else if (adapter) {
            out.push_back(&p);
        }
    }
    return out;
}

Parameter& Model::param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return *it->second;
}

const Parameter& Model::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return *it->second;
}

bool Model::has_param(const std::string& name) const { return index_.count(name) > 0; }

void Model::zero_condition_embedding() {
    std::fill(cond_embed_->value.data->begin(), cond_embed_->value.data->end(), 0.0);
}

ForwardResult Model::forward(const TokenSequence& seq, double t, bool capture) const {
    seq.validate();
    if (seq.tokens.dim(1) != cfg_.token_dim)
        throw std::invalid_argument("forward: sequence token width does not match the model");
    if (seq.num_conditions() > cfg_.max_conditions) throw std::invalid_argument("forward: too many condition groups");

    const int L = seq.length();
    const Span text = seq.text_range();
    const Span noisy = seq.noisy_range();
    const int n_cond = seq.num_conditions();

    // per-segment input maps
    std::vector<Tensor> mapped;
    if (text.len() > 0) mapped.push_back(run_linear(txt_in_, slice(seq.tokens, 0, text.begin, text.end)));
    mapped.push_back(run_linear(img_in_, slice(seq.tokens, 0, noisy.begin, noisy.end)));
    for (int k = 0; k < n_cond; ++k) {
        Span r = seq.cond_range(k);
        Tensor xc = run_linear(cond_map_, slice(seq.tokens, 0, r.begin, r.end));
        // tag index selects the embedding row; dropped groups keep their tag
        int idx = seq.tags[static_cast<size_t>(r.begin)].cond_index;
        Tensor row = gather_rows(cond_embed_->value, {idx});
        mapped.push_back(add_rowwise(xc, row));
    }
    Tensor x = mapped.size() == 1 ? mapped[0] : concat(mapped, 0);

    // timestep conditioning
    Tensor tv = gelu(run_linear(time_fc1_, timestep_features(t, cfg_.dim)));
    tv = run_linear(time_fc2_, tv);
    Tensor ones_row = Tensor::full({1, cfg_.dim}, 1.0);

    auto modulate = [&](const Tensor& h, const Tensor& mod, int idx) {
        Tensor shift = slice(mod, 1, idx * cfg_.dim, (idx + 1) * cfg_.dim);
        Tensor scl = slice(mod, 1, (idx + 1) * cfg_.dim, (idx + 2) * cfg_.dim);
        return add_rowwise(mul_rowwise(h, add(scl, ones_row)), shift);
    };

    const int hd = cfg_.head_dim();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hd));
    const bool want_capture = capture;

    ForwardResult result;
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const auto& blk = blocks_[static_cast<size_t>(l)];
        Tensor mod = run_linear(blk.mod, tv);  // [1, 4*dim]

        Tensor h = modulate(layer_norm(x), mod, 0);
        Tensor q = apply_rope(run_linear(blk.q, h), seq.positions, cfg_.n_heads, cfg_.rope_base);
        Tensor k = apply_rope(run_linear(blk.k, h), seq.positions, cfg_.n_heads, cfg_.rope_base);
        Tensor v = run_linear(blk.v, h);

        std::vector<Tensor> head_outs;
        Tensor logits_mean;
        for (int hI = 0; hI < cfg_.n_heads; ++hI) {
            Tensor qh = slice(q, 1, hI * hd, (hI + 1) * hd);
            Tensor kh = slice(k, 1, hI * hd, (hI + 1) * hd);
            Tensor vh = slice(v, 1, hI * hd, (hI + 1) * hd);
            Tensor logits = scale(matmul_nt(qh, kh), inv_sqrt_d);  // [L, L]
            head_outs.push_back(matmul(softmax(logits), vh));
            if (want_capture) logits_mean = hI == 0 ? logits : add(logits_mean, logits);
        }
        Tensor attn_out = run_linear(blk.o, cfg_.n_heads == 1 ? head_outs[0] : concat(head_outs, 1));
        x = add(x, attn_out);

        Tensor h2 = modulate(layer_norm(x), mod, 2);
        Tensor ffn = run_linear(blk.fc2, gelu(run_linear(blk.fc1, h2)));
        x = add(x, ffn);

        if (want_capture) {
            if (cfg_.n_heads > 1) logits_mean = scale(logits_mean, 1.0 / cfg_.n_heads);
            AttentionRecord rec;
            for (int kc = 0; kc < n_cond; ++kc) {
                Span r = seq.cond_range(kc);
                Tensor rows = slice(logits_mean, 0, r.begin, r.end);
                rec.cond_to_noisy.push_back(slice(rows, 1, noisy.begin, noisy.end));
                if (!seq.placeholder_spans.empty()) {
                    std::vector<Tensor> cols;
                    for (const auto& [cond_idx, span] : seq.placeholder_spans) {
                        cols.push_back(slice(rows, 1, span.begin, span.end));
                        if (kc == 0) rec.placeholder_conditions.push_back(cond_idx);
                    }
                    rec.cond_to_placeholder.push_back(cols.size() == 1 ? cols[0] : concat(cols, 1));
                }
            }
            result.records.push_back(std::move(rec));
        }
        (void)L;
    }

    Tensor final_mod = run_linear(final_mod_, tv);  // [1, 2*dim]
    Tensor out = modulate(layer_norm(x), final_mod, 0);
    result.velocity = run_linear(head_, slice(out, 0, noisy.begin, noisy.end));
    return result;
}

}  // namespace rflow
