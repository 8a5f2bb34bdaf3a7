#include "rflow/losses.hpp"

#include <algorithm>
#include <stdexcept>

namespace rflow {

void LossWeights::validate() const {
    if (diff <= 0.0) throw std::invalid_argument("loss weights: diff must be positive");
    if (route < 0.0 || holder < 0.0) throw std::invalid_argument("loss weights: negative weight");
}

Tensor mask_to_token_grid(const Tensor& pixel_mask, int patch) {
    if (pixel_mask.rank() != 3 || pixel_mask.dim(0) != 1) throw std::invalid_argument("mask_to_token_grid: expected [1,H,W]");
    const int H = pixel_mask.dim(1), W = pixel_mask.dim(2);
    if (H % patch != 0 || W % patch != 0) throw std::invalid_argument("mask_to_token_grid: size not divisible by patch");
    const int gh = H / patch, gw = W / patch;
    Tensor out = Tensor::zeros({gh * gw});
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc) {
            int inside = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    inside += pixel_mask[int64_t(pr * patch + dy) * W + (pc * patch + dx)] != 0.0;
            out[pr * gw + pc] = (2 * inside >= patch * patch) ? 1.0 : 0.0;
        }
    return out;
}

FlowPair flow_sample(const Tensor& z0, const Tensor& noise, double t) {
    if (z0.shape != noise.shape) throw std::invalid_argument("flow_sample: shape mismatch");
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("flow_sample: t must lie in [0,1]");
    FlowPair out;
    out.z_t = Tensor::zeros(z0.shape);
    out.target = Tensor::zeros(z0.shape);
    for (int64_t i = 0; i < z0.size(); ++i) {
        (*out.z_t.data)[i] = (1.0 - t) * z0[i] + t * noise[i];
        (*out.target.data)[i] = z0[i] - noise[i];
    }
    return out;
}

Tensor loss_diff(const Tensor& pred, const Tensor& target) { return mse(pred, target); }

Tensor loss_route(const std::vector<AttentionRecord>& records, const std::vector<Tensor>& masks) {
    if (records.empty()) throw std::invalid_argument("loss_route: no layer records");
    const size_t n_cond = masks.size();
    if (n_cond == 0) throw std::invalid_argument("loss_route: no masks");
    Tensor acc;
    int terms = 0;
    for (const auto& rec : records) {
        if (rec.cond_to_noisy.size() != n_cond) throw std::invalid_argument("loss_route: record/mask count mismatch");
        for (size_t i = 0; i < n_cond; ++i) {
            if (rec.cond_to_noisy[i].dim(1) != masks[i].size())
                throw std::invalid_argument("loss_route: mask shape mismatch");
            Tensor response = mean_over_axis(rec.cond_to_noisy[i], 0);
            Tensor term = mse(response, masks[i]);
            acc = terms == 0 ? term : add(acc, term);
            ++terms;
        }
    }
    return scale(acc, 1.0 / terms);
}

Tensor loss_holder(const std::vector<AttentionRecord>& records) {
    if (records.empty()) throw std::invalid_argument("loss_holder: no layer records");
    Tensor acc;
    int terms = 0;
    for (const auto& rec : records) {
        if (rec.cond_to_placeholder.empty() || rec.placeholder_conditions.empty())
            throw std::invalid_argument("loss_holder: records carry no placeholder columns");
        const int P = static_cast<int>(rec.placeholder_conditions.size());
        for (size_t i = 0; i < rec.cond_to_placeholder.size(); ++i) {
            const Tensor& block = rec.cond_to_placeholder[i];
            if (block.dim(1) != P) throw std::invalid_argument("loss_holder: placeholder column mismatch");
            Tensor sm = softmax(block);
            Tensor target = Tensor::zeros(block.shape);
            for (int col = 0; col < P; ++col) {
                if (rec.placeholder_conditions[static_cast<size_t>(col)] != static_cast<int>(i)) continue;
                for (int row = 0; row < block.dim(0); ++row) (*target.data)[int64_t(row) * P + col] = 1.0;
            }
            Tensor term = mse(sm, target);
            acc = terms == 0 ? term : add(acc, term);
            ++terms;
        }
    }
    return scale(acc, 1.0 / terms);
}

Tensor combined_loss(const Sample& sample, const Model& model, const Vocab& vocab, const CombinedLossConfig& cfg,
                     Rng& rng, LossBreakdown* breakdown) {
    cfg.weights.validate();
    const ModelConfig& mc = model.config();
    const int S = sample.scene.image_size;

    Tensor z0 = patchify(sample.target, mc.patch);
    Tensor noise = Tensor::zeros(z0.shape);
    const double t = rng.uniform();
    for (int64_t i = 0; i < noise.size(); ++i) (*noise.data)[i] = rng.normal();

    // prompt protocol: plain text with probability placeholder_free_prob,
    // otherwise a placeholder prompt that is appearance-free with
    // probability minimal_prompt_prob
    bool placeholder_free = rng.coin(cfg.placeholder_free_prob);
    bool minimal = rng.coin(cfg.minimal_prompt_prob);
    const bool can_place = cfg.use_conditions && !sample.self_reference;
    const PromptSpec* prompt = &sample.prompt_full;
    if (can_place && !placeholder_free) prompt = minimal ? &sample.prompt_minimal_ph : &sample.prompt_full_ph;

    FlowPair flow = flow_sample(z0, noise, t);

    std::vector<Tensor> cond_tokens;
    std::vector<Grid> cond_grids;
    if (cfg.use_conditions) {
        for (const auto& img : sample.cond_images) {
            cond_tokens.push_back(patchify(img, mc.patch));
            cond_grids.push_back({img.dim(1) / mc.patch, img.dim(2) / mc.patch});
        }
    }

    EncodedPrompt enc = encode_prompt(*prompt, model.embedding_table(), vocab);
    Grid noisy_grid{S / mc.patch, S / mc.patch};
    TokenSequence seq = compose_sequence(enc, flow.z_t, noisy_grid, cond_tokens, cond_grids);
    const double drop = std::max(sample.drop_rate, cfg.extra_drop_rate);
    if (drop > 0.0 && !cond_tokens.empty()) seq = drop_condition_tokens(seq, drop, rng);

    const bool want_route = cfg.weights.route > 0.0 && !cond_tokens.empty() &&
                            sample.masks.size() == cond_tokens.size();
    const bool want_holder = cfg.weights.holder > 0.0 && !seq.placeholder_spans.empty();

    ForwardResult out = model.forward(seq, t, want_route || want_holder);

    LossBreakdown bd;
    Tensor l_diff = loss_diff(out.velocity, flow.target);
    bd.diff = l_diff.value();
    Tensor total = scale(l_diff, cfg.weights.diff);

    if (want_route) {
        std::vector<Tensor> masks;
        for (const auto& m : sample.masks) masks.push_back(mask_to_token_grid(m, mc.patch));
        Tensor l_route = loss_route(out.records, masks);
        bd.route = l_route.value();
        bd.has_route = true;
        total = add(total, scale(l_route, cfg.weights.route));
    }
    if (want_holder) {
        Tensor l_holder = loss_holder(out.records);
        bd.holder = l_holder.value();
        bd.has_holder = true;
        total = add(total, scale(l_holder, cfg.weights.holder));
    }
    bd.used_placeholders = !seq.placeholder_spans.empty();
    bd.total = total.value();
    if (breakdown) *breakdown = bd;
    return total;
}

}  // namespace rflow
