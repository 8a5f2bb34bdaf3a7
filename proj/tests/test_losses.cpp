#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "rflow/losses.hpp"
#include "rflow/model.hpp"
#include "rflow/rng.hpp"

using namespace rflow;
using rflow::testing::Mat;

namespace {

Tensor mat_to_tensor(const Mat& m) {
    Tensor t = Tensor::zeros({static_cast<int>(m.size()), static_cast<int>(m[0].size())});
    for (size_t r = 0; r < m.size(); ++r)
        for (size_t c = 0; c < m[0].size(); ++c) t[r * m[0].size() + c] = m[r][c];
    return t;
}

Mat random_mat(int rows, int cols, Rng& rng) {
    Mat m(static_cast<size_t>(rows), std::vector<double>(static_cast<size_t>(cols)));
    for (auto& row : m)
        for (auto& v : row) v = rng.normal();
    return m;
}

}  // namespace

TEST_CASE("flow_sample endpoints and hand case") {
    Tensor z0 = Tensor::from({1, 1}, {2.0});
    Tensor eps = Tensor::from({1, 1}, {0.0});
    auto a = flow_sample(z0, eps, 0.0);
    CHECK(a.z_t[0] == 2.0);
    auto b = flow_sample(z0, eps, 1.0);
    CHECK(b.z_t[0] == 0.0);
    auto c = flow_sample(z0, eps, 0.5);
    CHECK(c.z_t[0] == 1.0);
    CHECK(c.target[0] == 2.0);
    CHECK_THROWS_AS(flow_sample(z0, Tensor::zeros({2, 1}), 0.5), std::invalid_argument);
    CHECK_THROWS_AS(flow_sample(z0, eps, 1.5), std::invalid_argument);
}

TEST_CASE("loss_diff trivial values") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK(loss_diff(a, a).value() == 0.0);
    Tensor b = Tensor::from({2, 2}, {2, 3, 4, 5});
    CHECK(loss_diff(b, a).value() == 1.0);
    // cross-check against the autodiff mse on a random case
    Rng rng(3);
    Tensor x = Tensor::zeros({3, 5}), y = Tensor::zeros({3, 5});
    for (int64_t i = 0; i < x.size(); ++i) {
        (*x.data)[i] = rng.normal();
        (*y.data)[i] = rng.normal();
    }
    CHECK(loss_diff(x, y).value() == mse(x, y).value());
}

TEST_CASE("loss_route trivial cases") {
    // response equal to mask -> 0; rows below average to the response
    AttentionRecord rec;
    rec.cond_to_noisy.push_back(mat_to_tensor({{1, 0}, {1, 0}}));
    Tensor mask = Tensor::from({2}, {1, 0});
    CHECK(loss_route({rec}, {mask}).value() == 0.0);

    AttentionRecord rec2;
    rec2.cond_to_noisy.push_back(mat_to_tensor({{1, 0}}));
    Tensor mask2 = Tensor::from({2}, {0, 1});
    CHECK(loss_route({rec2}, {mask2}).value() == 1.0);

    CHECK_THROWS_AS(loss_route({}, {mask}), std::invalid_argument);
    CHECK_THROWS_AS(loss_route({rec}, {Tensor::from({3}, {0, 1, 0})}), std::invalid_argument);
}

TEST_CASE("loss_route matches the scalar-loop oracle on random instances") {
    Rng rng(77);
    for (int inst = 0; inst < 100; ++inst) {
        const int layers = 1 + rng.uniform_int(2);
        const int conds = 1 + rng.uniform_int(2);
        const int l_noisy = 2 + rng.uniform_int(15);
        std::vector<std::vector<Mat>> blocks(static_cast<size_t>(layers));
        std::vector<std::vector<double>> masks(static_cast<size_t>(conds));
        std::vector<AttentionRecord> records(static_cast<size_t>(layers));
        std::vector<Tensor> mask_tensors;
        for (int i = 0; i < conds; ++i) {
            masks[static_cast<size_t>(i)].resize(static_cast<size_t>(l_noisy));
            for (auto& v : masks[static_cast<size_t>(i)]) v = rng.coin() ? 1.0 : 0.0;
            mask_tensors.push_back(Tensor::from({l_noisy}, masks[static_cast<size_t>(i)]));
        }
        for (int l = 0; l < layers; ++l)
            for (int i = 0; i < conds; ++i) {
                Mat m = random_mat(1 + rng.uniform_int(6), l_noisy, rng);
                blocks[static_cast<size_t>(l)].push_back(m);
                records[static_cast<size_t>(l)].cond_to_noisy.push_back(mat_to_tensor(m));
            }
        const double got = loss_route(records, mask_tensors).value();
        const double want = rflow::testing::loss_route_ref(blocks, masks);
        CHECK(std::abs(got - want) <= 1e-12);
    }
}

TEST_CASE("loss_route is invariant to jointly permuting (condition, mask) pairs") {
    Rng rng(123);
    const int layers = 2, l_noisy = 6;
    std::vector<AttentionRecord> fwd(static_cast<size_t>(layers)), rev(static_cast<size_t>(layers));
    std::vector<Tensor> masks, masks_rev;
    std::vector<Mat> mats;
    for (int i = 0; i < 2; ++i) {
        std::vector<double> m(static_cast<size_t>(l_noisy));
        for (auto& v : m) v = rng.coin() ? 1.0 : 0.0;
        masks.push_back(Tensor::from({l_noisy}, m));
    }
    masks_rev = {masks[1], masks[0]};
    for (int l = 0; l < layers; ++l) {
        Mat a = random_mat(3, l_noisy, rng), b = random_mat(4, l_noisy, rng);
        fwd[static_cast<size_t>(l)].cond_to_noisy = {mat_to_tensor(a), mat_to_tensor(b)};
        rev[static_cast<size_t>(l)].cond_to_noisy = {mat_to_tensor(b), mat_to_tensor(a)};
    }
    CHECK(loss_route(fwd, masks).value() == doctest::Approx(loss_route(rev, masks_rev).value()).epsilon(1e-15));
}

TEST_CASE("loss_holder trivial cases") {
    // single condition, single placeholder: softmax over one column is 1
    AttentionRecord rec;
    rec.placeholder_conditions = {0};
    rec.cond_to_placeholder.push_back(mat_to_tensor({{0.3}, {-2.0}}));
    rec.cond_to_noisy.push_back(Tensor::zeros({2, 2}));
    CHECK(loss_holder({rec}).value() == 0.0);

    // two placeholders, equal logits: softmax [0.5,0.5] vs [1,0] -> 0.25
    AttentionRecord rec2;
    rec2.placeholder_conditions = {0, 1};
    rec2.cond_to_placeholder.push_back(mat_to_tensor({{0.7, 0.7}}));
    rec2.cond_to_placeholder.push_back(mat_to_tensor({{0.1, 0.1}}));
    const double got = loss_holder({rec2}).value();
    CHECK(got == doctest::Approx(0.25).epsilon(1e-15));

    AttentionRecord empty;
    CHECK_THROWS_AS(loss_holder({empty}), std::invalid_argument);
}

TEST_CASE("loss_holder matches the scalar-loop oracle on random instances") {
    Rng rng(99);
    for (int inst = 0; inst < 100; ++inst) {
        const int layers = 1 + rng.uniform_int(2);
        const int conds = 1 + rng.uniform_int(2);
        const int P = conds;  // one placeholder per condition
        std::vector<std::vector<Mat>> blocks(static_cast<size_t>(layers));
        std::vector<AttentionRecord> records(static_cast<size_t>(layers));
        std::vector<int> match(static_cast<size_t>(conds));
        for (int i = 0; i < conds; ++i) match[static_cast<size_t>(i)] = i;
        for (int l = 0; l < layers; ++l) {
            for (int i = 0; i < conds; ++i) {
                Mat m = random_mat(1 + rng.uniform_int(5), P, rng);
                blocks[static_cast<size_t>(l)].push_back(m);
                records[static_cast<size_t>(l)].cond_to_placeholder.push_back(mat_to_tensor(m));
                records[static_cast<size_t>(l)].cond_to_noisy.push_back(Tensor::zeros({1, 1}));
            }
            records[static_cast<size_t>(l)].placeholder_conditions = match;
        }
        const double got = loss_holder(records).value();
        const double want = rflow::testing::loss_holder_ref(blocks, match);
        CHECK(std::abs(got - want) <= 1e-12);
    }
}

TEST_CASE("mask_to_token_grid majority pooling") {
    Tensor mask = Tensor::zeros({1, 4, 4});
    // patch (0,0): 3 of 4 inside; patch (0,1): 2 of 4 (tie -> inside);
    // patch (1,0): 1 of 4 (outside); patch (1,1): empty
    mask[0 * 4 + 0] = 1;
    mask[0 * 4 + 1] = 1;
    mask[1 * 4 + 0] = 1;
    mask[0 * 4 + 2] = 1;
    mask[1 * 4 + 2] = 1;
    mask[2 * 4 + 0] = 1;
    Tensor grid = mask_to_token_grid(mask, 2);
    CHECK(grid[0] == 1.0);
    CHECK(grid[1] == 1.0);
    CHECK(grid[2] == 0.0);
    CHECK(grid[3] == 0.0);
}

TEST_CASE("combined_loss: terms, protocol and gradient additivity") {
    ModelConfig cfg;
    cfg.dim = 12;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.lora_rank = 2;
    cfg.mlp_ratio = 2;
    cfg.token_dim = 12;
    Model model(cfg, 11);
    // push parameters off their zero-init so every term has signal
    Rng prng(4);
    for (auto* p : model.parameters())
        for (int64_t i = 0; i < p->value.size(); ++i) (*p->value.data)[i] += 0.2 * prng.normal();

    Vocab vocab = Vocab::builtin();
    Sample sample = generate(random_scene(2, 16, 2024));

    auto grads_for = [&](LossWeights w, LossBreakdown* bd) {
        CombinedLossConfig lc;
        lc.weights = w;
        lc.placeholder_free_prob = 0.0;  // force placeholder prompts
        lc.minimal_prompt_prob = 0.0;
        for (auto* p : model.parameters()) {
            p->value.zero_grad();
            p->value.node = -1;
        }
        Rng rng(5150);
        TapeScope scope;
        Tensor total = combined_loss(sample, model, vocab, lc, rng, bd);
        backward(total);
        std::vector<double> out = *model.param("blocks.0.attn.q.lora_a").value.grad;
        auto& g2 = *model.param("cond_map.w").value.grad;
        out.insert(out.end(), g2.begin(), g2.end());
        auto& g3 = *model.param("cond_embed.table").value.grad;
        out.insert(out.end(), g3.begin(), g3.end());
        return out;
    };

    LossBreakdown bd1, bd2, bd3;
    auto g_mid = grads_for({1.0, 0.3, 0.2}, &bd1);
    auto g_diff = grads_for({1.0, 0.0, 0.0}, &bd2);
    auto g_double = grads_for({1.0, 0.6, 0.4}, &bd3);

    CHECK(bd1.has_route);
    CHECK(bd1.has_holder);
    CHECK(!bd2.has_route);
    CHECK(bd1.diff == bd2.diff);  // same rng stream, same forward values
    CHECK(bd1.total == doctest::Approx(1.0 * bd1.diff + 0.3 * bd1.route + 0.2 * bd1.holder).epsilon(1e-12));

    // gradient is affine in the loss weights: g(2r,2h) = 2 g(r,h) - g(0,0)
    for (size_t i = 0; i < g_mid.size(); ++i) {
        double lin = 2.0 * g_mid[i] - g_diff[i];
        CHECK(g_double[i] == doctest::Approx(lin).epsilon(1e-9));
    }
}

TEST_CASE("combined_loss honours the placeholder-free protocol coin") {
    ModelConfig cfg;
    cfg.dim = 12;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.lora_rank = 2;
    cfg.mlp_ratio = 2;
    Model model(cfg, 3);
    Vocab vocab = Vocab::builtin();
    Sample sample = generate(random_scene(2, 16, 7));

    CombinedLossConfig lc;
    int with = 0, without = 0;
    Rng rng(808);
    for (int i = 0; i < 60; ++i) {
        LossBreakdown bd;
        combined_loss(sample, model, vocab, lc, rng, &bd);
        (bd.used_placeholders ? with : without)++;
        if (!bd.used_placeholders) CHECK(!bd.has_holder);
    }
    CHECK(with > 10);
    CHECK(without > 10);
}

TEST_CASE("combined_loss without conditions trains text-to-image only") {
    ModelConfig cfg;
    cfg.dim = 12;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.lora_rank = 2;
    cfg.mlp_ratio = 2;
    Model model(cfg, 3);
    Vocab vocab = Vocab::builtin();
    Sample sample = generate(random_scene(1, 16, 7));
    CombinedLossConfig lc;
    lc.use_conditions = false;
    Rng rng(9);
    LossBreakdown bd;
    combined_loss(sample, model, vocab, lc, rng, &bd);
    CHECK(!bd.has_route);
    CHECK(!bd.has_holder);
    CHECK(!bd.used_placeholders);
    CHECK(bd.total == doctest::Approx(bd.diff).epsilon(1e-15));
}
