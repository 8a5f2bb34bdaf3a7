#include "doctest.h"

#include <cmath>

#include "gradcheck.hpp"
#include "rflow/model.hpp"
#include "rflow/rng.hpp"
#include "rflow/sequence.hpp"

using namespace rflow;

namespace {

Tensor rand_tensor(Shape s, Rng& rng, double scl = 1.0) {
    Tensor t = Tensor::zeros(std::move(s));
    for (int64_t i = 0; i < t.size(); ++i) (*t.data)[i] = scl * rng.normal();
    return t;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.dim = 12;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.lora_rank = 2;
    cfg.mlp_ratio = 2;
    cfg.token_dim = 4;
    cfg.vocab_size = 25;
    return cfg;
}

// Builds a sequence with 2 text tokens, a 2x2 noisy grid and the given
// condition grids, all with random contents.
TokenSequence tiny_seq(const Model& model, Rng& rng, const std::vector<Grid>& conds,
                       const std::map<int, Span>& spans = {}) {
    Vocab v = Vocab::builtin();
    PromptSpec prompt;
    prompt.word_ids = {v.id("red"), v.id("square")};
    auto enc = encode_prompt(prompt, model.embedding_table().detached(), v);
    enc.spans = spans;
    Grid noisy{2, 2};
    std::vector<Tensor> cond_toks;
    for (const auto& g : conds) cond_toks.push_back(rand_tensor({g.count(), model.config().token_dim}, rng));
    return compose_sequence(enc, rand_tensor({noisy.count(), model.config().token_dim}, rng), noisy, cond_toks, conds);
}

void randomize_params(Model& model, uint64_t seed, double scl = 0.25) {
    Rng rng(seed);
    for (auto* p : model.parameters())
        for (int64_t i = 0; i < p->value.size(); ++i) (*p->value.data)[i] = scl * rng.normal();
}

}  // namespace

TEST_CASE("rope: zero position is the identity, norms are preserved") {
    Rng rng(3);
    Tensor q = rand_tensor({3, 12}, rng);
    std::vector<Pos3> zero_pos = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
    Tensor r = apply_rope(q, zero_pos, 2);
    for (int64_t i = 0; i < q.size(); ++i) CHECK(r[i] == doctest::Approx(q[i]).epsilon(1e-15));

    std::vector<Pos3> pos = {{1, 5, 2}, {0, 17, 8}, {1, 0, 30}};
    Tensor rr = apply_rope(q, pos, 2);
    for (int row = 0; row < 3; ++row) {
        double n0 = 0, n1 = 0;
        for (int j = 0; j < 12; ++j) {
            n0 += q[row * 12 + j] * q[row * 12 + j];
            n1 += rr[row * 12 + j] * rr[row * 12 + j];
        }
        CHECK(std::abs(std::sqrt(n0) - std::sqrt(n1)) < 1e-12);
    }
}

TEST_CASE("rope: attention dot depends only on the position difference") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor q = rand_tensor({1, 6}, rng);
        Tensor k = rand_tensor({1, 6}, rng);
        Pos3 pa{1, rng.uniform_int(20), rng.uniform_int(20)};
        Pos3 pb{1, rng.uniform_int(20), rng.uniform_int(20)};
        int da0 = rng.uniform_int(2), dr = rng.uniform_int(30), dc = rng.uniform_int(30);
        Pos3 pa2{pa.axis0 + da0, pa.row + dr, pa.col + dc};
        Pos3 pb2{pb.axis0 + da0, pb.row + dr, pb.col + dc};

        auto dot = [&](Pos3 x, Pos3 y) {
            Tensor qr = apply_rope(q, {x}, 1);
            Tensor kr = apply_rope(k, {y}, 1);
            double d = 0;
            for (int j = 0; j < 6; ++j) d += qr[j] * kr[j];
            return d;
        };
        CHECK(dot(pa, pb) == doctest::Approx(dot(pa2, pb2)).epsilon(1e-10));
    }
}

TEST_CASE("rope: the relative-position property holds per axis independently") {
    Rng rng(50);
    Tensor q = rand_tensor({1, 6}, rng);
    Tensor k = rand_tensor({1, 6}, rng);
    auto dot = [&](Pos3 x, Pos3 y) {
        Tensor qr = apply_rope(q, {x}, 1);
        Tensor kr = apply_rope(k, {y}, 1);
        double d = 0;
        for (int j = 0; j < 6; ++j) d += qr[j] * kr[j];
        return d;
    };
    for (int axis = 0; axis < 3; ++axis) {
        for (int trial = 0; trial < 10; ++trial) {
            int base_a = rng.uniform_int(10), base_b = rng.uniform_int(10), shift = rng.uniform_int(25);
            auto mk = [&](int v) {
                Pos3 p{0, 0, 0};
                if (axis == 0) p.axis0 = v;
                if (axis == 1) p.row = v;
                if (axis == 2) p.col = v;
                return p;
            };
            CHECK(dot(mk(base_a), mk(base_b)) == doctest::Approx(dot(mk(base_a + shift), mk(base_b + shift))).epsilon(1e-10));
        }
    }
}

TEST_CASE("apply_rope rejects head dims not divisible by 6") {
    Tensor q = Tensor::zeros({1, 8});
    CHECK_THROWS_AS(apply_rope(q, {{0, 0, 0}}, 1), std::invalid_argument);
}

TEST_CASE("timestep features validate their domain") {
    CHECK_THROWS_AS(timestep_features(-0.1, 12), std::invalid_argument);
    CHECK_THROWS_AS(timestep_features(1.1, 12), std::invalid_argument);
    Tensor f = timestep_features(0.0, 12);
    CHECK(f.dim(1) == 12);
    CHECK(f[0] == 1.0);  // cos(0)
    CHECK(f[6] == 0.0);  // sin(0)
}

TEST_CASE("model config validation") {
    ModelConfig bad = tiny_config();
    bad.dim = 16;  // head_dim 8, not divisible by 6
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    ModelConfig ok = tiny_config();
    ok.validate();
    CHECK(ok.hash() != bad.hash());
}

TEST_CASE("LoRA zero-init: adapters leave the base output bit-identical") {
    ModelConfig cfg = tiny_config();
    Model with_lora(cfg, 42);
    Rng rng(7);
    // give the zero-init output head some weight so velocities are non-trivial
    auto& hw = with_lora.param("head.w").value;
    for (int64_t i = 0; i < hw.size(); ++i) (*hw.data)[i] = 0.1 * rng.normal();
    auto seq = tiny_seq(with_lora, rng, {{2, 2}});

    // perturbing only A must change nothing while B stays zero
    auto out1 = with_lora.forward(seq, 0.3);
    auto& a = with_lora.param("blocks.0.attn.q.lora_a").value;
    for (int64_t i = 0; i < a.size(); ++i) (*a.data)[i] += 1.5;
    auto out2 = with_lora.forward(seq, 0.3);
    for (int64_t i = 0; i < out1.velocity.size(); ++i) CHECK(out1.velocity[i] == out2.velocity[i]);

    // perturbing B does change the output
    auto& b = with_lora.param("blocks.0.attn.q.lora_b").value;
    (*b.data)[0] = 0.5;
    auto out3 = with_lora.forward(seq, 0.3);
    bool changed = false;
    for (int64_t i = 0; i < out1.velocity.size(); ++i) changed = changed || out1.velocity[i] != out3.velocity[i];
    CHECK(changed);
}

TEST_CASE("capture is read-only: velocities agree with and without records") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 21);
    randomize_params(model, 77);
    Rng rng(9);
    auto seq = tiny_seq(model, rng, {{2, 2}, {1, 2}});
    auto off = model.forward(seq, 0.6, false);
    auto on = model.forward(seq, 0.6, true);
    CHECK(off.records.empty());
    REQUIRE(on.records.size() == 2);
    REQUIRE(on.records[0].cond_to_noisy.size() == 2);
    CHECK(on.records[0].cond_to_noisy[0].dim(0) == 4);
    CHECK(on.records[0].cond_to_noisy[0].dim(1) == 4);
    for (int64_t i = 0; i < off.velocity.size(); ++i) CHECK(off.velocity[i] == on.velocity[i]);
}

TEST_CASE("permutation equivariance: swapping condition groups, embeddings and offsets") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 31);
    randomize_params(model, 123);
    Rng rng(11);

    Grid ga{2, 2}, gb{1, 2};
    Tensor cond_a = rand_tensor({ga.count(), cfg.token_dim}, rng);
    Tensor cond_b = rand_tensor({gb.count(), cfg.token_dim}, rng);
    Tensor noisy = rand_tensor({4, cfg.token_dim}, rng);
    Tensor text = rand_tensor({2, cfg.token_dim}, rng);

    // swapped=true assigns B's content and diagonal offset to condition slot 0
    // and A's to slot 1, while the model's embedding rows 0/1 are exchanged,
    // so every token keeps its (content, position, added embedding) triple.
    auto build = [&](bool swapped) {
        TokenSequence seq;
        seq.text_len = 2;
        seq.noisy_grid = {2, 2};
        const Tensor& first = swapped ? cond_b : cond_a;
        const Tensor& second = swapped ? cond_a : cond_b;
        Grid gfirst = swapped ? gb : ga, gsecond = swapped ? ga : gb;
        seq.cond_grids = {gfirst, gsecond};
        seq.tokens = concat({text, noisy, first, second}, 0);
        seq.tags.assign(2, SegmentTag{SegmentTag::Text, -1});
        seq.tags.insert(seq.tags.end(), 4, SegmentTag{SegmentTag::Noisy, -1});
        seq.tags.insert(seq.tags.end(), static_cast<size_t>(gfirst.count()), SegmentTag{SegmentTag::Cond, 0});
        seq.tags.insert(seq.tags.end(), static_cast<size_t>(gsecond.count()), SegmentTag{SegmentTag::Cond, 1});
        seq.positions = {{0, 0, 0}, {0, 0, 1}};
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 2; ++c) seq.positions.push_back({1, r, c});
        auto add_pos = [&](Grid g, int mult) {
            for (int r = 0; r < g.rows; ++r)
                for (int c = 0; c < g.cols; ++c) seq.positions.push_back({1, r + mult * 2, c + mult * 2});
        };
        if (!swapped) {
            add_pos(ga, 1);
            add_pos(gb, 2);
        } else {
            add_pos(gb, 2);
            add_pos(ga, 1);
        }
        return seq;
    };

    auto s1 = build(false);
    auto s2 = build(true);
    auto o1 = model.forward(s1, 0.4);

    auto& ce = model.param("cond_embed.table").value;
    const int d = cfg.dim;
    for (int j = 0; j < d; ++j) std::swap((*ce.data)[j], (*ce.data)[d + j]);
    auto o2 = model.forward(s2, 0.4);

    for (int64_t i = 0; i < o1.velocity.size(); ++i)
        CHECK(o1.velocity[i] == doctest::Approx(o2.velocity[i]).epsilon(1e-11));
}

TEST_CASE("forward is deterministic given seed and inputs") {
    ModelConfig cfg = tiny_config();
    Model m1(cfg, 99), m2(cfg, 99);
    Rng r1(13), r2(13);
    auto s1 = tiny_seq(m1, r1, {{2, 2}});
    auto s2 = tiny_seq(m2, r2, {{2, 2}});
    auto o1 = m1.forward(s1, 0.25, true);
    auto o2 = m2.forward(s2, 0.25, true);
    for (int64_t i = 0; i < o1.velocity.size(); ++i) CHECK(o1.velocity[i] == o2.velocity[i]);
    for (int64_t i = 0; i < o1.records[0].cond_to_noisy[0].size(); ++i)
        CHECK(o1.records[0].cond_to_noisy[0][i] == o2.records[0].cond_to_noisy[0][i]);
}

TEST_CASE("full transformer gradients match finite differences") {
    ModelConfig cfg = tiny_config();
    cfg.vocab_size = 8;
    Model model(cfg, 5);
    randomize_params(model, 55);

    Rng rng(17);
    Grid cg{2, 2};
    Tensor cond = rand_tensor({cg.count(), cfg.token_dim}, rng);
    Tensor noisy = rand_tensor({4, cfg.token_dim}, rng);
    Tensor target = rand_tensor({4, cfg.token_dim}, rng);
    Tensor route_w = rand_tensor({cg.count(), 4}, rng, 0.3);

    auto make_seq = [&]() {
        EncodedPrompt enc;
        enc.tokens = embedding_lookup(model.embedding_table(), {1, 3});
        enc.spans = {{0, Span{1, 2}}};
        return compose_sequence(enc, noisy, {2, 2}, {cond}, {cg});
    };

    // loss touches the velocity and the captured routing/placeholder blocks
    auto loss_fn = [&]() {
        auto out = model.forward(make_seq(), 0.35, true);
        Tensor loss = mse(out.velocity, target.detached());
        for (auto& rec : out.records) {
            loss = add(loss, scale(mse(rec.cond_to_noisy[0], route_w.detached()), 0.5));
            loss = add(loss, scale(sum(softmax(rec.cond_to_placeholder[0])), 0.1));
        }
        return loss;
    };

    std::vector<std::string> names = {
        "embed.table", "txt_in.w", "img_in.w", "cond_map.w", "cond_embed.table",
        "blocks.0.attn.q.w", "blocks.0.attn.k.lora_a", "blocks.0.attn.v.lora_b",
        "blocks.0.mlp.fc1.w", "blocks.0.mod.w", "blocks.1.attn.o.w", "blocks.1.mlp.fc2.lora_b",
        "time_mlp.fc1.w", "final_mod.w", "head.w", "head.lora_a",
    };

    for (auto* p : model.parameters()) {
        p->value.zero_grad();
        p->value.node = -1;
    }
    {
        TapeScope scope;
        backward(loss_fn());
    }

    double worst = 0;
    std::string worst_name;
    for (const auto& name : names) {
        auto& p = model.param(name);
        std::vector<Tensor> leaves = {p.value};
        std::vector<std::vector<double>> analytic = {*p.value.grad};
        auto fwd = [&]() { return loss_fn().value(); };
        auto res = rflow::testing::finite_difference_check(leaves, analytic, fwd, 1e-5);
        if (res.max_rel_err > worst) {
            worst = res.max_rel_err;
            worst_name = name;
        }
    }
    INFO("worst parameter: ", worst_name, " rel err ", worst);
    CHECK(worst < 1e-4);
}
