#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "phn/errors.hpp"
#include "phn/gradcheck.hpp"
#include "phn/ssg.hpp"

using namespace phn;

namespace {

EncodedBatch small_batch(std::size_t rows, std::size_t fields, std::uint64_t seed,
                         const std::vector<std::size_t>& vocab_sizes) {
    RngStream rng(seed);
    EncodedBatch b;
    b.field_count = fields;
    for (std::size_t r = 0; r < rows; ++r) {
        b.labels.push_back(rng.bernoulli(0.5));
        for (std::size_t f = 0; f < fields; ++f) {
            b.indices.push_back(static_cast<std::uint32_t>(rng.below(vocab_sizes[f])));
        }
    }
    return b;
}

}  // namespace

TEST_CASE("selection pattern parsing covers the full grid") {
    auto p = SelectionPattern::parse("embed");
    CHECK(p.mode == SelectionMode::embed);
    CHECK(!p.uses_attention());
    CHECK(!p.uses_gate());
    CHECK(p.to_string() == "embed");

    p = SelectionPattern::parse("sa");
    CHECK(p.mode == SelectionMode::sa);
    CHECK(p.attention == Sharing::shared);
    CHECK(!p.uses_gate());

    p = SelectionPattern::parse("Psa");
    CHECK(p.attention == Sharing::per_tower);
    CHECK(p.to_string() == "Psa");

    p = SelectionPattern::parse("Psa+sg");
    CHECK(p.mode == SelectionMode::sg);
    CHECK(p.attention == Sharing::per_tower);
    CHECK(p.gate == Sharing::shared);
    CHECK(p.to_string() == "Psa+sg");

    p = SelectionPattern::parse("sa+Psg");
    CHECK(p.attention == Sharing::shared);
    CHECK(p.gate == Sharing::per_tower);

    p = SelectionPattern::parse("Psa+Psg");
    CHECK(p.gate == Sharing::per_tower);
    CHECK(p.to_string() == "Psa+Psg");

    CHECK(SelectionPattern::parse("sa+sg").to_string() == "sa+sg");
    CHECK_THROWS_AS(SelectionPattern::parse("bogus"), ConfigError);
    CHECK_THROWS_AS(SelectionPattern::parse("sa+bogus"), ConfigError);
    CHECK_THROWS_AS(SelectionPattern::parse("sg"), ConfigError);
}

TEST_CASE("embedding init scale and lookup wiring") {
    ParameterStore ps;
    RngStream rng(3);
    auto emb = make_embedding(ps, {5, 7}, 4, rng, "emb");
    CHECK(emb.fields.size() == 2);
    const double bound = 1.0 / 2.0;  // 1/sqrt(4)
    double spread = 0.0;
    for (Parameter* t : emb.fields) {
        for (double v : t->value.data()) {
            CHECK(std::abs(v) <= bound);
            spread = std::max(spread, std::abs(v));
        }
    }
    CHECK(spread > 0.05);  // actually randomized, not zeros

    EncodedBatch batch;
    batch.field_count = 2;
    batch.indices = {3, 0, 1, 6};
    batch.labels = {1, 0};
    Graph g;
    NodeId e = embed_forward(g, emb, batch);
    CHECK(g.value(e).shape() == Shape{2, 2, 4});
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(g.value(e)(0, 0, c) == emb.fields[0]->value(3, c));
        CHECK(g.value(e)(0, 1, c) == emb.fields[1]->value(0, c));
        CHECK(g.value(e)(1, 1, c) == emb.fields[1]->value(6, c));
    }
}

TEST_CASE("attention with one field is exactly the value projection") {
    ParameterStore ps;
    RngStream rng(5);
    auto emb = make_embedding(ps, {6}, 4, rng, "emb");
    auto att = make_attention(ps, 4, 1, rng, "att");

    EncodedBatch batch;
    batch.field_count = 1;
    batch.indices = {2, 5};
    batch.labels = {0, 1};
    Graph g;
    NodeId e = embed_forward(g, emb, batch);
    NodeId out = attention_forward(g, e, att);
    // softmax over a single field is the weight 1, so out = e · W_V
    for (std::size_t s = 0; s < 2; ++s) {
        for (std::size_t c = 0; c < 4; ++c) {
            double want = 0.0;
            for (std::size_t k = 0; k < 4; ++k) want += g.value(e)(s, 0, k) * att.wv->value(k, c);
            CHECK(g.value(out)(s, 0, c) == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("zero query/key weights give uniform attention") {
    ParameterStore ps;
    RngStream rng(6);
    auto emb = make_embedding(ps, {4, 4, 4}, 4, rng, "emb");
    auto att = make_attention(ps, 4, 1, rng, "att");
    att.wq->value.fill(0.0);
    att.wk->value.fill(0.0);

    EncodedBatch batch;
    batch.field_count = 3;
    batch.indices = {1, 2, 3};
    batch.labels = {1};
    Graph g;
    NodeId e = embed_forward(g, emb, batch);
    NodeId out = attention_forward(g, e, att);
    // uniform weights 1/3: every field gets the mean of the projected rows
    for (std::size_t c = 0; c < 4; ++c) {
        double mean = 0.0;
        for (std::size_t f = 0; f < 3; ++f) {
            for (std::size_t k = 0; k < 4; ++k) mean += g.value(e)(0, f, k) * att.wv->value(k, c);
        }
        mean /= 3.0;
        for (std::size_t f = 0; f < 3; ++f) {
            CHECK(g.value(out)(0, f, c) == doctest::Approx(mean).epsilon(1e-12));
        }
    }
}

TEST_CASE("multi-head attention matches a direct dense evaluation") {
    const std::size_t B = 2, F = 3, d = 4, heads = 2, dk = d / heads;
    ParameterStore ps;
    RngStream rng(8);
    auto emb = make_embedding(ps, {5, 5, 5}, d, rng, "emb");
    auto att = make_attention(ps, d, heads, rng, "att");

    EncodedBatch batch;
    batch.field_count = F;
    batch.indices = {1, 2, 3, 4, 0, 2};
    batch.labels = {1, 0};
    Graph g;
    NodeId e = embed_forward(g, emb, batch);
    NodeId out = attention_forward(g, e, att);

    // independent re-evaluation with plain loops
    auto proj = [&](Parameter* w, std::size_t s, std::size_t f, std::size_t c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += g.value(e)(s, f, k) * w->value(k, c);
        return acc;
    };
    for (std::size_t s = 0; s < B; ++s) {
        for (std::size_t h = 0; h < heads; ++h) {
            // scores and row softmax for this head
            double scores[F][F];
            for (std::size_t i = 0; i < F; ++i) {
                for (std::size_t j = 0; j < F; ++j) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < dk; ++c) {
                        dot += proj(att.wq, s, i, h * dk + c) * proj(att.wk, s, j, h * dk + c);
                    }
                    scores[i][j] = dot / std::sqrt(double(dk));
                }
            }
            for (std::size_t i = 0; i < F; ++i) {
                double mx = *std::max_element(scores[i], scores[i] + F);
                double z = 0.0;
                for (std::size_t j = 0; j < F; ++j) z += std::exp(scores[i][j] - mx);
                for (std::size_t j = 0; j < F; ++j) scores[i][j] = std::exp(scores[i][j] - mx) / z;
            }
            for (std::size_t i = 0; i < F; ++i) {
                for (std::size_t c = 0; c < dk; ++c) {
                    double want = 0.0;
                    for (std::size_t j = 0; j < F; ++j) {
                        want += scores[i][j] * proj(att.wv, s, j, h * dk + c);
                    }
                    CHECK(g.value(out)(s, i, h * dk + c) == doctest::Approx(want).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("attention rejects head counts that do not divide d") {
    ParameterStore ps;
    RngStream rng(1);
    CHECK_THROWS_AS(make_attention(ps, 6, 4, rng, "att"), ConfigError);
    CHECK_THROWS_AS(make_attention(ps, 4, 0, rng, "att"), ConfigError);
    CHECK_NOTHROW(make_attention(ps, 6, 3, rng, "att"));
}

TEST_CASE("field permutation permutes attention output identically") {
    const std::size_t F = 4, d = 4;
    ParameterStore ps;
    RngStream rng(12);
    auto att = make_attention(ps, d, 2, rng, "att");
    Tensor base({1, F, d});
    for (double& v : base.data()) v = rng.uniform(-1.0, 1.0);
    std::vector<std::size_t> perm = {2, 0, 3, 1};
    Tensor permuted({1, F, d});
    for (std::size_t f = 0; f < F; ++f) {
        for (std::size_t c = 0; c < d; ++c) permuted(0, f, c) = base(0, perm[f], c);
    }

    Graph g;
    NodeId out1 = attention_forward(g, g.constant(base), att);
    NodeId out2 = attention_forward(g, g.constant(permuted), att);
    for (std::size_t f = 0; f < F; ++f) {
        for (std::size_t c = 0; c < d; ++c) {
            CHECK(g.value(out2)(0, f, c) == doctest::Approx(g.value(out1)(0, perm[f], c)).epsilon(1e-12));
        }
    }
}

TEST_CASE("gate boundaries and midpoint") {
    // each theta setting gets a fresh graph: leaves snapshot values on creation
    ParameterStore ps;
    Tensor se({1, 1, 2}, {1.0, 2.0});
    Tensor sa({1, 1, 2}, {3.0, 6.0});
    auto gate = make_gate(ps, 1, 2, "gate");

    auto run = [&]() {
        Graph g;
        NodeId out = gate_forward(g, g.constant(se), g.constant(sa), gate);
        return std::vector<double>{g.value(out)(0, 0, 0), g.value(out)(0, 0, 1)};
    };

    // theta = 0 -> G = 0.5 -> elementwise midpoint
    auto mid = run();
    CHECK(mid[0] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(mid[1] == doctest::Approx(4.0).epsilon(1e-15));

    gate.theta->value.fill(40.0);  // G -> 1: attention passes through
    auto hi = run();
    CHECK(hi[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(hi[1] == doctest::Approx(6.0).epsilon(1e-12));

    gate.theta->value.fill(-40.0);  // G -> 0: raw embedding passes through
    auto lo = run();
    CHECK(lo[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(lo[1] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("gated output is an elementwise convex combination (fuzz)") {
    RngStream rng(77);
    for (int trial = 0; trial < 300; ++trial) {
        ParameterStore ps;
        Graph g;
        Tensor se({2, 3, 2}), sa({2, 3, 2});
        for (double& v : se.data()) v = rng.uniform(-5.0, 5.0);
        for (double& v : sa.data()) v = rng.uniform(-5.0, 5.0);
        auto gate = make_gate(ps, 3, 2, "gate");
        for (double& v : gate.theta->value.data()) v = rng.uniform(-30.0, 30.0);
        NodeId out = gate_forward(g, g.constant(se), g.constant(sa), gate);
        for (std::size_t i = 0; i < se.size(); ++i) {
            double lo = std::min(se[i], sa[i]);
            double hi = std::max(se[i], sa[i]);
            CHECK(g.value(out)[i] >= lo - 1e-12);
            CHECK(g.value(out)[i] <= hi + 1e-12);
        }
    }
}

TEST_CASE("gradients flow through embed -> attention -> gate composite") {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ParameterStore ps;
        RngStream rng(seed);
        std::vector<std::size_t> vocab = {4, 4, 4};
        auto emb = make_embedding(ps, vocab, 4, rng, "emb");
        auto att = make_attention(ps, 4, 2, rng, "att");
        auto gate = make_gate(ps, 3, 4, "gate");
        for (double& v : gate.theta->value.data()) v = rng.uniform(-1.0, 1.0);
        EncodedBatch batch = small_batch(3, 3, seed + 100, vocab);
        std::vector<double> labels(batch.labels.begin(), batch.labels.end());

        auto loss_fn = [&](bool with_grad) {
            Graph g;
            NodeId e_se = embed_forward(g, emb, batch);
            NodeId e_sa = attention_forward(g, e_se, att);
            NodeId e_sg = gate_forward(g, e_se, e_sa, gate);
            NodeId flat = g.reshape(e_sg, {batch.size(), 12});
            NodeId prob = g.sigmoid(g.sum_last(flat));
            NodeId loss = g.logloss(prob, labels);
            double v = g.scalar_value(loss);
            if (with_grad) g.backward(loss);
            return v;
        };
        FdReport r = finite_difference_check(ps, loss_fn);
        worst = std::max(worst, r.max_rel_error);
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("scaling ratio identities") {
    RngStream rng(9);
    Tensor base({3, 2, 4});
    for (double& v : base.data()) v = rng.uniform(0.5, 2.0) * (rng.bernoulli(0.5) ? 1 : -1);

    Tensor same = base;
    Tensor ratio = scaling_ratio(same, base);
    CHECK(ratio.shape() == Shape{2});
    for (double r : ratio.data()) CHECK(r == doctest::Approx(1.0).epsilon(1e-6));

    Tensor doubled = base;
    for (double& v : doubled.data()) v *= 2.0;
    ratio = scaling_ratio(doubled, base);
    for (double r : ratio.data()) CHECK(r == doctest::Approx(2.0).epsilon(1e-6));

    CHECK_THROWS_AS(scaling_ratio(Tensor({2, 2}), Tensor({2, 2})), ShapeError);
}

TEST_CASE("gate at zero keeps the scaling ratio at one regardless of attention") {
    ParameterStore ps;
    RngStream rng(10);
    Tensor se({2, 2, 3});
    Tensor sa({2, 2, 3});
    for (double& v : se.data()) v = rng.uniform(0.2, 1.0);
    for (double& v : sa.data()) v = rng.uniform(-9.0, 9.0);
    auto gate = make_gate(ps, 2, 3, "gate");
    gate.theta->value.fill(-40.0);  // G ~= 0
    Graph g;
    NodeId out = gate_forward(g, g.constant(se), g.constant(sa), gate);
    Tensor ratio = scaling_ratio(g.value(out), se);
    for (double r : ratio.data()) CHECK(r == doctest::Approx(1.0).epsilon(1e-6));
}
