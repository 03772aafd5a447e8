#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "phn/errors.hpp"
#include "phn/graph.hpp"
#include "phn/rng.hpp"
#include "phn/train.hpp"

using namespace phn;

namespace {

std::vector<std::uint8_t> u8(std::initializer_list<int> v) {
    return std::vector<std::uint8_t>(v.begin(), v.end());
}

// Tiny learnable problem: one field, token decides the label.
EncodedBatch token_rule_batch(std::size_t samples, std::uint64_t seed) {
    EncodedBatch b;
    b.field_count = 1;
    RngStream rng(seed);
    for (std::size_t i = 0; i < samples; ++i) {
        const std::uint32_t token = 1 + static_cast<std::uint32_t>(rng.below(2));  // 1 or 2
        b.indices.push_back(token);
        b.labels.push_back(token == 2 ? 1 : 0);
    }
    return b;
}

ModelConfig tiny_phn_config() {
    ModelConfig c;
    c.vocab_sizes = {4, 4};
    c.embed_dim = 2;
    c.cross_depth = 1;
    c.field_depth = 1;
    c.ffn_depth = 1;
    c.seed = 5;
    return c;
}

EncodedBatch two_field_batch(std::size_t samples, std::uint64_t seed) {
    EncodedBatch b;
    b.field_count = 2;
    RngStream rng(seed);
    for (std::size_t i = 0; i < samples; ++i) {
        const std::uint32_t a = static_cast<std::uint32_t>(rng.below(4));
        const std::uint32_t c = static_cast<std::uint32_t>(rng.below(4));
        b.indices.push_back(a);
        b.indices.push_back(c);
        b.labels.push_back(((a + c) % 2) ? 1 : 0);
    }
    return b;
}

}  // namespace

TEST_CASE("auc hand-checked examples") {
    std::vector<double> s1 = {0.8, 0.3, 0.5};
    auto l1 = u8({1, 0, 1});
    CHECK(auc(s1, l1) == doctest::Approx(1.0).epsilon(1e-15));

    std::vector<double> s2 = {0.1, 0.4, 0.35, 0.8};
    auto l2 = u8({0, 0, 1, 1});
    CHECK(auc(s2, l2) == doctest::Approx(0.75).epsilon(1e-15));

    std::vector<double> s3 = {0.4, 0.4, 0.4, 0.4};
    auto l3 = u8({0, 1, 0, 1});
    CHECK(auc(s3, l3) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("auc rejects single-class labels") {
    std::vector<double> s = {0.1, 0.2};
    auto ones = u8({1, 1});
    auto zeros = u8({0, 0});
    CHECK_THROWS_WITH_AS(auc(s, ones), doctest::Contains("single class"), ContractError);
    CHECK_THROWS_AS(auc_naive(s, zeros), ContractError);
    std::vector<double> s1 = {0.1, 0.2, 0.3};
    auto l1 = u8({1, 0});
    CHECK_THROWS_AS(auc(s1, l1), ContractError);
}

TEST_CASE("auc naive boundary cases") {
    std::vector<double> sep = {0.9, 0.8, 0.2, 0.1};
    auto lab = u8({1, 1, 0, 0});
    CHECK(auc_naive(sep, lab) == 1.0);
    std::vector<double> rev = {0.1, 0.2, 0.8, 0.9};
    CHECK(auc_naive(rev, lab) == 0.0);
}

TEST_CASE("auc agrees with the pairwise oracle on random tied instances") {
    RngStream rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.below(99);
        std::vector<double> scores(n);
        std::vector<std::uint8_t> labels(n);
        bool has0 = false, has1 = false;
        for (std::size_t i = 0; i < n; ++i) {
            // coarse grid forces plenty of exact ties
            scores[i] = static_cast<double>(rng.below(8)) / 7.0;
            labels[i] = rng.bernoulli(0.4) ? 1 : 0;
            (labels[i] ? has1 : has0) = true;
        }
        if (!has0) labels[0] = 0;
        if (!has1) labels[n - 1] = 1;
        CHECK(std::abs(auc(scores, labels) - auc_naive(scores, labels)) < 1e-12);
    }
}

TEST_CASE("auc is invariant under strictly increasing transforms") {
    RngStream rng(77);
    std::vector<double> scores(40);
    std::vector<std::uint8_t> labels(40);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = rng.uniform(-2.0, 2.0);
        labels[i] = rng.bernoulli(0.5) ? 1 : 0;
    }
    labels[0] = 0;
    labels[1] = 1;
    const double base = auc(scores, labels);
    std::vector<double> expd = scores, aff = scores;
    for (double& v : expd) v = std::exp(v);
    for (double& v : aff) v = 2.0 * v + 3.0;
    CHECK(auc(expd, labels) == base);
    CHECK(auc(aff, labels) == base);
}

TEST_CASE("mean_logloss matches the graph op") {
    std::vector<double> probs = {0.2, 0.9, 0.5, 1.0};  // 1.0 exercises the clamp
    auto labels = u8({0, 1, 1, 0});
    std::vector<double> dl = {0, 1, 1, 0};
    Graph g;
    NodeId p = g.constant(Tensor({4}, std::vector<double>(probs)));
    NodeId l = g.logloss(p, dl);
    CHECK(mean_logloss(probs, labels) == doctest::Approx(g.scalar_value(l)).epsilon(1e-15));
}

TEST_CASE("constant predictor at the base rate beats one half on imbalanced labels") {
    std::vector<std::uint8_t> labels(100, 0);
    for (std::size_t i = 0; i < 10; ++i) labels[i] = 1;  // 10% positive
    std::vector<double> rate(100, 0.1), half(100, 0.5);
    CHECK(mean_logloss(rate, labels) <= mean_logloss(half, labels));
}

TEST_CASE("train spec validation") {
    TrainSpec s;
    CHECK_NOTHROW(s.validate());
    TrainSpec bad = s;
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s;
    bad.batch_size = 1;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("batch_size"), ConfigError);
    bad = s;
    bad.patience = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s;
    bad.eval_every = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s;
    bad.optimizer.learning_rate = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("zero learning rate leaves parameters and metrics flat") {
    LrModel model({4}, 1);
    EncodedBatch data = token_rule_batch(20, 3);
    TrainSpec spec;
    spec.epochs = 3;
    spec.batch_size = 4;
    spec.optimizer.kind = OptimizerKind::sgd;
    spec.optimizer.learning_rate = 0.0;
    TrainResult r = train(model, data, data, spec, true);
    for (const auto& p : model.params()) {
        for (double v : p.value.data()) CHECK(v == 0.0);
    }
    REQUIRE(r.records.size() == 6);  // 3 epochs x {train,val}
    for (const MetricRecord& rec : r.records) {
        CHECK(rec.logloss == r.records[0].logloss);
        CHECK(rec.wall_time == 0.0);
    }
}

TEST_CASE("training loss strictly decreases on a separable problem") {
    LrModel model({4}, 1);
    EncodedBatch data = token_rule_batch(32, 9);
    TrainSpec spec;
    spec.epochs = 5;
    spec.batch_size = 8;
    spec.patience = 100;
    spec.optimizer.kind = OptimizerKind::sgd;
    spec.optimizer.learning_rate = 0.5;
    TrainResult r = train(model, data, data, spec, true);
    std::vector<double> train_ll;
    for (const auto& rec : r.records) {
        if (rec.split == "train") train_ll.push_back(rec.logloss);
    }
    REQUIRE(train_ll.size() == 5);
    for (std::size_t i = 1; i < train_ll.size(); ++i) {
        CHECK(train_ll[i] < train_ll[i - 1]);
    }
}

TEST_CASE("same spec and seed give identical traces") {
    auto run = [&]() {
        PhnModel model(tiny_phn_config());
        EncodedBatch tr = two_field_batch(24, 11);
        EncodedBatch val = two_field_batch(12, 12);
        TrainSpec spec;
        spec.epochs = 3;
        spec.batch_size = 6;
        spec.seed = 4;
        spec.optimizer.learning_rate = 0.01;
        return train(model, tr, val, spec, true);
    };
    TrainResult a = run();
    TrainResult b = run();
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].epoch == b.records[i].epoch);
        CHECK(a.records[i].split == b.records[i].split);
        CHECK(a.records[i].logloss == b.records[i].logloss);  // bitwise
        CHECK(a.records[i].auc == b.records[i].auc);
    }
    CHECK(a.best_val_logloss == b.best_val_logloss);
    CHECK(a.best_epoch == b.best_epoch);
}

TEST_CASE("eval_every thins the metric trace") {
    LrModel model({4}, 1);
    EncodedBatch data = token_rule_batch(16, 21);
    TrainSpec spec;
    spec.epochs = 6;
    spec.batch_size = 4;
    spec.eval_every = 2;
    spec.patience = 100;
    spec.optimizer.learning_rate = 0.1;
    TrainResult r = train(model, data, data, spec, true);
    REQUIRE(r.records.size() == 6);  // epochs 2, 4, 6; train+val each
    CHECK(r.records[0].epoch == 2);
    CHECK(r.records[2].epoch == 4);
    CHECK(r.records[4].epoch == 6);
}

TEST_CASE("returned model carries the best validation logloss") {
    PhnModel model(tiny_phn_config());
    EncodedBatch tr = two_field_batch(40, 31);
    EncodedBatch val = two_field_batch(20, 32);
    TrainSpec spec;
    spec.epochs = 8;
    spec.batch_size = 8;
    spec.patience = 2;
    spec.optimizer.learning_rate = 0.05;
    TrainResult r = train(model, tr, val, spec, true);

    double best_recorded = std::numeric_limits<double>::infinity();
    for (const auto& rec : r.records) {
        if (rec.split == "val") best_recorded = std::min(best_recorded, rec.logloss);
    }
    CHECK(r.best_val_logloss == best_recorded);
    // the restored parameters reproduce exactly that logloss
    std::vector<double> probs = predict(model, val, spec.batch_size);
    CHECK(mean_logloss(probs, val.labels) == doctest::Approx(best_recorded).epsilon(1e-12));
}

TEST_CASE("trailing singleton minibatch is dropped") {
    // 9 samples, batch 4 -> 4 + 4 + dropped 1; must not trip bn's size check
    ModelConfig c = tiny_phn_config();
    c.bn = BnMode::private_bn;
    PhnModel model(c);
    EncodedBatch tr = two_field_batch(9, 41);
    EncodedBatch val = two_field_batch(8, 42);
    TrainSpec spec;
    spec.epochs = 2;
    spec.batch_size = 4;
    spec.optimizer.learning_rate = 0.01;
    CHECK_NOTHROW(train(model, tr, val, spec, true));
}

TEST_CASE("non-finite loss aborts with context") {
    PhnModel model(tiny_phn_config());
    model.params().at(0).value[0] = std::numeric_limits<double>::quiet_NaN();
    EncodedBatch tr = two_field_batch(8, 51);
    TrainSpec spec;
    spec.epochs = 1;
    spec.batch_size = 4;
    CHECK_THROWS_WITH_AS(train(model, tr, tr, spec, true), doctest::Contains("epoch 1"),
                         NumericError);
}

TEST_CASE("grid search rows are sorted and reproducible") {
    ModelConfig base = tiny_phn_config();
    EncodedBatch tr = two_field_batch(24, 61);
    EncodedBatch val = two_field_batch(12, 62);
    TrainSpec spec;
    spec.epochs = 2;
    spec.batch_size = 6;
    spec.optimizer.learning_rate = 0.01;

    auto rows = grid_search(base, {3, 1, 2}, tr, val, spec);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].depth == 1);
    CHECK(rows[1].depth == 2);
    CHECK(rows[2].depth == 3);

    auto single = grid_search(base, {2}, tr, val, spec);
    REQUIRE(single.size() == 1);
    CHECK(single[0].depth == 2);
    CHECK(single[0].val_logloss == rows[1].val_logloss);  // same seed, same cell
}

TEST_CASE("grid search tags failures with the depth") {
    ModelConfig bad = tiny_phn_config();
    bad.leaky_slope = -1.0;  // every cell fails to build
    EncodedBatch tr = two_field_batch(8, 71);
    TrainSpec spec;
    spec.epochs = 1;
    spec.batch_size = 4;
    CHECK_THROWS_WITH_AS(grid_search(bad, {2}, tr, tr, spec), doctest::Contains("depth 2"),
                         ConfigError);
    CHECK_THROWS_AS(grid_search(bad, {}, tr, tr, spec), ConfigError);
}

TEST_CASE("metrics csv layout is stable") {
    std::vector<MetricRecord> records = {
        {1, "train", 0.6931471805599453, 0.5, 0.0},
        {1, "val", 0.5, 0.75, 0.0},
    };
    const auto path =
        (std::filesystem::temp_directory_path() / "phn_metrics_test.csv").string();
    write_metrics_csv(records, path);
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(ss.str() ==
          "epoch,split,logloss,auc,wall_time\n"
          "1,train,0.69314718055994529,0.5,0.000000\n"
          "1,val,0.5,0.75,0.000000\n");
    std::filesystem::remove(path);
}
