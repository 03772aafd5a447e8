#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "phn/diagnostics.hpp"
#include "phn/errors.hpp"
#include "phn/experiments.hpp"

using namespace phn;
namespace fs = std::filesystem;

namespace {

const std::string kFixtures = PHN_FIXTURE_DIR;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& stem) : path(fs::temp_directory_path() / stem) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

std::string slurp(const fs::path& path) {
    std::ifstream in(path);
    REQUIRE(bool(in));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// A small generated dataset on disk plus a RunConfig sized to finish fast.
RunConfig tiny_run(const TempDir& data_dir, const TempDir& out_dir) {
    SyntheticSpec spec;
    spec.field_count = 3;
    spec.vocab_size_per_field = 7;
    spec.sample_count = 240;
    spec.seed = 5;
    save_synthetic(generate_synthetic(spec), spec, data_dir.str());

    RunConfig config;
    config.model.vocab_sizes.clear();
    config.model.embed_dim = 4;
    config.model.cross_depth = 1;
    config.model.field_depth = 1;
    config.model.ffn_depth = 1;
    config.model.seed = 3;
    config.train.epochs = 2;
    config.train.batch_size = 32;
    config.train.seed = 9;
    config.data.format = "synthetic";
    config.data.path = data_dir.str();
    config.data.split_fractions = {0.5, 0.25, 0.25};
    config.output_dir = out_dir.str();
    config.deterministic = true;
    return config;
}

}  // namespace

TEST_CASE("data config validation") {
    DataConfig d;
    d.path = "x";
    CHECK_NOTHROW(d.validate());

    DataConfig bad = d;
    bad.format = "libsvm";
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("format"), ConfigError);

    bad = d;
    bad.path.clear();
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("path"), ConfigError);

    bad = d;
    bad.min_frequency = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = d;
    bad.split_fractions = {0.5, 0.5};
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("split_fractions"), ConfigError);

    bad = d;
    bad.split_fractions = {0.5, 0.5, 0.0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = d;
    bad.split_fractions = {0.5, 0.3, 0.3};
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("sum"), ConfigError);
}

TEST_CASE("run config json round trip") {
    RunConfig c;
    c.model.vocab_sizes = {4, 5};
    c.model.embed_dim = 6;
    c.model.head_count = 2;
    c.model.residual = ResidualMode::prl;
    c.model.bn = BnMode::private_bn;
    c.model.pattern = SelectionPattern::parse("sa+Psg");
    c.train.epochs = 7;
    c.train.batch_size = 33;
    c.train.optimizer.kind = OptimizerKind::sgd;
    c.train.optimizer.learning_rate = 0.125;
    c.train.patience = 2;
    c.train.eval_every = 3;
    c.train.seed = 77;
    c.data.format = "criteo";
    c.data.path = "some/file.txt";
    c.data.min_frequency = 4;
    c.data.split_fractions = {0.7, 0.2, 0.1};
    c.data.split_seed = 12;
    c.output_dir = "out";
    c.deterministic = true;

    RunConfig back = RunConfig::from_json(c.to_json());
    CHECK(back.model.vocab_sizes == c.model.vocab_sizes);
    CHECK(back.model.embed_dim == 6);
    CHECK(back.model.head_count == 2);
    CHECK(back.model.residual == ResidualMode::prl);
    CHECK(back.model.bn == BnMode::private_bn);
    CHECK(back.model.pattern.to_string() == "sa+Psg");
    CHECK(back.train.epochs == 7);
    CHECK(back.train.batch_size == 33);
    CHECK(back.train.optimizer.kind == OptimizerKind::sgd);
    CHECK(back.train.optimizer.learning_rate == 0.125);
    CHECK(back.train.patience == 2);
    CHECK(back.train.eval_every == 3);
    CHECK(back.train.seed == 77);
    CHECK(back.data.format == "criteo");
    CHECK(back.data.path == "some/file.txt");
    CHECK(back.data.min_frequency == 4);
    CHECK(back.data.split_fractions == c.data.split_fractions);
    CHECK(back.data.split_seed == 12);
    CHECK(back.output_dir == "out");
    CHECK(back.deterministic);

    // vocab sizes may stay unresolved through a round trip
    c.model.vocab_sizes.clear();
    CHECK(RunConfig::from_json(c.to_json()).model.vocab_sizes.empty());

    CHECK_THROWS_AS(RunConfig::from_json("{"), ConfigError);
    CHECK_THROWS_WITH_AS(RunConfig::from_json("{}"), doctest::Contains("path"), ConfigError);
}

TEST_CASE("config overrides follow dotted paths") {
    RunConfig c;
    c.data.path = "d";
    const std::string text = c.to_json();

    RunConfig a = RunConfig::from_json(apply_override(text, "model.embed_dim=16"));
    CHECK(a.model.embed_dim == 16);

    a = RunConfig::from_json(apply_override(text, "train.optimizer.learning_rate=0.05"));
    CHECK(a.train.optimizer.learning_rate == 0.05);

    // unquoted strings fall back to plain string values
    a = RunConfig::from_json(apply_override(text, "model.pattern=sa"));
    CHECK(a.model.pattern.to_string() == "sa");

    a = RunConfig::from_json(apply_override(text, "deterministic=true"));
    CHECK(a.deterministic);

    a = RunConfig::from_json(apply_override(text, "data.split_fractions=[0.6,0.2,0.2]"));
    CHECK(a.data.split_fractions == std::vector<double>{0.6, 0.2, 0.2});

    CHECK_THROWS_WITH_AS(apply_override(text, "model.typo_field=1"),
                         doctest::Contains("typo_field"), ConfigError);
    CHECK_THROWS_WITH_AS(apply_override(text, "no_equals"), doctest::Contains("key.path=value"),
                         ConfigError);
    CHECK_THROWS_AS(apply_override(text, "=5"), ConfigError);
}

TEST_CASE("synthetic datasets load and split") {
    TempDir dir("phn_exp_synth");
    SyntheticSpec spec;
    spec.field_count = 3;
    spec.vocab_size_per_field = 7;
    spec.sample_count = 200;
    spec.seed = 2;
    save_synthetic(generate_synthetic(spec), spec, dir.str());

    DataConfig d;
    d.format = "synthetic";
    d.path = dir.str();
    d.split_fractions = {0.5, 0.25, 0.25};
    LoadedData data = load_dataset(d);
    CHECK(data.vocab_sizes == std::vector<std::size_t>{8, 8, 8});
    CHECK(data.splits.train.size() + data.splits.validation.size() + data.splits.test.size() == 200);
    CHECK(data.splits.train.field_count == 3);
    CHECK(data.splits.test.size() == 50);
}

TEST_CASE("delimited datasets load through vocab building") {
    DataConfig d;
    d.format = "criteo";
    d.path = kFixtures + "/criteo_sample.txt";
    d.min_frequency = 1;
    d.split_fractions = {0.5, 0.25, 0.25};
    LoadedData data = load_dataset(d);
    CHECK(data.vocab_sizes.size() == 39);
    CHECK(data.splits.train.size() + data.splits.validation.size() + data.splits.test.size() == 8);
    for (std::size_t size : data.vocab_sizes) CHECK(size >= 1);
}

TEST_CASE("model config resolution against dataset vocab") {
    ModelConfig m;
    m.vocab_sizes.clear();
    m.embed_dim = 4;
    ModelConfig resolved = resolve_model_config(m, {3, 4, 5});
    CHECK(resolved.vocab_sizes == std::vector<std::size_t>{3, 4, 5});

    m.vocab_sizes = {3, 4, 5};
    CHECK_NOTHROW(resolve_model_config(m, {3, 4, 5}));

    m.vocab_sizes = {3, 4};
    CHECK_THROWS_WITH_AS(resolve_model_config(m, {3, 4, 5}), doctest::Contains("vocab_sizes"),
                         ConfigError);
}

TEST_CASE("training runs leave a replayable directory") {
    TempDir data_dir("phn_exp_train_data");
    TempDir out_dir("phn_exp_train_out");
    RunConfig config = tiny_run(data_dir, out_dir);

    TrainOutcome outcome = run_train(config);
    CHECK(!outcome.result.records.empty());
    CHECK(outcome.checkpoint_path == (out_dir.path / "checkpoint.bin").string());

    for (const char* name : {"config.json", "metrics.csv", "checkpoint.bin", "summary.json",
                             "manifest.json"}) {
        CHECK(fs::exists(out_dir.path / name));
    }

    // echo is fully resolved: vocab sizes filled in from the data
    RunConfig echoed = RunConfig::load_file((out_dir.path / "config.json").string());
    CHECK(echoed.model.vocab_sizes == std::vector<std::size_t>{8, 8, 8});
    CHECK(echoed.train.epochs == config.train.epochs);

    const std::string summary = slurp(out_dir.path / "summary.json");
    CHECK(summary.find(hex_u64(outcome.checkpoint_hash)) != std::string::npos);
    CHECK(outcome.checkpoint_hash == fnv1a_file(outcome.checkpoint_path));

    SUBCASE("eval replays the training-time test metrics") {
        EvalOutcome eval = run_eval(out_dir.str());
        CHECK(eval.logloss == doctest::Approx(outcome.test_logloss).epsilon(1e-12));
        CHECK(eval.auc == doctest::Approx(outcome.test_auc).epsilon(1e-12));
        CHECK(eval.sample_count == 60);
    }

    SUBCASE("rerunning with the same config reproduces the outcome") {
        TempDir out2("phn_exp_train_out2");
        RunConfig again = config;
        again.output_dir = out2.str();
        TrainOutcome second = run_train(again);
        CHECK(second.test_logloss == outcome.test_logloss);
        CHECK(second.test_auc == outcome.test_auc);
        CHECK(second.checkpoint_hash == outcome.checkpoint_hash);
        REQUIRE(second.result.records.size() == outcome.result.records.size());
        for (std::size_t i = 0; i < second.result.records.size(); ++i) {
            CHECK(second.result.records[i].logloss == outcome.result.records[i].logloss);
            CHECK(second.result.records[i].auc == outcome.result.records[i].auc);
        }
    }

    SUBCASE("input files are left untouched") {
        const std::string before = slurp(data_dir.path / "data.tsv");
        run_eval(out_dir.str());
        CHECK(slurp(data_dir.path / "data.tsv") == before);
    }
}

TEST_CASE("train surfaces missing data as a data error") {
    TempDir out_dir("phn_exp_missing_out");
    RunConfig config;
    config.data.format = "synthetic";
    config.data.path = (out_dir.path / "nope").string();
    config.output_dir = (out_dir.path / "run").string();
    CHECK_THROWS_AS(run_train(config), DataError);
    // the echo is written before data loading, so the failed run is replayable
    CHECK(fs::exists(out_dir.path / "run" / "config.json"));
}

TEST_CASE("grid runs write one sorted row per depth") {
    TempDir data_dir("phn_exp_grid_data");
    TempDir out_dir("phn_exp_grid_out");
    RunConfig config = tiny_run(data_dir, out_dir);
    config.train.epochs = 1;

    std::vector<GridRow> rows = run_grid(config, {2, 1});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].depth == 1);
    CHECK(rows[1].depth == 2);

    const std::string csv = slurp(out_dir.path / "grid.csv");
    CHECK(csv.rfind("depth,val_logloss,val_auc,best_epoch\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(fs::exists(out_dir.path / "manifest.json"));
}

TEST_CASE("residual/bn matrix enumerates all nine variants") {
    ModelConfig base;
    base.vocab_sizes = {4, 4};
    base.embed_dim = 4;
    std::vector<MatrixEntry> entries = residual_bn_matrix(base);
    REQUIRE(entries.size() == 9);
    CHECK(entries[0].name == "base_none");
    CHECK(entries[4].name == "rl_public");
    CHECK(entries[8].name == "prl_private");

    std::set<std::string> names;
    for (const MatrixEntry& e : entries) {
        names.insert(e.name);
        CHECK(e.model.embed_dim == 4);  // base fields preserved
        CHECK(e.model.vocab_sizes == base.vocab_sizes);
    }
    CHECK(names.size() == 9);
    CHECK(entries[0].model.residual == ResidualMode::base);
    CHECK(entries[0].model.bn == BnMode::none);
    CHECK(entries[8].model.residual == ResidualMode::prl);
    CHECK(entries[8].model.bn == BnMode::private_bn);
}

TEST_CASE("selection matrix enumerates the seven patterns") {
    ModelConfig base;
    base.vocab_sizes = {4, 4};
    std::vector<MatrixEntry> entries = selection_matrix(base);
    REQUIRE(entries.size() == 7);
    const std::vector<std::string> expected = {"embed",  "sa",     "Psa",    "sa+sg",
                                               "Psa+sg", "sa+Psg", "Psa+Psg"};
    for (std::size_t i = 0; i < entries.size(); ++i) {
        CHECK(entries[i].name == expected[i]);
        CHECK(entries[i].model.pattern.to_string() == expected[i]);
    }
}

TEST_CASE("config matrix json round trip") {
    ModelConfig base;
    base.vocab_sizes = {4, 4};
    std::vector<MatrixEntry> entries = residual_bn_matrix(base);
    std::vector<MatrixEntry> back = matrix_from_json(matrix_to_json(entries));
    REQUIRE(back.size() == entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        CHECK(back[i].name == entries[i].name);
        CHECK(back[i].model.residual == entries[i].model.residual);
        CHECK(back[i].model.bn == entries[i].model.bn);
    }

    // vocab may be omitted per entry and resolved later
    std::vector<MatrixEntry> bare =
        matrix_from_json(R"([{"name":"n1","model":{"embed_dim":4}}])");
    REQUIRE(bare.size() == 1);
    CHECK(bare[0].model.vocab_sizes.empty());
    CHECK(bare[0].model.embed_dim == 4);

    CHECK_THROWS_WITH_AS(matrix_from_json("[]"), doctest::Contains("non-empty"), ConfigError);
    CHECK_THROWS_AS(matrix_from_json(R"([{"model":{}}])"), ConfigError);
    CHECK_THROWS_WITH_AS(matrix_from_json(R"([{"name":"x"}])"), doctest::Contains("model"),
                         ConfigError);
    CHECK_THROWS_AS(matrix_from_json("{\"a\":1}"), ConfigError);
}

TEST_CASE("diagnose emits per-config reports and a cross-config summary") {
    TempDir data_dir("phn_exp_diag_data");
    TempDir out_dir("phn_exp_diag_out");
    RunConfig config = tiny_run(data_dir, out_dir);
    config.train.epochs = 1;

    std::vector<MatrixEntry> entries(2);
    entries[0].name = "base_none";
    entries[0].model = config.model;
    entries[1].name = "sa+sg";
    entries[1].model = config.model;
    entries[1].model.pattern = SelectionPattern::parse("sa+sg");

    DiagnoseOutcome outcome = run_diagnose(config, entries, 20);
    REQUIRE(outcome.activation_files ==
            std::vector<std::string>{"activation_base_none.csv", "activation_sa_sg.csv"});
    REQUIRE(outcome.scaling_files ==
            std::vector<std::string>{"scaling_base_none.csv", "scaling_sa_sg.csv"});
    CHECK(outcome.summary_file == "weak_summary.csv");
    for (const std::string& f : outcome.activation_files) CHECK(fs::exists(out_dir.path / f));
    for (const std::string& f : outcome.scaling_files) CHECK(fs::exists(out_dir.path / f));
    CHECK(fs::exists(out_dir.path / "weak_summary.csv"));
    CHECK(fs::exists(out_dir.path / "matrix.json"));
    CHECK(fs::exists(out_dir.path / "checkpoint_base_none.bin"));
    CHECK(fs::exists(out_dir.path / "checkpoint_sa_sg.bin"));

    // activation report: header block then 20 data rows
    const std::string act = slurp(out_dir.path / "activation_base_none.csv");
    CHECK(act.rfind("# config=base_none\n", 0) == 0);
    CHECK(std::count(act.begin(), act.end(), '\n') == 5 + 1 + 20);

    const std::string summary = slurp(out_dir.path / "weak_summary.csv");
    CHECK(summary.find("config,weak_fraction,") != std::string::npos);
    CHECK(summary.find("\nbase_none,") != std::string::npos);
    CHECK(summary.find("\nsa+sg,") != std::string::npos);

    // scaling report names every field of every tower
    const std::string scaling = slurp(out_dir.path / "scaling_sa_sg.csv");
    CHECK(scaling.find("tower,field0,field1,field2\n") != std::string::npos);
    CHECK(scaling.find("\nffn,") != std::string::npos);
    CHECK(scaling.find("\ncross,") != std::string::npos);
    CHECK(scaling.find("\nfield,") != std::string::npos);

    SUBCASE("oversized sample request fails the contract") {
        TempDir out2("phn_exp_diag_out2");
        RunConfig big = config;
        big.output_dir = out2.str();
        CHECK_THROWS_WITH_AS(run_diagnose(big, entries, 5000), doctest::Contains("test fold"),
                             ContractError);
    }

    SUBCASE("empty matrix is rejected") {
        CHECK_THROWS_AS(run_diagnose(config, {}, 10), ConfigError);
    }
}
