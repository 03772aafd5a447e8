// Command-line entry point: data generation, training, evaluation, depth
// grid search, and the diagnostics matrices, all writing into self-contained
// run directories.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "phn/data.hpp"
#include "phn/errors.hpp"
#include "phn/experiments.hpp"

namespace {

// exit codes: 0 success, 1 usage/config, 2 data, 3 numeric/contract
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::string g_error_dir;  // best-effort destination for the error record

void print_kv(const char* key, double value) {
    std::printf("%s=%.17g\n", key, value);
}

void print_kv(const char* key, const std::string& value) {
    std::printf("%s=%s\n", key, value.c_str());
}

phn::RunConfig resolve_config(const std::string& config_path,
                              const std::vector<std::string>& overrides,
                              const std::string& out_dir, bool deterministic) {
    std::ifstream in(config_path);
    if (!in) throw phn::DataError("run config '" + config_path + "': cannot open");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    for (const std::string& assignment : overrides) text = phn::apply_override(text, assignment);
    phn::RunConfig config = phn::RunConfig::from_json(text);
    if (!out_dir.empty()) config.output_dir = out_dir;
    if (deterministic) config.deterministic = true;
    g_error_dir = config.output_dir;
    return config;
}

std::vector<std::size_t> parse_depths(const std::string& csv) {
    std::vector<std::size_t> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
        const std::size_t comma = csv.find(',', start);
        const std::string tok = csv.substr(start, comma == std::string::npos ? comma : comma - start);
        try {
            if (tok.empty()) throw std::invalid_argument("empty");
            out.push_back(std::stoul(tok));
        } catch (const std::exception&) {
            throw phn::ConfigError("grid: bad depth list '" + csv + "'");
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"parallel heterogeneous network experiment harness"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic planted-interaction dataset");
    phn::SyntheticSpec synth;
    std::string gen_out = "data";
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--fields", synth.field_count, "number of categorical fields");
    gen->add_option("--vocab", synth.vocab_size_per_field, "tokens per field");
    gen->add_option("--rows", synth.sample_count, "sample count");
    gen->add_option("--pairwise-scale", synth.pairwise_weight_scale, "planted interaction strength");
    gen->add_option("--bias-scale", synth.bias_scale, "per-token bias strength");
    gen->add_option("--seed", synth.seed, "generator seed");

    // shared train-like options
    std::string config_path, out_dir;
    std::vector<std::string> overrides;
    bool deterministic = false;
    auto add_config_options = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run config JSON file")->required();
        cmd->add_option("--set", overrides, "override a config field, e.g. model.embed_dim=16");
        cmd->add_option("--out", out_dir, "override the output directory");
        cmd->add_flag("--deterministic", deterministic,
                      "bitwise-reproducible runs (zeroed wall times, no parallelism)");
    };

    auto* train = app.add_subcommand("train", "train a model and write checkpoint + metrics");
    add_config_options(train);

    auto* eval = app.add_subcommand("eval", "re-evaluate a finished run's checkpoint");
    std::string run_dir;
    eval->add_option("--run", run_dir, "run directory with config.json and checkpoint.bin")
        ->required();

    auto* grid = app.add_subcommand("grid", "depth grid search");
    add_config_options(grid);
    std::string depths_csv = "1,2,3";
    grid->add_option("--depths", depths_csv, "comma-separated tower depths");

    auto* diagnose = app.add_subcommand("diagnose", "run a config matrix and emit reports");
    add_config_options(diagnose);
    std::string matrix_path, preset = "residual-bn";
    std::size_t samples = 200;
    diagnose->add_option("--matrix", matrix_path, "config-matrix JSON file");
    diagnose->add_option("--preset", preset,
                         "built-in matrix when no file is given: residual-bn | selection");
    diagnose->add_option("--samples", samples, "activation dump size");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help/usage text
        return code == 0 ? 0 : kExitUsage;
    }

    if (gen->parsed()) {
        synth.validate();
        g_error_dir = gen_out;
        phn::save_synthetic(phn::generate_synthetic(synth), synth, gen_out);
        print_kv("data", gen_out + "/data.tsv");
        print_kv("true_probs", gen_out + "/true_probs.txt");
        print_kv("spec", gen_out + "/spec.json");
        print_kv("rows", std::to_string(synth.sample_count));
        return 0;
    }

    if (train->parsed()) {
        phn::RunConfig config = resolve_config(config_path, overrides, out_dir, deterministic);
        phn::TrainOutcome outcome = phn::run_train(config);
        print_kv("test_logloss", outcome.test_logloss);
        print_kv("test_auc", outcome.test_auc);
        print_kv("best_epoch", std::to_string(outcome.result.best_epoch));
        print_kv("checkpoint", outcome.checkpoint_path);
        print_kv("run_dir", config.output_dir);
        return 0;
    }

    if (eval->parsed()) {
        g_error_dir = run_dir;
        phn::EvalOutcome outcome = phn::run_eval(run_dir);
        print_kv("logloss", outcome.logloss);
        print_kv("auc", outcome.auc);
        print_kv("samples", std::to_string(outcome.sample_count));
        return 0;
    }

    if (grid->parsed()) {
        phn::RunConfig config = resolve_config(config_path, overrides, out_dir, deterministic);
        std::vector<phn::GridRow> rows = phn::run_grid(config, parse_depths(depths_csv));
        std::printf("depth,val_logloss,val_auc,best_epoch\n");
        for (const phn::GridRow& r : rows) {
            std::printf("%zu,%.17g,%.17g,%zu\n", r.depth, r.val_logloss, r.val_auc, r.best_epoch);
        }
        print_kv("run_dir", config.output_dir);
        return 0;
    }

    if (diagnose->parsed()) {
        phn::RunConfig config = resolve_config(config_path, overrides, out_dir, deterministic);
        std::vector<phn::MatrixEntry> entries;
        if (!matrix_path.empty()) {
            std::ifstream in(matrix_path);
            if (!in) throw phn::DataError("config matrix '" + matrix_path + "': cannot open");
            std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
            entries = phn::matrix_from_json(text);
        } else if (preset == "residual-bn") {
            entries = phn::residual_bn_matrix(config.model);
        } else if (preset == "selection") {
            entries = phn::selection_matrix(config.model);
        } else {
            throw phn::ConfigError("diagnose: unknown preset '" + preset + "'");
        }
        phn::DiagnoseOutcome outcome = phn::run_diagnose(config, entries, samples);
        for (const std::string& f : outcome.activation_files) print_kv("activation", f);
        for (const std::string& f : outcome.scaling_files) print_kv("scaling", f);
        print_kv("summary", outcome.summary_file);
        print_kv("run_dir", config.output_dir);
        return 0;
    }

    return kExitUsage;  // unreachable: a subcommand is required
}

int fail(const char* type, const std::string& message, int code) {
    nlohmann::json record;
    record["error"] = type;
    record["message"] = message;
    std::cerr << record.dump() << "\n";
    if (!g_error_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(g_error_dir, ec);
        std::ofstream out(std::filesystem::path(g_error_dir) / "error.json");
        if (out) out << record.dump(2) << "\n";
    }
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const phn::ConfigError& e) {
        return fail("ConfigError", e.what(), kExitUsage);
    } catch (const phn::DataError& e) {
        return fail("DataError", e.what(), kExitData);
    } catch (const phn::NumericError& e) {
        return fail("NumericError", e.what(), kExitNumeric);
    } catch (const phn::ShapeError& e) {
        return fail("ShapeError", e.what(), kExitNumeric);
    } catch (const phn::ContractError& e) {
        return fail("ContractError", e.what(), kExitNumeric);
    } catch (const std::exception& e) {
        return fail("InternalError", e.what(), kExitNumeric);
    }
}
