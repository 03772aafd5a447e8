#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "phn/data.hpp"
#include "phn/model.hpp"
#include "phn/train.hpp"

namespace phn {

// Where the rows come from and how they are carved into train/val/test.
struct DataConfig {
    std::string format = "synthetic";  // synthetic | criteo | avazu
    std::string path;                  // synthetic: generated directory; otherwise the data file
    std::size_t min_frequency = 2;     // vocab threshold for criteo/avazu
    std::vector<double> split_fractions = {0.8, 0.1, 0.1};
    std::uint64_t split_seed = 1;

    void validate() const;
};

// Everything one run needs. The resolved config is echoed into the run
// directory before any work starts, and every command can be replayed from
// that echo plus the referenced data files.
struct RunConfig {
    ModelConfig model;  // vocab_sizes may be empty: filled from the dataset
    TrainSpec train;
    DataConfig data;
    std::string output_dir = "run";
    bool deterministic = false;

    void validate() const;  // everything except model.vocab_sizes resolution
    std::string to_json() const;
    static RunConfig from_json(const std::string& text);
    static RunConfig load_file(const std::string& path);
};

// Applies one "a.b.c=value" assignment to serialized config text. The dotted
// path must already exist in the document (configs serialize fully
// populated, so a missing path is a typo); values parse as JSON scalars with
// a fallback to plain strings.
std::string apply_override(const std::string& json_text, const std::string& assignment);

struct LoadedData {
    SplitBatches splits;
    std::vector<std::size_t> vocab_sizes;
};

LoadedData load_dataset(const DataConfig& config);

// Fills model.vocab_sizes from the data when empty, otherwise insists they
// agree; returns the validated config.
ModelConfig resolve_model_config(ModelConfig model, const std::vector<std::size_t>& vocab_sizes);

struct TrainOutcome {
    TrainResult result;
    double test_logloss = 0.0;
    double test_auc = 0.0;
    std::uint64_t checkpoint_hash = 0;
    std::string checkpoint_path;
};

// Echoes config.json, trains, and writes metrics.csv, checkpoint.bin,
// summary.json, and manifest.json under config.output_dir.
TrainOutcome run_train(const RunConfig& config);

struct EvalOutcome {
    double logloss = 0.0;
    double auc = 0.0;
    std::size_t sample_count = 0;
};

// Replays a finished run: loads <run_dir>/config.json + checkpoint.bin,
// rebuilds the data split, and evaluates the test fold with the same code
// path as training-time final metrics.
EvalOutcome run_eval(const std::string& run_dir);

// One model per depth (all towers at that depth); writes grid.csv.
std::vector<GridRow> run_grid(const RunConfig& config, const std::vector<std::size_t>& depths);

void write_grid_csv(const std::vector<GridRow>& rows, const std::string& path);

// A named model variant inside a diagnostics matrix.
struct MatrixEntry {
    std::string name;
    ModelConfig model;
};

// residual mode x batch-norm mode over a base config: 9 entries named
// "<residual>_<bn>" in a fixed order.
std::vector<MatrixEntry> residual_bn_matrix(const ModelConfig& base);

// The seven feature-selection patterns over a base config, named by pattern.
std::vector<MatrixEntry> selection_matrix(const ModelConfig& base);

std::string matrix_to_json(const std::vector<MatrixEntry>& entries);
std::vector<MatrixEntry> matrix_from_json(const std::string& text);

struct DiagnoseOutcome {
    // per-entry activation dump files, in matrix order
    std::vector<std::string> activation_files;
    std::string summary_file;
    std::vector<std::string> scaling_files;
};

// Trains every matrix entry on the same split and emits, under
// config.output_dir: activation_<name>.csv per entry, weak_summary.csv
// across entries, scaling_<name>.csv per entry, plus checkpoints and a
// manifest. activation_samples rows are drawn from the test fold.
DiagnoseOutcome run_diagnose(const RunConfig& config, const std::vector<MatrixEntry>& entries,
                             std::size_t activation_samples = 200);

}  // namespace phn
