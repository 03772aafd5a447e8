#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "phn/data.hpp"
#include "phn/model.hpp"
#include "phn/optim.hpp"

namespace phn {

// Rank-based (Mann-Whitney) AUC with average ranks for ties: equals
// P(score+ > score-) + 0.5 P(tie). Throws ContractError when labels are all
// one class.
double auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

// O(P*N) pairwise oracle for auc; same contract.
double auc_naive(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Mean binary cross-entropy with the same clamp as the graph op.
double mean_logloss(std::span<const double> probs, std::span<const std::uint8_t> labels);

// Eval-mode probabilities over the whole set, in chunks.
std::vector<double> predict(Model& model, const EncodedBatch& data, std::size_t batch_size = 1024);

struct TrainSpec {
    std::size_t epochs = 10;
    std::size_t batch_size = 256;
    OptimizerConfig optimizer;
    std::size_t patience = 3;    // evals without val improvement before stopping
    std::size_t eval_every = 1;  // epochs between metric evaluations
    std::uint64_t seed = 1;

    void validate() const;
};

struct MetricRecord {
    std::size_t epoch = 0;  // 1-based, recorded after the epoch completes
    std::string split;      // "train" | "val"
    double logloss = 0.0;
    double auc = 0.0;
    double wall_time = 0.0;  // seconds since training started; 0 when deterministic
};

struct TrainResult {
    std::vector<MetricRecord> records;
    double best_val_logloss = 0.0;
    std::size_t best_epoch = 0;
};

// Mini-batch training with per-epoch seeded shuffling, optimizer steps on
// mean logloss, periodic metrics, and patience-based early stopping. The
// model is left holding the best-validation parameters. Trailing minibatches
// of size 1 are dropped (batch norm needs >= 2 samples in train mode).
// deterministic_time zeroes wall_time fields so traces compare bitwise.
TrainResult train(Model& model, const EncodedBatch& train_data, const EncodedBatch& val_data,
                  const TrainSpec& spec, bool deterministic_time = false);

struct GridRow {
    std::size_t depth = 0;
    double val_logloss = 0.0;
    double val_auc = 0.0;
    std::size_t best_epoch = 0;
};

// Trains one model per depth with all three towers set to that depth,
// from scratch each time, same seed; rows come back sorted by depth.
std::vector<GridRow> grid_search(const ModelConfig& base, const std::vector<std::size_t>& depths,
                                 const EncodedBatch& train_data, const EncodedBatch& val_data,
                                 const TrainSpec& spec);

// One header line plus one line per record:
// epoch,split,logloss,auc,wall_time
void write_metrics_csv(const std::vector<MetricRecord>& records, const std::string& path);

}  // namespace phn
