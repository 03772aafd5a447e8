#include "phn/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "phn/errors.hpp"
#include "phn/graph.hpp"
#include "phn/rng.hpp"

namespace phn {

namespace {

void require_both_classes(std::span<const std::uint8_t> labels, const char* who) {
    if (labels.empty()) throw ContractError(std::string(who) + ": empty labels");
    const std::uint8_t first = labels[0];
    for (std::uint8_t l : labels) {
        if (l != first) return;
    }
    throw ContractError(std::string(who) + ": labels contain a single class; metric undefined");
}

void require_same_length(std::size_t a, std::size_t b, const char* who) {
    if (a != b) {
        throw ContractError(std::string(who) + ": " + std::to_string(a) + " scores vs " +
                            std::to_string(b) + " labels");
    }
}

}  // namespace

double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    require_same_length(scores.size(), labels.size(), "auc");
    require_both_classes(labels, "auc");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // average ranks over tie groups, 1-based
    std::vector<double> rank(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>((i + 1) + (j + 1));
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }

    double pos_rank_sum = 0.0;
    std::size_t positives = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (labels[k]) {
            pos_rank_sum += rank[k];
            ++positives;
        }
    }
    const std::size_t negatives = n - positives;
    const double p = static_cast<double>(positives);
    return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(negatives));
}

double auc_naive(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    require_same_length(scores.size(), labels.size(), "auc_naive");
    require_both_classes(labels, "auc_naive");
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

double mean_logloss(std::span<const double> probs, std::span<const std::uint8_t> labels) {
    require_same_length(probs.size(), labels.size(), "mean_logloss");
    if (probs.empty()) throw ContractError("mean_logloss: empty input");
    const double lo = Graph::kProbClamp, hi = 1.0 - Graph::kProbClamp;
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = std::clamp(probs[i], lo, hi);
        acc -= labels[i] ? std::log(p) : std::log(1.0 - p);
    }
    return acc / static_cast<double>(probs.size());
}

std::vector<double> predict(Model& model, const EncodedBatch& data, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("predict: batch_size must be positive");
    std::vector<double> out;
    out.reserve(data.size());
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t count = std::min(batch_size, data.size() - start);
        rows.resize(count);
        std::iota(rows.begin(), rows.end(), start);
        EncodedBatch chunk = data.take(rows);
        Graph g;
        NodeId prob = model.prob_node(g, chunk, /*train=*/false);
        const Tensor& p = g.value(prob);
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    return out;
}

void TrainSpec::validate() const {
    if (epochs < 1) throw ConfigError("train spec: epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("train spec: batch_size must be >= 2");
    if (patience < 1) throw ConfigError("train spec: patience must be >= 1");
    if (eval_every < 1) throw ConfigError("train spec: eval_every must be >= 1");
    if (!(optimizer.learning_rate >= 0.0)) {
        throw ConfigError("train spec: learning_rate must be >= 0");
    }
    if (!(optimizer.weight_decay >= 0.0)) {
        throw ConfigError("train spec: weight_decay must be >= 0");
    }
}

TrainResult train(Model& model, const EncodedBatch& train_data, const EncodedBatch& val_data,
                  const TrainSpec& spec, bool deterministic_time) {
    spec.validate();
    if (train_data.size() < 2) throw ContractError("train: need at least 2 training samples");
    if (val_data.size() < 1) throw ContractError("train: empty validation set");

    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&]() {
        if (deterministic_time) return 0.0;
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    RngStream shuffle_rng(spec.seed);
    Optimizer optimizer(spec.optimizer);
    TrainResult result;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    std::size_t evals_since_best = 0;
    std::vector<Tensor> best_values = model.params().snapshot_values();

    std::vector<std::size_t> order(train_data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<std::size_t> rows;

    for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        shuffle(order, shuffle_rng);
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += spec.batch_size, ++batch_index) {
            const std::size_t count = std::min(spec.batch_size, order.size() - start);
            if (count < 2) break;  // drop trailing singleton: bn train mode needs >= 2
            rows.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                        order.begin() + static_cast<std::ptrdiff_t>(start + count));
            EncodedBatch mb = train_data.take(rows);
            const std::vector<double> labels = mb.labels_as_double();

            Graph g;
            NodeId prob = model.prob_node(g, mb, /*train=*/true);
            NodeId loss = g.logloss(prob, labels);
            const double loss_value = g.scalar_value(loss);
            if (!std::isfinite(loss_value)) {
                throw NumericError("train: non-finite loss " + std::to_string(loss_value) +
                                   " at epoch " + std::to_string(epoch + 1) + ", minibatch " +
                                   std::to_string(batch_index));
            }
            model.params().zero_grads();
            g.backward(loss);
            optimizer.step(model.params());
        }

        const bool scheduled = (epoch + 1) % spec.eval_every == 0;
        const bool last = epoch + 1 == spec.epochs;
        if (!scheduled && !last) continue;

        const std::vector<double> train_probs = predict(model, train_data, spec.batch_size);
        const std::vector<double> val_probs = predict(model, val_data, spec.batch_size);
        const double t = elapsed();
        result.records.push_back({epoch + 1, "train", mean_logloss(train_probs, train_data.labels),
                                  auc(train_probs, train_data.labels), t});
        const double val_ll = mean_logloss(val_probs, val_data.labels);
        result.records.push_back(
            {epoch + 1, "val", val_ll, auc(val_probs, val_data.labels), elapsed()});

        if (val_ll < best) {
            best = val_ll;
            best_epoch = epoch + 1;
            best_values = model.params().snapshot_values();
            evals_since_best = 0;
        } else {
            ++evals_since_best;
            if (evals_since_best >= spec.patience) break;
        }
    }

    model.params().restore_values(best_values);
    result.best_val_logloss = best;
    result.best_epoch = best_epoch;
    return result;
}

std::vector<GridRow> grid_search(const ModelConfig& base, const std::vector<std::size_t>& depths,
                                 const EncodedBatch& train_data, const EncodedBatch& val_data,
                                 const TrainSpec& spec) {
    if (depths.empty()) throw ConfigError("grid_search: empty depth list");
    std::vector<std::size_t> sorted = depths;
    std::sort(sorted.begin(), sorted.end());
    std::vector<GridRow> rows;
    for (std::size_t depth : sorted) {
        auto tag = [&](const std::string& what) {
            return "grid_search depth " + std::to_string(depth) + ": " + what;
        };
        try {
            ModelConfig c = base;
            c.cross_depth = depth;
            c.field_depth = depth;
            c.ffn_depth = depth;
            PhnModel model(c);
            TrainResult r = train(model, train_data, val_data, spec, /*deterministic_time=*/true);
            const std::vector<double> val_probs = predict(model, val_data, spec.batch_size);
            rows.push_back({depth, r.best_val_logloss, auc(val_probs, val_data.labels), r.best_epoch});
        } catch (const NumericError& e) {
            throw NumericError(tag(e.what()));
        } catch (const DataError& e) {
            throw DataError(tag(e.what()));
        } catch (const ConfigError& e) {
            throw ConfigError(tag(e.what()));
        } catch (const ContractError& e) {
            throw ContractError(tag(e.what()));
        }
    }
    return rows;
}

void write_metrics_csv(const std::vector<MetricRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("metrics csv '" + path + "': cannot open for writing");
    out << "epoch,split,logloss,auc,wall_time\n";
    char buf[160];
    for (const MetricRecord& r : records) {
        std::snprintf(buf, sizeof(buf), "%zu,%s,%.17g,%.17g,%.6f\n", r.epoch, r.split.c_str(),
                      r.logloss, r.auc, r.wall_time);
        out << buf;
    }
    if (!out) throw DataError("metrics csv '" + path + "': write failed");
}

}  // namespace phn
