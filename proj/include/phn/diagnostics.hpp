#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "phn/data.hpp"
#include "phn/model.hpp"

namespace phn {

// Threshold on the sigmoid derivative sigma'(z) = sigma(z)(1 - sigma(z)).
// Samples whose logit magnitude exceeds the boundary sit where backprop
// signal through the output sigmoid is attenuated.
struct GradientIntervalSpec {
    double epsilon = 0.05;

    void validate() const;  // requires 0 < epsilon < 0.25 (0.25 is the peak of sigma')
    // |z*| with sigma(z*)(1 - sigma(z*)) = epsilon.
    double boundary() const;
};

enum class IntervalClass { effective, weak };
std::string to_string(IntervalClass c);

// weak iff sigma'(z) < epsilon, i.e. |z| > boundary.
IntervalClass classify_interval(double z, const GradientIntervalSpec& spec);

struct ActivationRow {
    std::size_t sample = 0;  // index within the eval batch
    std::uint8_t label = 0;
    double logit = 0.0;
    double prob = 0.0;
    double sigma_prime = 0.0;
    IntervalClass interval = IntervalClass::effective;
    std::vector<double> partials;  // per-tower logit shares; empty when unsupported
};

// Confidence-curve data: the first sample_count eval samples, grouped by
// label (negatives first) and sorted by probability within each group.
struct ActivationDump {
    std::vector<TowerKind> towers;  // empty when decomposition is unsupported (public bn)
    double bias = 0.0;
    std::vector<ActivationRow> rows;
    double weak_fraction = 0.0;
    double weak_fraction_label0 = 0.0;
    double weak_fraction_label1 = 0.0;
};

ActivationDump activation_dump(PhnModel& model, const EncodedBatch& eval_batch,
                               std::size_t sample_count, const GradientIntervalSpec& spec);

struct WeakGradientRow {
    std::string config;
    double weak_fraction = 0.0;
    double mean_sigma_prime = 0.0;
    double mean_pos_confidence = 0.0;
    double mean_neg_confidence = 0.0;
};

// Per-config aggregates over dumps that must cover the same (sample, label)
// set; mismatched sample sets throw ContractError.
std::vector<WeakGradientRow> weak_gradient_summary(
    const std::vector<std::pair<std::string, const ActivationDump*>>& reports);

// Per-tower SSG amplification: |enhanced| / (|raw embedding| + delta) per
// field, averaged over the batch. Row order fixed to ffn, cross, field.
struct ScalingRatioReport {
    std::vector<TowerKind> towers;
    std::vector<Tensor> ratios;  // per tower, shape (F)
};

ScalingRatioReport ssg_scaling_report(PhnModel& model, const EncodedBatch& batch);

// Common header block written before every report body:
//   # config=<name>
//   # epsilon=<value>
//   # seed=<value>
//   # checkpoint=<16 hex digits>
struct ReportHeader {
    std::string config_name;
    double epsilon = 0.05;
    std::uint64_t seed = 0;
    std::uint64_t checkpoint_hash = 0;
};

std::string hex_u64(std::uint64_t v);

void write_activation_csv(const ActivationDump& dump, const ReportHeader& header,
                          const std::string& path);
void write_weak_summary_csv(const std::vector<WeakGradientRow>& rows, const ReportHeader& header,
                            const std::string& path);
void write_scaling_csv(const ScalingRatioReport& report, const ReportHeader& header,
                       const std::string& path);

}  // namespace phn
