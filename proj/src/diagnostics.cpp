#include "phn/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "phn/errors.hpp"
#include "phn/ssg.hpp"

namespace phn {

void GradientIntervalSpec::validate() const {
    if (!(epsilon > 0.0) || !(epsilon < 0.25)) {
        throw ConfigError("gradient interval: epsilon must lie in (0, 0.25), got " +
                          std::to_string(epsilon));
    }
}

double GradientIntervalSpec::boundary() const {
    validate();
    // sigma*(1 - sigma*) = eps has roots (1 +- sqrt(1 - 4 eps)) / 2; the
    // upper root gives the positive boundary logit.
    const double sigma_star = 0.5 * (1.0 + std::sqrt(1.0 - 4.0 * epsilon));
    return std::log(sigma_star / (1.0 - sigma_star));
}

std::string to_string(IntervalClass c) {
    return c == IntervalClass::effective ? "effective" : "weak";
}

IntervalClass classify_interval(double z, const GradientIntervalSpec& spec) {
    spec.validate();
    return std::abs(z) > spec.boundary() ? IntervalClass::weak : IntervalClass::effective;
}

ActivationDump activation_dump(PhnModel& model, const EncodedBatch& eval_batch,
                               std::size_t sample_count, const GradientIntervalSpec& spec) {
    spec.validate();
    if (sample_count == 0) throw ContractError("activation_dump: sample_count must be positive");
    if (eval_batch.size() < sample_count) {
        throw ContractError("activation_dump: need " + std::to_string(sample_count) +
                            " samples, eval batch has " + std::to_string(eval_batch.size()));
    }
    std::vector<std::size_t> head(sample_count);
    std::iota(head.begin(), head.end(), std::size_t{0});
    EncodedBatch batch = eval_batch.take(head);

    Graph g;
    ForwardNodes nodes = model.wire_forward(g, batch, /*train=*/false);
    const Tensor& logits = g.value(nodes.logit);
    const Tensor& probs = g.value(nodes.prob);

    ActivationDump dump;
    const bool decomposable = model.config().bn != BnMode::public_bn;
    LogitDecomposition decomp;
    if (decomposable) {
        decomp = tower_logit_decomposition(model, batch);
        dump.towers = decomp.towers;
        dump.bias = decomp.bias;
    }

    dump.rows.reserve(sample_count);
    for (std::size_t i = 0; i < sample_count; ++i) {
        ActivationRow row;
        row.sample = i;
        row.label = batch.labels[i];
        row.logit = logits[i];
        row.prob = probs[i];
        row.sigma_prime = probs[i] * (1.0 - probs[i]);
        row.interval = classify_interval(row.logit, spec);
        if (decomposable) {
            for (const auto& tower : decomp.partial) row.partials.push_back(tower[i]);
        }
        dump.rows.push_back(std::move(row));
    }

    // negatives first, then positives; ascending confidence within a group,
    // ties kept in sample order so the dump is deterministic
    std::stable_sort(dump.rows.begin(), dump.rows.end(),
                     [](const ActivationRow& a, const ActivationRow& b) {
                         if (a.label != b.label) return a.label < b.label;
                         return a.prob < b.prob;
                     });

    std::size_t weak = 0, weak0 = 0, weak1 = 0, n0 = 0, n1 = 0;
    for (const ActivationRow& row : dump.rows) {
        const bool is_weak = row.interval == IntervalClass::weak;
        weak += is_weak;
        if (row.label) {
            ++n1;
            weak1 += is_weak;
        } else {
            ++n0;
            weak0 += is_weak;
        }
    }
    dump.weak_fraction = static_cast<double>(weak) / static_cast<double>(dump.rows.size());
    dump.weak_fraction_label0 = n0 ? static_cast<double>(weak0) / static_cast<double>(n0) : 0.0;
    dump.weak_fraction_label1 = n1 ? static_cast<double>(weak1) / static_cast<double>(n1) : 0.0;
    return dump;
}

std::vector<WeakGradientRow> weak_gradient_summary(
    const std::vector<std::pair<std::string, const ActivationDump*>>& reports) {
    if (reports.empty()) throw ContractError("weak_gradient_summary: no reports");

    auto sample_set = [](const ActivationDump& d) {
        std::set<std::pair<std::size_t, std::uint8_t>> s;
        for (const ActivationRow& r : d.rows) s.emplace(r.sample, r.label);
        return s;
    };
    const auto reference = sample_set(*reports.front().second);

    std::vector<WeakGradientRow> out;
    for (const auto& [name, dump] : reports) {
        if (dump->rows.empty()) throw ContractError("weak_gradient_summary: empty dump '" + name + "'");
        if (sample_set(*dump) != reference) {
            throw ContractError("weak_gradient_summary: report '" + name +
                                "' covers different samples than '" + reports.front().first + "'");
        }
        WeakGradientRow row;
        row.config = name;
        double sp = 0.0, pos = 0.0, neg = 0.0;
        std::size_t weak = 0, n_pos = 0, n_neg = 0;
        for (const ActivationRow& r : dump->rows) {
            sp += r.sigma_prime;
            weak += r.interval == IntervalClass::weak;
            if (r.label) {
                pos += r.prob;
                ++n_pos;
            } else {
                neg += r.prob;
                ++n_neg;
            }
        }
        const double n = static_cast<double>(dump->rows.size());
        row.weak_fraction = static_cast<double>(weak) / n;
        row.mean_sigma_prime = sp / n;
        row.mean_pos_confidence = n_pos ? pos / static_cast<double>(n_pos) : 0.0;
        row.mean_neg_confidence = n_neg ? neg / static_cast<double>(n_neg) : 0.0;
        out.push_back(std::move(row));
    }
    return out;
}

ScalingRatioReport ssg_scaling_report(PhnModel& model, const EncodedBatch& batch) {
    Graph g;
    ForwardNodes nodes = model.wire_forward(g, batch, /*train=*/false);
    const Tensor& base = g.value(nodes.e_se);

    ScalingRatioReport report;
    // export row order: ffn, cross, field
    for (TowerKind want : {TowerKind::ffn, TowerKind::cross, TowerKind::field}) {
        const auto& towers = model.towers();
        for (std::size_t slot = 0; slot < towers.size(); ++slot) {
            if (towers[slot] != want) continue;
            report.towers.push_back(want);
            report.ratios.push_back(scaling_ratio(g.value(nodes.e_enhanced[slot]), base));
        }
    }
    return report;
}

std::string hex_u64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

namespace {

std::ofstream open_report(const std::string& path, const ReportHeader& header) {
    std::ofstream out(path);
    if (!out) throw DataError("report '" + path + "': cannot open for writing");
    char buf[160];
    out << "# config=" << header.config_name << "\n";
    std::snprintf(buf, sizeof(buf), "# epsilon=%.9g\n", header.epsilon);
    out << buf;
    out << "# seed=" << header.seed << "\n";
    out << "# checkpoint=" << hex_u64(header.checkpoint_hash) << "\n";
    return out;
}

void finish_report(std::ofstream& out, const std::string& path) {
    if (!out) throw DataError("report '" + path + "': write failed");
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return std::string(buf);
}

}  // namespace

void write_activation_csv(const ActivationDump& dump, const ReportHeader& header,
                          const std::string& path) {
    std::ofstream out = open_report(path, header);
    char buf[120];
    std::snprintf(buf, sizeof(buf), "# weak_fraction=%.12g label0=%.12g label1=%.12g\n",
                  dump.weak_fraction, dump.weak_fraction_label0, dump.weak_fraction_label1);
    out << buf;
    out << "sample,label,logit,prob,sigma_prime,interval";
    for (TowerKind t : dump.towers) out << ",partial_" << to_string(t);
    if (!dump.towers.empty()) out << ",bias";
    out << "\n";
    for (const ActivationRow& row : dump.rows) {
        out << row.sample << ',' << static_cast<int>(row.label) << ',' << fmt(row.logit) << ','
            << fmt(row.prob) << ',' << fmt(row.sigma_prime) << ',' << to_string(row.interval);
        for (double p : row.partials) out << ',' << fmt(p);
        if (!dump.towers.empty()) out << ',' << fmt(dump.bias);
        out << "\n";
    }
    finish_report(out, path);
}

void write_weak_summary_csv(const std::vector<WeakGradientRow>& rows, const ReportHeader& header,
                            const std::string& path) {
    std::ofstream out = open_report(path, header);
    out << "config,weak_fraction,mean_sigma_prime,mean_pos_confidence,mean_neg_confidence\n";
    for (const WeakGradientRow& r : rows) {
        out << r.config << ',' << fmt(r.weak_fraction) << ',' << fmt(r.mean_sigma_prime) << ','
            << fmt(r.mean_pos_confidence) << ',' << fmt(r.mean_neg_confidence) << "\n";
    }
    finish_report(out, path);
}

void write_scaling_csv(const ScalingRatioReport& report, const ReportHeader& header,
                       const std::string& path) {
    std::ofstream out = open_report(path, header);
    if (report.towers.empty()) throw ContractError("write_scaling_csv: empty report");
    const std::size_t fields = report.ratios.front().size();
    out << "tower";
    for (std::size_t f = 0; f < fields; ++f) out << ",field" << f;
    out << "\n";
    for (std::size_t t = 0; t < report.towers.size(); ++t) {
        out << to_string(report.towers[t]);
        for (std::size_t f = 0; f < fields; ++f) out << ',' << fmt(report.ratios[t][f]);
        out << "\n";
    }
    finish_report(out, path);
}

}  // namespace phn
