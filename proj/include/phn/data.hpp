#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "phn/tensor.hpp"

namespace phn {

// Column layout of a delimited CTR file. Criteo: 39 tab-separated fields
// (13 integer + 26 categorical), label first, no header. Avazu: 23
// categorical fields, comma-delimited, header row with a 'click' label
// column.
struct Schema {
    std::string name;
    std::size_t field_count = 0;
    std::size_t integer_field_count = 0;
    std::size_t categorical_field_count = 0;
    char delimiter = '\t';
    bool has_header = false;
    std::size_t label_column = 0;  // for Avazu, resolved from the header

    static Schema criteo();
    static Schema avazu();
    // Internal layout for generated datasets: tab-delimited, label first,
    // all fields categorical.
    static Schema synthetic(std::size_t field_count);

    bool field_is_integer(std::size_t field) const;
    void validate() const;
};

// One parsed line: binary label plus the raw field tokens in file order
// (empty string = missing).
struct RawRecord {
    std::uint8_t label = 0;
    std::vector<std::string> tokens;
};

struct ParsedFile {
    Schema schema;  // label_column resolved when the file had a header
    std::optional<std::string> header;
    std::vector<RawRecord> records;
};

// Splits one data line. line_no is 1-based and appears in error messages.
RawRecord parse_line(const std::string& line, const Schema& schema, std::size_t line_no);

// Inverse of parse_line; parse -> serialize round-trips the original line.
std::string serialize_record(const RawRecord& record, const Schema& schema);

ParsedFile parse_file(const std::string& path, const Schema& schema);

// Criteo integer-field discretization: identity for v <= 2, floor(ln(v)^2)
// above. Missing stays missing.
std::string bucketize_integer_token(const std::string& token);

// Per-field token -> index maps. Index 0 is reserved for
// out-of-vocabulary / missing and is never assigned to a real token.
class FeatureVocab {
public:
    FeatureVocab() = default;
    FeatureVocab(std::size_t field_count, std::size_t min_frequency);

    static FeatureVocab build(const std::vector<RawRecord>& records, const Schema& schema,
                              std::size_t min_frequency);

    std::size_t field_count() const { return maps_.size(); }
    std::size_t min_frequency() const { return min_frequency_; }
    // including the reserved index 0
    std::size_t vocab_size(std::size_t field) const { return sizes_[field]; }
    std::vector<std::size_t> vocab_sizes() const { return sizes_; }
    std::uint32_t lookup(std::size_t field, const std::string& token) const;

private:
    std::vector<std::unordered_map<std::string, std::uint32_t>> maps_;
    std::vector<std::size_t> sizes_;
    std::size_t min_frequency_ = 2;
};

// Integer feature indices plus binary labels, ready for embedding lookup.
struct EncodedBatch {
    std::size_t field_count = 0;
    std::vector<std::uint32_t> indices;  // row-major, size() x field_count
    std::vector<std::uint8_t> labels;

    std::size_t size() const { return labels.size(); }
    std::uint32_t index(std::size_t row, std::size_t field) const {
        return indices[row * field_count + field];
    }
    // Gathers the given rows into a new batch.
    EncodedBatch take(const std::vector<std::size_t>& rows) const;
    std::vector<double> labels_as_double() const;
};

EncodedBatch encode_batch(const std::vector<RawRecord>& records, const Schema& schema,
                          const FeatureVocab& vocab);

// Generator spec for the planted-interaction benchmark. Generation is a pure
// function of this struct.
struct SyntheticSpec {
    std::size_t field_count = 10;
    std::size_t vocab_size_per_field = 100;
    std::size_t sample_count = 50000;
    double pairwise_weight_scale = 0.9;
    double bias_scale = 0.3;
    std::uint64_t seed = 1;

    void validate() const;
};

struct SyntheticData {
    EncodedBatch batch;
    std::vector<double> true_probabilities;  // sigma(score) per sample
    std::vector<std::size_t> vocab_sizes;    // vocab_size_per_field + 1 per field
};

// Tokens are drawn uniformly; the score is a sum of per-token biases plus
// planted pairwise weights on a subset of field pairs (low-rank tables, so
// an embedding model can recover them); labels ~ Bernoulli(sigma(score)).
SyntheticData generate_synthetic(const SyntheticSpec& spec);

struct SplitBatches {
    EncodedBatch train;
    EncodedBatch validation;
    EncodedBatch test;
};

// Seeded shuffle, then disjoint exhaustive assignment. Fractions must be
// non-negative and sum to 1 within 1e-9.
std::vector<std::vector<std::size_t>> split_indices(std::size_t n, const std::vector<double>& fractions,
                                                    std::uint64_t seed);
SplitBatches split(const EncodedBatch& batch, const std::vector<double>& fractions, std::uint64_t seed);

// Synthetic dataset file I/O: data file (label + token columns), side file
// of true probabilities, and a JSON spec echo.
void save_synthetic(const SyntheticData& data, const SyntheticSpec& spec, const std::string& dir);
SyntheticData load_synthetic(const std::string& dir);

}  // namespace phn
