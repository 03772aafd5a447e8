#include "phn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "phn/errors.hpp"
#include "phn/rng.hpp"

namespace phn {
namespace {

std::vector<std::string> split_keep_empty(const std::string& line, char delim) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(delim, start);
        if (pos == std::string::npos) {
            parts.push_back(line.substr(start));
            break;
        }
        parts.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return parts;
}

std::string join(const std::vector<std::string>& parts, char delim) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i > 0) out.push_back(delim);
        out += parts[i];
    }
    return out;
}

std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

}  // namespace

Schema Schema::criteo() {
    Schema s;
    s.name = "criteo";
    s.field_count = 39;
    s.integer_field_count = 13;
    s.categorical_field_count = 26;
    s.delimiter = '\t';
    s.has_header = false;
    s.label_column = 0;
    return s;
}

Schema Schema::avazu() {
    Schema s;
    s.name = "avazu";
    s.field_count = 23;
    s.integer_field_count = 0;
    s.categorical_field_count = 23;
    s.delimiter = ',';
    s.has_header = true;
    s.label_column = 0;  // resolved against the header by parse_file
    return s;
}

Schema Schema::synthetic(std::size_t field_count) {
    Schema s;
    s.name = "synthetic";
    s.field_count = field_count;
    s.integer_field_count = 0;
    s.categorical_field_count = field_count;
    s.delimiter = '\t';
    s.has_header = false;
    s.label_column = 0;
    return s;
}

bool Schema::field_is_integer(std::size_t field) const {
    return field < integer_field_count;
}

void Schema::validate() const {
    if (field_count == 0) throw ConfigError("schema '" + name + "': field_count must be positive");
    if (integer_field_count + categorical_field_count != field_count) {
        throw ConfigError("schema '" + name + "': integer + categorical field counts must equal field_count");
    }
    if (label_column > field_count) {
        throw ConfigError("schema '" + name + "': label_column out of range");
    }
}

RawRecord parse_line(const std::string& line, const Schema& schema, std::size_t line_no) {
    auto parts = split_keep_empty(line, schema.delimiter);
    const std::size_t want = schema.field_count + 1;
    if (parts.size() != want) {
        throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(want) +
                        " columns, got " + std::to_string(parts.size()));
    }
    const std::string& label_tok = parts[schema.label_column];
    RawRecord rec;
    if (label_tok == "0") {
        rec.label = 0;
    } else if (label_tok == "1") {
        rec.label = 1;
    } else {
        throw DataError("line " + std::to_string(line_no) + ": label must be 0 or 1, got '" + label_tok + "'");
    }
    rec.tokens.reserve(schema.field_count);
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i == schema.label_column) continue;
        rec.tokens.push_back(std::move(parts[i]));
    }
    return rec;
}

std::string serialize_record(const RawRecord& record, const Schema& schema) {
    if (record.tokens.size() != schema.field_count) {
        throw DataError("record has " + std::to_string(record.tokens.size()) + " tokens, schema '" +
                        schema.name + "' expects " + std::to_string(schema.field_count));
    }
    std::vector<std::string> parts;
    parts.reserve(schema.field_count + 1);
    std::size_t next = 0;
    for (std::size_t col = 0; col < schema.field_count + 1; ++col) {
        if (col == schema.label_column) {
            parts.push_back(record.label ? "1" : "0");
        } else {
            parts.push_back(record.tokens[next++]);
        }
    }
    return join(parts, schema.delimiter);
}

ParsedFile parse_file(const std::string& path, const Schema& schema) {
    schema.validate();
    std::ifstream in(path);
    if (!in) throw DataError("cannot open data file: " + path);

    ParsedFile out;
    out.schema = schema;
    std::string line;
    std::size_t line_no = 0;

    if (schema.has_header) {
        if (!std::getline(in, line)) throw DataError(path + ": empty file, expected header");
        ++line_no;
        line = strip_cr(line);
        auto cols = split_keep_empty(line, schema.delimiter);
        if (cols.size() != schema.field_count + 1) {
            throw DataError(path + ": header has " + std::to_string(cols.size()) + " columns, expected " +
                            std::to_string(schema.field_count + 1));
        }
        auto it = std::find(cols.begin(), cols.end(), "click");
        if (it == cols.end()) throw DataError(path + ": header has no 'click' column");
        out.schema.label_column = static_cast<std::size_t>(it - cols.begin());
        out.header = line;
    }

    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (line.empty()) continue;
        try {
            out.records.push_back(parse_line(line, out.schema, line_no));
        } catch (const DataError& e) {
            throw DataError(path + ": " + e.what());
        }
    }
    if (out.records.empty()) throw DataError(path + ": no data rows");
    return out;
}

std::string bucketize_integer_token(const std::string& token) {
    if (token.empty()) return token;
    long long v = 0;
    try {
        std::size_t used = 0;
        v = std::stoll(token, &used);
        if (used != token.size()) throw std::invalid_argument(token);
    } catch (const std::exception&) {
        throw DataError("integer field token is not an integer: '" + token + "'");
    }
    if (v <= 2) return std::to_string(v);
    double l = std::log(static_cast<double>(v));
    long long bucket = static_cast<long long>(std::floor(l * l));
    return std::to_string(bucket);
}

FeatureVocab::FeatureVocab(std::size_t field_count, std::size_t min_frequency)
    : maps_(field_count), sizes_(field_count, 1), min_frequency_(min_frequency) {}

FeatureVocab FeatureVocab::build(const std::vector<RawRecord>& records, const Schema& schema,
                                 std::size_t min_frequency) {
    if (min_frequency == 0) throw ConfigError("min_frequency must be at least 1");
    if (records.empty()) throw ContractError("build_vocab: no records");
    FeatureVocab vocab(schema.field_count, min_frequency);

    // Two passes: count per-field token frequencies, then assign indices in
    // first-appearance order so rebuilding from the same data is stable.
    std::vector<std::unordered_map<std::string, std::size_t>> counts(schema.field_count);
    std::vector<std::vector<std::string>> order(schema.field_count);
    for (const auto& rec : records) {
        if (rec.tokens.size() != schema.field_count) {
            throw DataError("record token count does not match schema '" + schema.name + "'");
        }
        for (std::size_t f = 0; f < schema.field_count; ++f) {
            std::string tok = rec.tokens[f];
            if (tok.empty()) continue;  // missing maps to index 0, never enters the vocab
            if (schema.field_is_integer(f)) tok = bucketize_integer_token(tok);
            auto [it, inserted] = counts[f].try_emplace(std::move(tok), 0);
            ++it->second;
            if (inserted) order[f].push_back(it->first);
        }
    }
    for (std::size_t f = 0; f < schema.field_count; ++f) {
        std::uint32_t next = 1;
        for (const auto& tok : order[f]) {
            if (counts[f][tok] >= min_frequency) {
                vocab.maps_[f].emplace(tok, next++);
            }
        }
        vocab.sizes_[f] = static_cast<std::size_t>(next);
    }
    return vocab;
}

std::uint32_t FeatureVocab::lookup(std::size_t field, const std::string& token) const {
    if (field >= maps_.size()) throw ContractError("vocab lookup: field index out of range");
    if (token.empty()) return 0;
    auto it = maps_[field].find(token);
    return it == maps_[field].end() ? 0u : it->second;
}

EncodedBatch EncodedBatch::take(const std::vector<std::size_t>& rows) const {
    EncodedBatch out;
    out.field_count = field_count;
    out.indices.reserve(rows.size() * field_count);
    out.labels.reserve(rows.size());
    for (std::size_t r : rows) {
        if (r >= size()) throw ContractError("batch take: row index out of range");
        out.labels.push_back(labels[r]);
        const auto* begin = indices.data() + r * field_count;
        out.indices.insert(out.indices.end(), begin, begin + field_count);
    }
    return out;
}

std::vector<double> EncodedBatch::labels_as_double() const {
    std::vector<double> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = static_cast<double>(labels[i]);
    return out;
}

EncodedBatch encode_batch(const std::vector<RawRecord>& records, const Schema& schema,
                          const FeatureVocab& vocab) {
    if (vocab.field_count() != schema.field_count) {
        throw ContractError("vocab field count does not match schema '" + schema.name + "'");
    }
    if (records.empty()) throw ContractError("encode_batch: empty batch");
    EncodedBatch batch;
    batch.field_count = schema.field_count;
    batch.indices.reserve(records.size() * schema.field_count);
    batch.labels.reserve(records.size());
    for (const auto& rec : records) {
        if (rec.tokens.size() != schema.field_count) {
            throw DataError("record token count does not match schema '" + schema.name + "'");
        }
        batch.labels.push_back(rec.label);
        for (std::size_t f = 0; f < schema.field_count; ++f) {
            std::string tok = rec.tokens[f];
            if (!tok.empty() && schema.field_is_integer(f)) tok = bucketize_integer_token(tok);
            batch.indices.push_back(vocab.lookup(f, tok));
        }
    }
    return batch;
}

void SyntheticSpec::validate() const {
    if (field_count < 2) throw ConfigError("synthetic: field_count must be at least 2");
    if (vocab_size_per_field == 0) throw ConfigError("synthetic: vocab_size_per_field must be positive");
    if (sample_count == 0) throw ConfigError("synthetic: sample_count must be positive");
    if (pairwise_weight_scale < 0.0 || bias_scale < 0.0) {
        throw ConfigError("synthetic: weight scales must be non-negative");
    }
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    const std::size_t F = spec.field_count;
    const std::size_t V = spec.vocab_size_per_field;
    RngStream rng(spec.seed);

    // Per-token biases (index 0 unused: generated tokens are in [1, V]).
    std::vector<std::vector<double>> bias(F, std::vector<double>(V + 1, 0.0));
    for (std::size_t f = 0; f < F; ++f) {
        for (std::size_t t = 1; t <= V; ++t) bias[f][t] = spec.bias_scale * rng.normal();
    }

    // Planted pairwise interactions on disjoint field pairs (0,1), (2,3), ...
    // Each pair's V x V weight table is a rank-1 outer product of unit normals
    // scaled to unit variance, so a low-dimensional embedding model can both
    // represent and recover it from modest sample counts.
    constexpr std::size_t kRank = 1;
    const std::size_t pair_count = F / 2;
    const double latent_scale = spec.pairwise_weight_scale / std::sqrt(static_cast<double>(kRank));
    std::vector<std::vector<double>> left(pair_count), right(pair_count);
    for (std::size_t p = 0; p < pair_count; ++p) {
        left[p].resize((V + 1) * kRank);
        right[p].resize((V + 1) * kRank);
        for (std::size_t i = kRank; i < left[p].size(); ++i) left[p][i] = rng.normal();
        for (std::size_t i = kRank; i < right[p].size(); ++i) right[p][i] = rng.normal();
    }

    SyntheticData data;
    data.batch.field_count = F;
    data.batch.indices.resize(spec.sample_count * F);
    data.batch.labels.resize(spec.sample_count);
    data.true_probabilities.resize(spec.sample_count);
    data.vocab_sizes.assign(F, V + 1);

    for (std::size_t n = 0; n < spec.sample_count; ++n) {
        auto* row = data.batch.indices.data() + n * F;
        double score = 0.0;
        for (std::size_t f = 0; f < F; ++f) {
            std::uint32_t tok = 1u + static_cast<std::uint32_t>(rng.below(V));
            row[f] = tok;
            score += bias[f][tok];
        }
        for (std::size_t p = 0; p < pair_count; ++p) {
            const double* a = left[p].data() + row[2 * p] * kRank;
            const double* b = right[p].data() + row[2 * p + 1] * kRank;
            double dot = 0.0;
            for (std::size_t r = 0; r < kRank; ++r) dot += a[r] * b[r];
            score += latent_scale * dot;
        }
        double prob = 1.0 / (1.0 + std::exp(-score));
        data.true_probabilities[n] = prob;
        data.batch.labels[n] = rng.uniform01() < prob ? 1u : 0u;
    }
    return data;
}

std::vector<std::vector<std::size_t>> split_indices(std::size_t n, const std::vector<double>& fractions,
                                                    std::uint64_t seed) {
    if (fractions.empty()) throw ConfigError("split: need at least one fraction");
    double total = 0.0;
    for (double f : fractions) {
        if (f < 0.0) throw ConfigError("split: fractions must be non-negative");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");

    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    RngStream rng(seed);
    shuffle(perm, rng);

    std::vector<std::size_t> sizes(fractions.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        sizes[i] = static_cast<std::size_t>(std::floor(fractions[i] * static_cast<double>(n)));
        assigned += sizes[i];
    }
    sizes[0] += n - assigned;  // leftover rows go to the first part

    std::vector<std::vector<std::size_t>> parts(fractions.size());
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        parts[i].assign(perm.begin() + cursor, perm.begin() + cursor + sizes[i]);
        cursor += sizes[i];
    }
    return parts;
}

SplitBatches split(const EncodedBatch& batch, const std::vector<double>& fractions, std::uint64_t seed) {
    if (fractions.size() != 3) throw ConfigError("split: expected train/validation/test fractions");
    auto parts = split_indices(batch.size(), fractions, seed);
    SplitBatches out;
    out.train = batch.take(parts[0]);
    out.validation = batch.take(parts[1]);
    out.test = batch.take(parts[2]);
    return out;
}

void save_synthetic(const SyntheticData& data, const SyntheticSpec& spec, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    {
        std::ofstream out(fs::path(dir) / "data.tsv");
        if (!out) throw DataError("cannot write data file in " + dir);
        for (std::size_t n = 0; n < data.batch.size(); ++n) {
            out << int(data.batch.labels[n]);
            for (std::size_t f = 0; f < data.batch.field_count; ++f) {
                out << '\t' << data.batch.index(n, f);
            }
            out << '\n';
        }
    }
    {
        std::ofstream out(fs::path(dir) / "true_probs.txt");
        if (!out) throw DataError("cannot write probability file in " + dir);
        char buf[64];
        for (double p : data.true_probabilities) {
            std::snprintf(buf, sizeof(buf), "%.17g\n", p);
            out << buf;
        }
    }
    {
        nlohmann::json j;
        j["field_count"] = spec.field_count;
        j["vocab_size_per_field"] = spec.vocab_size_per_field;
        j["sample_count"] = spec.sample_count;
        j["pairwise_weight_scale"] = spec.pairwise_weight_scale;
        j["bias_scale"] = spec.bias_scale;
        j["seed"] = spec.seed;
        std::ofstream out(fs::path(dir) / "spec.json");
        if (!out) throw DataError("cannot write spec file in " + dir);
        out << j.dump(2) << '\n';
    }
}

SyntheticData load_synthetic(const std::string& dir) {
    namespace fs = std::filesystem;

    SyntheticSpec spec;
    {
        std::ifstream in(fs::path(dir) / "spec.json");
        if (!in) throw DataError("cannot open spec file in " + dir);
        nlohmann::json j;
        try {
            in >> j;
            spec.field_count = j.at("field_count").get<std::size_t>();
            spec.vocab_size_per_field = j.at("vocab_size_per_field").get<std::size_t>();
            spec.sample_count = j.at("sample_count").get<std::size_t>();
            spec.pairwise_weight_scale = j.at("pairwise_weight_scale").get<double>();
            spec.bias_scale = j.at("bias_scale").get<double>();
            spec.seed = j.at("seed").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed spec file in " + dir + ": " + e.what());
        }
    }
    spec.validate();

    SyntheticData data;
    data.batch.field_count = spec.field_count;
    data.vocab_sizes.assign(spec.field_count, spec.vocab_size_per_field + 1);

    auto file = parse_file((fs::path(dir) / "data.tsv").string(), Schema::synthetic(spec.field_count));
    data.batch.indices.reserve(file.records.size() * spec.field_count);
    data.batch.labels.reserve(file.records.size());
    for (std::size_t n = 0; n < file.records.size(); ++n) {
        const auto& rec = file.records[n];
        data.batch.labels.push_back(rec.label);
        for (const auto& tok : rec.tokens) {
            unsigned long v = 0;
            try {
                std::size_t used = 0;
                v = std::stoul(tok, &used);
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw DataError(dir + ": line " + std::to_string(n + 1) + ": bad token '" + tok + "'");
            }
            if (v >= spec.vocab_size_per_field + 1) {
                throw DataError(dir + ": line " + std::to_string(n + 1) + ": token index " +
                                std::to_string(v) + " out of range");
            }
            data.batch.indices.push_back(static_cast<std::uint32_t>(v));
        }
    }

    {
        std::ifstream in(fs::path(dir) / "true_probs.txt");
        if (!in) throw DataError("cannot open probability file in " + dir);
        double p = 0.0;
        while (in >> p) {
            if (p < 0.0 || p > 1.0) throw DataError(dir + ": probability out of [0, 1]");
            data.true_probabilities.push_back(p);
        }
    }
    if (data.true_probabilities.size() != data.batch.size()) {
        throw DataError(dir + ": probability count does not match data rows");
    }
    return data;
}

}  // namespace phn
