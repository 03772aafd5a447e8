#include "phn/experiments.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <utility>

#include <json.hpp>

#include "phn/diagnostics.hpp"
#include "phn/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace phn {

namespace {

json parse_json(const std::string& text, const char* what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string(what) + ": bad JSON: " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError(path.string() + ": cannot open for writing");
    out << text;
    if (!out) throw DataError(path.string() + ": write failed");
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path.string() + ": cannot open");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return text;
}

void write_manifest(const fs::path& dir, const std::string& command,
                    const std::vector<std::string>& files) {
    json j;
    j["command"] = command;
    j["files"] = files;
    write_text(dir / "manifest.json", j.dump(2) + "\n");
}

std::string sanitize_name(const std::string& name) {
    std::string out = name;
    for (char& c : out) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
    }
    return out;
}

}  // namespace

void DataConfig::validate() const {
    if (format != "synthetic" && format != "criteo" && format != "avazu") {
        throw ConfigError("data config: format must be synthetic|criteo|avazu, got '" + format + "'");
    }
    if (path.empty()) throw ConfigError("data config: path is empty");
    if (min_frequency == 0) throw ConfigError("data config: min_frequency must be >= 1");
    if (split_fractions.size() != 3) {
        throw ConfigError("data config: split_fractions needs exactly train/val/test entries");
    }
    double sum = 0.0;
    for (double f : split_fractions) {
        if (!(f > 0.0)) throw ConfigError("data config: split fractions must be positive");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw ConfigError("data config: split fractions must sum to 1");
    }
}

void RunConfig::validate() const {
    train.validate();
    data.validate();
    if (output_dir.empty()) throw ConfigError("run config: output_dir is empty");
    ModelConfig m = model;
    if (m.vocab_sizes.empty()) m.vocab_sizes = {2};  // resolved from data later
    m.validate();
}

std::string RunConfig::to_json() const {
    json j;
    j["model"] = json::parse(model.to_json());
    j["train"]["epochs"] = train.epochs;
    j["train"]["batch_size"] = train.batch_size;
    j["train"]["patience"] = train.patience;
    j["train"]["eval_every"] = train.eval_every;
    j["train"]["seed"] = train.seed;
    j["train"]["optimizer"]["kind"] = phn::to_string(train.optimizer.kind);
    j["train"]["optimizer"]["learning_rate"] = train.optimizer.learning_rate;
    j["train"]["optimizer"]["beta1"] = train.optimizer.beta1;
    j["train"]["optimizer"]["beta2"] = train.optimizer.beta2;
    j["train"]["optimizer"]["epsilon"] = train.optimizer.epsilon;
    j["train"]["optimizer"]["weight_decay"] = train.optimizer.weight_decay;
    j["data"]["format"] = data.format;
    j["data"]["path"] = data.path;
    j["data"]["min_frequency"] = data.min_frequency;
    j["data"]["split_fractions"] = data.split_fractions;
    j["data"]["split_seed"] = data.split_seed;
    j["output_dir"] = output_dir;
    j["deterministic"] = deterministic;
    return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j = parse_json(text, "run config");
    RunConfig c;
    try {
        if (j.contains("model")) {
            json m = j["model"];
            // vocab sizes may stay unset until the dataset is loaded; park a
            // placeholder so the model-config parser's validation passes
            const bool vocab_unset = !m.contains("vocab_sizes") || m["vocab_sizes"].empty();
            if (vocab_unset) m["vocab_sizes"] = json::array({2});
            c.model = ModelConfig::from_json(m.dump());
            if (vocab_unset) c.model.vocab_sizes.clear();
        }
        if (j.contains("train")) {
            const json& t = j["train"];
            c.train.epochs = t.value("epochs", c.train.epochs);
            c.train.batch_size = t.value("batch_size", c.train.batch_size);
            c.train.patience = t.value("patience", c.train.patience);
            c.train.eval_every = t.value("eval_every", c.train.eval_every);
            c.train.seed = t.value("seed", c.train.seed);
            if (t.contains("optimizer")) {
                const json& o = t["optimizer"];
                if (o.contains("kind")) {
                    c.train.optimizer.kind = optimizer_kind_from_string(o["kind"].get<std::string>());
                }
                c.train.optimizer.learning_rate =
                    o.value("learning_rate", c.train.optimizer.learning_rate);
                c.train.optimizer.beta1 = o.value("beta1", c.train.optimizer.beta1);
                c.train.optimizer.beta2 = o.value("beta2", c.train.optimizer.beta2);
                c.train.optimizer.epsilon = o.value("epsilon", c.train.optimizer.epsilon);
                c.train.optimizer.weight_decay =
                    o.value("weight_decay", c.train.optimizer.weight_decay);
            }
        }
        if (j.contains("data")) {
            const json& d = j["data"];
            c.data.format = d.value("format", c.data.format);
            c.data.path = d.value("path", c.data.path);
            c.data.min_frequency = d.value("min_frequency", c.data.min_frequency);
            if (d.contains("split_fractions")) {
                c.data.split_fractions = d["split_fractions"].get<std::vector<double>>();
            }
            c.data.split_seed = d.value("split_seed", c.data.split_seed);
        }
        c.output_dir = j.value("output_dir", c.output_dir);
        c.deterministic = j.value("deterministic", c.deterministic);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("run config '" + path + "': cannot open");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json(text);
}

std::string apply_override(const std::string& json_text, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "': expected key.path=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);

    json doc = parse_json(json_text, "run config");
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
        if (!node->is_object() || !node->contains(part)) {
            throw ConfigError("override '" + assignment + "': no such config field '" + key + "'");
        }
        node = &(*node)[part];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
    *node = parsed.is_discarded() ? json(value) : parsed;
    return doc.dump(2) + "\n";
}

LoadedData load_dataset(const DataConfig& config) {
    config.validate();
    LoadedData out;
    if (config.format == "synthetic") {
        SyntheticData data = load_synthetic(config.path);
        out.vocab_sizes = data.vocab_sizes;
        out.splits = split(data.batch, config.split_fractions, config.split_seed);
        return out;
    }
    const Schema schema = config.format == "criteo" ? Schema::criteo() : Schema::avazu();
    ParsedFile file = parse_file(config.path, schema);
    FeatureVocab vocab = FeatureVocab::build(file.records, file.schema, config.min_frequency);
    EncodedBatch batch = encode_batch(file.records, file.schema, vocab);
    out.vocab_sizes = vocab.vocab_sizes();
    out.splits = split(batch, config.split_fractions, config.split_seed);
    return out;
}

ModelConfig resolve_model_config(ModelConfig model, const std::vector<std::size_t>& vocab_sizes) {
    if (model.vocab_sizes.empty()) {
        model.vocab_sizes = vocab_sizes;
    } else if (model.vocab_sizes != vocab_sizes) {
        throw ConfigError("model config: vocab_sizes disagree with the dataset (" +
                          std::to_string(model.vocab_sizes.size()) + " fields configured, " +
                          std::to_string(vocab_sizes.size()) + " in data)");
    }
    model.validate();
    return model;
}

namespace {

struct EvalMetrics {
    double logloss = 0.0;
    double auc = 0.0;
};

EvalMetrics test_metrics(Model& model, const EncodedBatch& test) {
    std::vector<double> probs = predict(model, test);
    EvalMetrics m;
    m.logloss = mean_logloss(probs, test.labels);
    m.auc = auc(probs, test.labels);
    return m;
}

json summary_json(const TrainOutcome& outcome) {
    json s;
    s["best_epoch"] = outcome.result.best_epoch;
    s["best_val_logloss"] = outcome.result.best_val_logloss;
    s["test_logloss"] = outcome.test_logloss;
    s["test_auc"] = outcome.test_auc;
    s["checkpoint"] = "checkpoint.bin";
    s["checkpoint_hash"] = hex_u64(outcome.checkpoint_hash);
    return s;
}

}  // namespace

TrainOutcome run_train(const RunConfig& config) {
    config.validate();
    const fs::path dir(config.output_dir);
    fs::create_directories(dir);
    write_text(dir / "config.json", config.to_json());  // echo before any work

    LoadedData data = load_dataset(config.data);
    RunConfig resolved = config;
    resolved.model = resolve_model_config(config.model, data.vocab_sizes);
    write_text(dir / "config.json", resolved.to_json());  // re-echo with vocab filled in

    PhnModel model(resolved.model);
    TrainOutcome outcome;
    outcome.result = train(model, data.splits.train, data.splits.validation, resolved.train,
                           resolved.deterministic);
    write_metrics_csv(outcome.result.records, (dir / "metrics.csv").string());

    const EvalMetrics m = test_metrics(model, data.splits.test);
    outcome.test_logloss = m.logloss;
    outcome.test_auc = m.auc;

    outcome.checkpoint_path = (dir / "checkpoint.bin").string();
    save_checkpoint(model, outcome.checkpoint_path);
    outcome.checkpoint_hash = fnv1a_file(outcome.checkpoint_path);

    write_text(dir / "summary.json", summary_json(outcome).dump(2) + "\n");
    write_manifest(dir, "train",
                   {"config.json", "metrics.csv", "checkpoint.bin", "summary.json"});
    return outcome;
}

EvalOutcome run_eval(const std::string& run_dir) {
    const fs::path dir(run_dir);
    RunConfig config = RunConfig::from_json(read_text(dir / "config.json"));
    std::unique_ptr<Model> model = load_checkpoint((dir / "checkpoint.bin").string());

    LoadedData data = load_dataset(config.data);
    // the checkpoint's own config already fixes the architecture; just insist
    // the data still matches it
    json ckpt = parse_json(model->config_json(), "checkpoint config");
    if (ckpt.contains("vocab_sizes") &&
        ckpt["vocab_sizes"].get<std::vector<std::size_t>>() != data.vocab_sizes) {
        throw ConfigError("eval: checkpoint vocab_sizes disagree with the dataset");
    }

    const EvalMetrics m = test_metrics(*model, data.splits.test);
    EvalOutcome out;
    out.logloss = m.logloss;
    out.auc = m.auc;
    out.sample_count = data.splits.test.size();
    return out;
}

std::vector<GridRow> run_grid(const RunConfig& config, const std::vector<std::size_t>& depths) {
    config.validate();
    const fs::path dir(config.output_dir);
    fs::create_directories(dir);
    write_text(dir / "config.json", config.to_json());

    LoadedData data = load_dataset(config.data);
    ModelConfig base = resolve_model_config(config.model, data.vocab_sizes);
    std::vector<GridRow> rows =
        grid_search(base, depths, data.splits.train, data.splits.validation, config.train);
    write_grid_csv(rows, (dir / "grid.csv").string());
    write_manifest(dir, "grid", {"config.json", "grid.csv"});
    return rows;
}

void write_grid_csv(const std::vector<GridRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError(path + ": cannot open for writing");
    out << "depth,val_logloss,val_auc,best_epoch\n";
    char buf[96];
    for (const GridRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%zu\n", r.depth, r.val_logloss, r.val_auc,
                      r.best_epoch);
        out << buf;
    }
    if (!out) throw DataError(path + ": write failed");
}

std::vector<MatrixEntry> residual_bn_matrix(const ModelConfig& base) {
    std::vector<MatrixEntry> out;
    for (ResidualMode r : {ResidualMode::base, ResidualMode::rl, ResidualMode::prl}) {
        for (BnMode b : {BnMode::none, BnMode::public_bn, BnMode::private_bn}) {
            MatrixEntry e;
            e.model = base;
            e.model.residual = r;
            e.model.bn = b;
            e.name = phn::to_string(r) + "_" + phn::to_string(b);
            out.push_back(std::move(e));
        }
    }
    return out;
}

std::vector<MatrixEntry> selection_matrix(const ModelConfig& base) {
    std::vector<MatrixEntry> out;
    for (const char* pattern : {"embed", "sa", "Psa", "sa+sg", "Psa+sg", "sa+Psg", "Psa+Psg"}) {
        MatrixEntry e;
        e.model = base;
        e.model.pattern = SelectionPattern::parse(pattern);
        e.name = pattern;
        out.push_back(std::move(e));
    }
    return out;
}

std::string matrix_to_json(const std::vector<MatrixEntry>& entries) {
    json j = json::array();
    for (const MatrixEntry& e : entries) {
        json item;
        item["name"] = e.name;
        item["model"] = json::parse(e.model.to_json());
        j.push_back(std::move(item));
    }
    return j.dump(2) + "\n";
}

std::vector<MatrixEntry> matrix_from_json(const std::string& text) {
    json j = parse_json(text, "config matrix");
    if (!j.is_array() || j.empty()) throw ConfigError("config matrix: expected a non-empty array");
    std::vector<MatrixEntry> out;
    for (const json& item : j) {
        MatrixEntry e;
        try {
            e.name = item.at("name").get<std::string>();
        } catch (const json::exception& e2) {
            throw ConfigError(std::string("config matrix: ") + e2.what());
        }
        if (!item.contains("model")) throw ConfigError("config matrix: entry '" + e.name + "' has no model");
        json m = item["model"];
        const bool vocab_unset = !m.contains("vocab_sizes") || m["vocab_sizes"].empty();
        if (vocab_unset) m["vocab_sizes"] = json::array({2});
        e.model = ModelConfig::from_json(m.dump());
        if (vocab_unset) e.model.vocab_sizes.clear();
        out.push_back(std::move(e));
    }
    return out;
}

DiagnoseOutcome run_diagnose(const RunConfig& config, const std::vector<MatrixEntry>& entries,
                             std::size_t activation_samples) {
    config.validate();
    if (entries.empty()) throw ConfigError("diagnose: empty config matrix");
    const fs::path dir(config.output_dir);
    fs::create_directories(dir);
    write_text(dir / "config.json", config.to_json());
    write_text(dir / "matrix.json", matrix_to_json(entries));

    LoadedData data = load_dataset(config.data);
    if (data.splits.test.size() < activation_samples) {
        throw ContractError("diagnose: test fold has " + std::to_string(data.splits.test.size()) +
                            " samples, need " + std::to_string(activation_samples));
    }
    GradientIntervalSpec interval;
    std::vector<std::size_t> head(activation_samples);
    std::iota(head.begin(), head.end(), std::size_t{0});
    const EncodedBatch probe = data.splits.test.take(head);

    DiagnoseOutcome outcome;
    std::vector<std::string> manifest_files = {"config.json", "matrix.json"};
    std::vector<ActivationDump> dumps;
    dumps.reserve(entries.size());

    for (const MatrixEntry& entry : entries) {
        ModelConfig mc = resolve_model_config(entry.model, data.vocab_sizes);
        PhnModel model(mc);
        train(model, data.splits.train, data.splits.validation, config.train, config.deterministic);

        const std::string stem = sanitize_name(entry.name);
        const std::string ckpt = "checkpoint_" + stem + ".bin";
        save_checkpoint(model, (dir / ckpt).string());

        ReportHeader header;
        header.config_name = entry.name;
        header.epsilon = interval.epsilon;
        header.seed = config.train.seed;
        header.checkpoint_hash = fnv1a_file((dir / ckpt).string());

        dumps.push_back(activation_dump(model, data.splits.test, activation_samples, interval));
        const std::string act = "activation_" + stem + ".csv";
        write_activation_csv(dumps.back(), header, (dir / act).string());
        outcome.activation_files.push_back(act);

        const std::string scaling = "scaling_" + stem + ".csv";
        write_scaling_csv(ssg_scaling_report(model, probe), header, (dir / scaling).string());
        outcome.scaling_files.push_back(scaling);

        manifest_files.push_back(ckpt);
        manifest_files.push_back(act);
        manifest_files.push_back(scaling);
    }

    std::vector<std::pair<std::string, const ActivationDump*>> reports;
    for (std::size_t i = 0; i < entries.size(); ++i) reports.emplace_back(entries[i].name, &dumps[i]);
    ReportHeader summary_header;
    summary_header.config_name = "matrix";
    summary_header.epsilon = interval.epsilon;
    summary_header.seed = config.train.seed;
    outcome.summary_file = "weak_summary.csv";
    write_weak_summary_csv(weak_gradient_summary(reports), summary_header,
                           (dir / outcome.summary_file).string());
    manifest_files.push_back(outcome.summary_file);

    write_manifest(dir, "diagnose", manifest_files);
    return outcome;
}

}  // namespace phn
