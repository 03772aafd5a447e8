#include "phn/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <utility>

#include <json.hpp>

#include "phn/errors.hpp"

namespace phn {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;
constexpr char kCheckpointMagic[8] = {'P', 'H', 'N', 'C', 'K', 'P', 'T', '\x01'};

}  // namespace

BnMode bn_mode_from_string(const std::string& s) {
    if (s == "none") return BnMode::none;
    if (s == "public") return BnMode::public_bn;
    if (s == "private") return BnMode::private_bn;
    throw ConfigError("bn mode: expected none|public|private, got '" + s + "'");
}

std::string to_string(BnMode m) {
    switch (m) {
        case BnMode::none: return "none";
        case BnMode::public_bn: return "public";
        case BnMode::private_bn: return "private";
    }
    throw ContractError("bn mode: bad enum value");
}

std::string to_string(TowerKind k) {
    switch (k) {
        case TowerKind::cross: return "cross";
        case TowerKind::field: return "field";
        case TowerKind::ffn: return "ffn";
    }
    throw ContractError("tower kind: bad enum value");
}

std::vector<TowerKind> ModelConfig::towers() const {
    std::vector<TowerKind> out;
    if (cross_depth > 0) out.push_back(TowerKind::cross);
    if (field_depth > 0) out.push_back(TowerKind::field);
    if (ffn_depth > 0) out.push_back(TowerKind::ffn);
    return out;
}

std::vector<std::size_t> ModelConfig::tower_widths() const {
    std::vector<std::size_t> out;
    if (cross_depth > 0) out.push_back(flat_width());
    if (field_depth > 0) out.push_back(flat_width());
    if (ffn_depth > 0) out.push_back(embed_dim);
    return out;
}

std::size_t ModelConfig::head_width() const {
    std::size_t w = 0;
    for (std::size_t tw : tower_widths()) w += tw;
    return w;
}

void ModelConfig::validate() const {
    if (vocab_sizes.empty()) throw ConfigError("model config: vocab_sizes is empty");
    for (std::size_t i = 0; i < vocab_sizes.size(); ++i) {
        if (vocab_sizes[i] < 1) {
            throw ConfigError("model config: vocab_sizes[" + std::to_string(i) + "] must be >= 1");
        }
    }
    if (embed_dim < 1) throw ConfigError("model config: embed_dim must be >= 1");
    if (cross_depth == 0 && field_depth == 0 && ffn_depth == 0) {
        throw ConfigError("model config: all tower depths are 0 (cross_depth/field_depth/ffn_depth)");
    }
    if (pattern.uses_attention()) {
        if (head_count < 1) throw ConfigError("model config: head_count must be >= 1");
        if (embed_dim % head_count != 0) {
            throw ConfigError("model config: head_count " + std::to_string(head_count) +
                              " does not divide embed_dim " + std::to_string(embed_dim));
        }
    }
    if (!(leaky_slope > 0.0) || !(leaky_slope < 1.0)) {
        throw ConfigError("model config: leaky_slope must be in (0, 1)");
    }
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["model"] = "phn";
    j["vocab_sizes"] = vocab_sizes;
    j["embed_dim"] = embed_dim;
    j["cross_depth"] = cross_depth;
    j["field_depth"] = field_depth;
    j["ffn_depth"] = ffn_depth;
    j["ffn_hidden"] = ffn_hidden;
    j["residual"] = to_string(residual);
    j["bn"] = phn::to_string(bn);
    j["pattern"] = pattern.to_string();
    j["head_count"] = head_count;
    j["leaky_slope"] = leaky_slope;
    j["seed"] = seed;
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: bad JSON: ") + e.what());
    }
    ModelConfig c;
    try {
        c.vocab_sizes = j.at("vocab_sizes").get<std::vector<std::size_t>>();
        c.embed_dim = j.value("embed_dim", c.embed_dim);
        c.cross_depth = j.value("cross_depth", c.cross_depth);
        c.field_depth = j.value("field_depth", c.field_depth);
        c.ffn_depth = j.value("ffn_depth", c.ffn_depth);
        c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
        if (j.contains("residual")) c.residual = residual_mode_from_string(j["residual"].get<std::string>());
        if (j.contains("bn")) c.bn = bn_mode_from_string(j["bn"].get<std::string>());
        if (j.contains("pattern")) c.pattern = SelectionPattern::parse(j["pattern"].get<std::string>());
        c.head_count = j.value("head_count", c.head_count);
        c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

std::size_t expected_parameter_count(const ModelConfig& c) {
    c.validate();
    const std::size_t F = c.field_count(), d = c.embed_dim, n = c.flat_width();
    std::size_t total = 0;
    for (std::size_t v : c.vocab_sizes) total += v * d;  // embedding

    const std::size_t tower_count = c.towers().size();
    if (c.pattern.uses_attention()) {
        const std::size_t instances = c.pattern.attention == Sharing::shared ? 1 : tower_count;
        total += instances * 3 * d * d;  // W_Q, W_K, W_V
    }
    if (c.pattern.uses_gate()) {
        const std::size_t instances = c.pattern.gate == Sharing::shared ? 1 : tower_count;
        total += instances * F * d;  // theta
    }

    const bool prl = c.residual == ResidualMode::prl;
    if (c.cross_depth > 0) {
        total += c.cross_depth * (n * n + n + n + (prl ? n : 0));  // W, w, b, p
    }
    if (c.field_depth > 0) {
        total += c.field_depth * (F * F + F + (prl ? F * d : 0));  // K, u, p
    }
    if (c.ffn_depth > 0) {
        auto widths = ffn_widths(n, c.ffn_hidden_width(), d, c.ffn_depth);
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            total += widths[l] * widths[l + 1] + widths[l + 1];  // W, b
            if (prl && widths[l] == widths[l + 1]) total += widths[l + 1];
        }
    }

    if (c.bn == BnMode::public_bn) {
        total += 4 * c.head_width();  // gamma, beta, running mean/var
    } else if (c.bn == BnMode::private_bn) {
        for (std::size_t w : c.tower_widths()) total += 4 * w;
    }

    total += c.head_width() + 1;  // head weights + bias
    return total;
}

PhnModel::PhnModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    towers_ = config_.towers();
    RngStream rng(config_.seed);
    const std::size_t F = config_.field_count(), d = config_.embed_dim, n = config_.flat_width();

    embedding_ = make_embedding(params_, config_.vocab_sizes, d, rng, "embed");

    if (config_.pattern.uses_attention()) {
        if (config_.pattern.attention == Sharing::shared) {
            attentions_.push_back(make_attention(params_, d, config_.head_count, rng, "att"));
        } else {
            for (TowerKind t : towers_) {
                attentions_.push_back(
                    make_attention(params_, d, config_.head_count, rng, "att." + phn::to_string(t)));
            }
        }
    }
    if (config_.pattern.uses_gate()) {
        if (config_.pattern.gate == Sharing::shared) {
            gates_.push_back(make_gate(params_, F, d, "gate"));
        } else {
            for (TowerKind t : towers_) {
                gates_.push_back(make_gate(params_, F, d, "gate." + phn::to_string(t)));
            }
        }
    }

    if (config_.cross_depth > 0) {
        cross_ = make_cross_tower(params_, n, config_.cross_depth, config_.residual, rng, "cross");
    }
    if (config_.field_depth > 0) {
        field_ = make_field_tower(params_, F, d, config_.field_depth, config_.residual, rng, "field");
    }
    if (config_.ffn_depth > 0) {
        ffn_ = make_ffn_tower(params_, ffn_widths(n, config_.ffn_hidden_width(), d, config_.ffn_depth),
                              config_.leaky_slope, config_.residual, rng, "ffn");
    }

    auto add_bn = [&](const std::string& prefix, std::size_t width) {
        BnState s;
        s.gamma = &params_.add(prefix + ".gamma", Tensor({width}, 1.0));
        s.beta = &params_.add(prefix + ".beta", Tensor::zeros({width}));
        s.mean = &params_.add(prefix + ".running_mean", Tensor::zeros({width}), /*trainable=*/false);
        s.var = &params_.add(prefix + ".running_var", Tensor({width}, 1.0), /*trainable=*/false);
        bns_.push_back(s);
    };
    if (config_.bn == BnMode::public_bn) {
        add_bn("bn", config_.head_width());
    } else if (config_.bn == BnMode::private_bn) {
        auto widths = config_.tower_widths();
        for (std::size_t t = 0; t < towers_.size(); ++t) {
            add_bn("bn." + phn::to_string(towers_[t]), widths[t]);
        }
    }

    const std::size_t W = config_.head_width();
    Tensor hw({W});
    const double bound = 1.0 / std::sqrt(static_cast<double>(W));
    for (double& v : hw.data()) v = rng.uniform(-bound, bound);
    head_w_ = &params_.add("head.w", std::move(hw));
    head_b_ = &params_.add("head.b", Tensor::zeros({1}));
}

std::string PhnModel::config_json() const { return config_.to_json(); }

const AttentionParams& PhnModel::attention_for(std::size_t slot) const {
    if (attentions_.empty()) throw ContractError("attention_for: pattern allocates no attention");
    return attentions_.size() == 1 ? attentions_[0] : attentions_.at(slot);
}

const SoftGate& PhnModel::gate_for(std::size_t slot) const {
    if (gates_.empty()) throw ContractError("gate_for: pattern allocates no gate");
    return gates_.size() == 1 ? gates_[0] : gates_.at(slot);
}

NodeId PhnModel::bn_forward(Graph& g, NodeId x, std::size_t which, bool train) {
    const BnState& s = bns_.at(which);
    return g.batch_norm(x, g.leaf(*s.gamma), g.leaf(*s.beta), *s.mean, *s.var, kBnEps, kBnMomentum,
                        train);
}

ForwardNodes PhnModel::wire_forward(Graph& g, const EncodedBatch& batch, bool train) {
    if (batch.field_count != config_.field_count()) {
        throw ContractError("forward: batch has " + std::to_string(batch.field_count) +
                            " fields, model expects " + std::to_string(config_.field_count()));
    }
    if (batch.size() == 0) throw ContractError("forward: empty batch");

    ForwardNodes out;
    out.e_se = embed_forward(g, embedding_, batch);
    const std::size_t B = batch.size(), n = config_.flat_width();

    // Shared attention/gate instances produce one shared node; private
    // instances get their own nodes per tower slot.
    std::optional<NodeId> shared_sa;
    auto sa_for = [&](std::size_t slot) {
        if (config_.pattern.attention == Sharing::shared) {
            if (!shared_sa) shared_sa = attention_forward(g, out.e_se, attentions_[0]);
            return *shared_sa;
        }
        return attention_forward(g, out.e_se, attentions_[slot]);
    };
    std::optional<NodeId> shared_enhanced;
    auto enhanced_for = [&](std::size_t slot) -> NodeId {
        switch (config_.pattern.mode) {
            case SelectionMode::embed:
                return out.e_se;
            case SelectionMode::sa:
                return sa_for(slot);
            case SelectionMode::sg: {
                const bool all_shared = config_.pattern.attention == Sharing::shared &&
                                        config_.pattern.gate == Sharing::shared;
                if (all_shared && shared_enhanced) return *shared_enhanced;
                NodeId sg = gate_forward(g, out.e_se, sa_for(slot),
                                         gates_.size() == 1 ? gates_[0] : gates_[slot]);
                if (all_shared) shared_enhanced = sg;
                return sg;
            }
        }
        throw ContractError("forward: bad selection mode");
    };

    for (std::size_t slot = 0; slot < towers_.size(); ++slot) {
        NodeId e = enhanced_for(slot);
        out.e_enhanced.push_back(e);
        NodeId raw = 0;
        switch (towers_[slot]) {
            case TowerKind::cross:
                raw = cross_tower_forward(g, g.reshape(e, {B, n}), cross_, config_.residual);
                break;
            case TowerKind::field:
                raw = g.reshape(field_tower_forward(g, e, field_, config_.residual), {B, n});
                break;
            case TowerKind::ffn:
                raw = ffn_tower_forward(g, g.reshape(e, {B, n}), ffn_, config_.residual);
                break;
        }
        out.tower_raw.push_back(raw);
        out.tower_normed.push_back(config_.bn == BnMode::private_bn ? bn_forward(g, raw, slot, train)
                                                                    : raw);
    }

    NodeId concat = g.concat_last(out.tower_normed);
    out.head_input = config_.bn == BnMode::public_bn ? bn_forward(g, concat, 0, train) : concat;
    out.logit = g.add_scalar(g.matvec(out.head_input, g.leaf(*head_w_)), g.leaf(*head_b_));
    out.prob = g.sigmoid(out.logit);
    return out;
}

NodeId PhnModel::prob_node(Graph& g, const EncodedBatch& batch, bool train) {
    return wire_forward(g, batch, train).prob;
}

LogitDecomposition tower_logit_decomposition(PhnModel& model, const EncodedBatch& batch) {
    if (model.config().bn == BnMode::public_bn) {
        throw ConfigError(
            "tower_logit_decomposition: public batch norm mixes towers; use bn none or private");
    }
    Graph g;
    ForwardNodes nodes = model.wire_forward(g, batch, /*train=*/false);

    LogitDecomposition out;
    out.towers = model.towers();
    out.bias = model.head_bias().value[0];
    const Tensor& hw = model.head_weights().value;
    const Tensor& logits = g.value(nodes.logit);
    out.logit.assign(logits.data().begin(), logits.data().end());

    const std::size_t B = batch.size();
    std::size_t offset = 0;
    for (std::size_t t = 0; t < nodes.tower_normed.size(); ++t) {
        const Tensor& part = g.value(nodes.tower_normed[t]);
        const std::size_t w = part.dim(1);
        std::vector<double> contrib(B, 0.0);
        for (std::size_t i = 0; i < B; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < w; ++j) acc += part(i, j) * hw[offset + j];
            contrib[i] = acc;
        }
        out.partial.push_back(std::move(contrib));
        offset += w;
    }
    return out;
}

LrModel::LrModel(std::vector<std::size_t> vocab_sizes, std::uint64_t seed)
    : vocab_sizes_(std::move(vocab_sizes)), seed_(seed) {
    if (vocab_sizes_.empty()) throw ConfigError("lr model: vocab_sizes is empty");
    // Zero init: the canonical LR starting point (logit 0 everywhere). The
    // seed is recorded for checkpoint fidelity but draws nothing.
    weights_.d = 1;
    for (std::size_t f = 0; f < vocab_sizes_.size(); ++f) {
        weights_.fields.push_back(
            &params_.add("lr.field" + std::to_string(f), Tensor::zeros({vocab_sizes_[f], 1})));
    }
    bias_ = &params_.add("lr.bias", Tensor::zeros({1}));
}

std::string LrModel::config_json() const {
    nlohmann::json j;
    j["model"] = "lr";
    j["vocab_sizes"] = vocab_sizes_;
    j["seed"] = seed_;
    return j.dump(2);
}

NodeId LrModel::prob_node(Graph& g, const EncodedBatch& batch, bool train) {
    (void)train;
    if (batch.field_count != vocab_sizes_.size()) {
        throw ContractError("lr forward: batch has " + std::to_string(batch.field_count) +
                            " fields, model expects " + std::to_string(vocab_sizes_.size()));
    }
    if (batch.size() == 0) throw ContractError("lr forward: empty batch");
    NodeId e = embed_forward(g, weights_, batch);  // (B, F, 1)
    NodeId per_field = g.reshape(e, {batch.size(), batch.field_count});
    NodeId logit = g.add_scalar(g.sum_last(per_field), g.leaf(*bias_));
    return g.sigmoid(logit);
}

std::unique_ptr<Model> model_from_config_json(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: bad JSON: ") + e.what());
    }
    const std::string kind = j.value("model", "phn");
    if (kind == "phn") {
        return std::make_unique<PhnModel>(ModelConfig::from_json(json_text));
    }
    if (kind == "lr") {
        try {
            return std::make_unique<LrModel>(j.at("vocab_sizes").get<std::vector<std::size_t>>(),
                                             j.value("seed", std::uint64_t{1}));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("lr config: ") + e.what());
        }
    }
    throw ConfigError("model config: unknown model kind '" + kind + "'");
}

namespace {

void write_u64(std::ofstream& out, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(buf, 8);
}

std::uint64_t read_u64(std::ifstream& in, const std::string& path) {
    char buf[8];
    if (!in.read(buf, 8)) throw DataError("checkpoint '" + path + "': truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i]))
                                     << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("checkpoint '" + path + "': cannot open for writing");
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::string config = model.config_json();
    write_u64(out, config.size());
    out.write(config.data(), static_cast<std::streamsize>(config.size()));

    const ParameterStore& ps = model.params();
    write_u64(out, ps.count());
    for (std::size_t i = 0; i < ps.count(); ++i) {
        const Parameter& p = ps.at(i);
        write_u64(out, p.name.size());
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        out.put(p.trainable ? '\x01' : '\x00');
        write_u64(out, p.value.rank());
        for (std::size_t r = 0; r < p.value.rank(); ++r) write_u64(out, p.value.dim(r));
        static_assert(sizeof(double) == 8);
        out.write(reinterpret_cast<const char*>(p.value.data().data()),
                  static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    }
    if (!out) throw DataError("checkpoint '" + path + "': write failed");
}

std::unique_ptr<Model> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint '" + path + "': cannot open");
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw DataError("checkpoint '" + path + "': bad magic (not a checkpoint file?)");
    }
    const std::uint64_t config_len = read_u64(in, path);
    std::string config(config_len, '\0');
    if (!in.read(config.data(), static_cast<std::streamsize>(config_len))) {
        throw DataError("checkpoint '" + path + "': truncated config");
    }
    std::unique_ptr<Model> model = model_from_config_json(config);

    ParameterStore& ps = model->params();
    const std::uint64_t count = read_u64(in, path);
    if (count != ps.count()) {
        throw DataError("checkpoint '" + path + "': has " + std::to_string(count) +
                        " parameters, config rebuilds " + std::to_string(ps.count()));
    }
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t name_len = read_u64(in, path);
        std::string name(name_len, '\0');
        if (!in.read(name.data(), static_cast<std::streamsize>(name_len))) {
            throw DataError("checkpoint '" + path + "': truncated parameter name");
        }
        const int trainable = in.get();
        Parameter& p = ps.at(i);
        if (name != p.name) {
            throw DataError("checkpoint '" + path + "': parameter " + std::to_string(i) + " is '" +
                            name + "', expected '" + p.name + "'");
        }
        if (trainable != (p.trainable ? 1 : 0)) {
            throw DataError("checkpoint '" + path + "': trainable flag mismatch on '" + name + "'");
        }
        const std::uint64_t rank = read_u64(in, path);
        Shape shape(rank);
        for (std::size_t r = 0; r < rank; ++r) shape[r] = read_u64(in, path);
        if (shape != p.value.shape()) {
            throw DataError("checkpoint '" + path + "': shape mismatch on '" + name + "'");
        }
        if (!in.read(reinterpret_cast<char*>(p.value.data().data()),
                     static_cast<std::streamsize>(p.value.size() * sizeof(double)))) {
            throw DataError("checkpoint '" + path + "': truncated data for '" + name + "'");
        }
    }
    return model;
}

PhnModel& require_phn(Model& model) {
    auto* phn = dynamic_cast<PhnModel*>(&model);
    if (!phn) {
        throw ConfigError("expected a phn checkpoint, got model kind '" + model.kind() + "'");
    }
    return *phn;
}

std::uint64_t fnv1a_bytes(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("fnv1a: cannot open '" + path + "'");
    std::uint64_t h = 14695981039346656037ull;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        const std::streamsize got = in.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    return h;
}

}  // namespace phn
