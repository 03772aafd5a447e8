#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "phn/data.hpp"
#include "phn/graph.hpp"
#include "phn/ssg.hpp"
#include "phn/towers.hpp"

namespace phn {

// none: towers feed the head directly. public_bn: one batch-norm over the
// concatenated tower outputs. private_bn: one batch-norm per tower output
// before concatenation.
enum class BnMode { none, public_bn, private_bn };

BnMode bn_mode_from_string(const std::string& s);  // "none" | "public" | "private"
std::string to_string(BnMode m);

enum class TowerKind { cross, field, ffn };
std::string to_string(TowerKind k);

// Everything needed to rebuild a model bitwise: sizes, depths (0 disables a
// tower), residual/bn modes, the selection pattern, and the init seed.
struct ModelConfig {
    std::vector<std::size_t> vocab_sizes;  // per field, including reserved index 0
    std::size_t embed_dim = 8;
    std::size_t cross_depth = 2;
    std::size_t field_depth = 2;
    std::size_t ffn_depth = 2;
    std::size_t ffn_hidden = 0;  // 0 -> 4 * embed_dim
    ResidualMode residual = ResidualMode::base;
    BnMode bn = BnMode::none;
    SelectionPattern pattern;  // defaults to Psa+sg
    std::size_t head_count = 1;
    double leaky_slope = 0.01;
    std::uint64_t seed = 1;

    std::size_t field_count() const { return vocab_sizes.size(); }
    std::size_t flat_width() const { return field_count() * embed_dim; }
    std::size_t ffn_hidden_width() const { return ffn_hidden ? ffn_hidden : 4 * embed_dim; }
    std::vector<TowerKind> towers() const;  // enabled towers, fixed order
    std::vector<std::size_t> tower_widths() const;
    std::size_t head_width() const;  // sum of tower widths

    void validate() const;  // ConfigError naming the offending field
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

// Closed-form parameter count for a config; kept in sync with build() by
// test, and documented in the README.
std::size_t expected_parameter_count(const ModelConfig& config);

// Node ids of one wired forward pass (all inside the caller's Graph).
struct ForwardNodes {
    NodeId e_se = 0;                    // (B, F, d) raw embeddings
    std::vector<NodeId> e_enhanced;     // per enabled tower, (B, F, d)
    std::vector<NodeId> tower_raw;      // per enabled tower, flattened (B, w_t)
    std::vector<NodeId> tower_normed;   // after private BN (== raw otherwise)
    NodeId head_input = 0;              // (B, W) after concat (+ public BN)
    NodeId logit = 0;                   // (B)
    NodeId prob = 0;                    // (B)
};

// Minimal trainable-model interface shared by PHN and the linear baseline:
// the training loop only needs parameters and a probability node.
class Model {
public:
    virtual ~Model() = default;
    virtual std::string kind() const = 0;
    virtual std::string config_json() const = 0;
    virtual ParameterStore& params() = 0;
    virtual const ParameterStore& params() const = 0;
    virtual NodeId prob_node(Graph& g, const EncodedBatch& batch, bool train) = 0;
};

// The full parallel model: shared embedding, optional attention + soft
// gating per the selection pattern, three parallel towers, optional batch
// norm, and a single linear head over the concatenated tower outputs.
class PhnModel : public Model {
public:
    explicit PhnModel(ModelConfig config);
    PhnModel(const PhnModel&) = delete;
    PhnModel& operator=(const PhnModel&) = delete;
    PhnModel(PhnModel&&) = default;
    PhnModel& operator=(PhnModel&&) = default;

    std::string kind() const override { return "phn"; }
    std::string config_json() const override;
    ParameterStore& params() override { return params_; }
    const ParameterStore& params() const override { return params_; }
    NodeId prob_node(Graph& g, const EncodedBatch& batch, bool train) override;

    // Appends the whole forward pass to g and returns the interesting nodes.
    ForwardNodes wire_forward(Graph& g, const EncodedBatch& batch, bool train);

    const ModelConfig& config() const { return config_; }
    const std::vector<TowerKind>& towers() const { return towers_; }

    const EmbeddingTables& embedding() const { return embedding_; }
    // Instance for an enabled-tower slot; resolves sharing internally.
    const AttentionParams& attention_for(std::size_t slot) const;
    const SoftGate& gate_for(std::size_t slot) const;
    const Parameter& head_weights() const { return *head_w_; }
    const Parameter& head_bias() const { return *head_b_; }

private:
    struct BnState {
        Parameter* gamma = nullptr;
        Parameter* beta = nullptr;
        Parameter* mean = nullptr;
        Parameter* var = nullptr;
    };

    NodeId bn_forward(Graph& g, NodeId x, std::size_t which, bool train);

    ModelConfig config_;
    ParameterStore params_;
    std::vector<TowerKind> towers_;
    EmbeddingTables embedding_;
    std::vector<AttentionParams> attentions_;  // 0, 1 (shared) or one per tower
    std::vector<SoftGate> gates_;
    CrossTower cross_;
    FieldTower field_;
    FfnTower ffn_;
    std::vector<BnState> bns_;  // 0, 1 (public) or one per tower
    Parameter* head_w_ = nullptr;
    Parameter* head_b_ = nullptr;
};

// Logistic-regression baseline: one scalar weight per (field, token) plus a
// global bias, all zero-initialized. Shares the training loop with PHN.
class LrModel : public Model {
public:
    LrModel(std::vector<std::size_t> vocab_sizes, std::uint64_t seed);

    std::string kind() const override { return "lr"; }
    std::string config_json() const override;
    ParameterStore& params() override { return params_; }
    const ParameterStore& params() const override { return params_; }
    NodeId prob_node(Graph& g, const EncodedBatch& batch, bool train) override;

private:
    std::vector<std::size_t> vocab_sizes_;
    std::uint64_t seed_ = 0;
    ParameterStore params_;
    EmbeddingTables weights_;  // d = 1
    Parameter* bias_ = nullptr;
};

// Builds a fresh model from a config JSON object with a "model" kind field.
std::unique_ptr<Model> model_from_config_json(const std::string& json_text);

// Per-tower slices of the final logit. Only defined when the head input is
// linear in the tower outputs (bn none/private); public BN mixes towers.
struct LogitDecomposition {
    std::vector<TowerKind> towers;
    std::vector<std::vector<double>> partial;  // [tower][sample]
    std::vector<double> logit;                 // full logit per sample
    double bias = 0.0;
};

LogitDecomposition tower_logit_decomposition(PhnModel& model, const EncodedBatch& batch);

// Checkpoints are self-describing: magic + config JSON + every parameter
// buffer (raw little-endian doubles). Round trips are bitwise exact.
void save_checkpoint(const Model& model, const std::string& path);
std::unique_ptr<Model> load_checkpoint(const std::string& path);

// Downcast with a clear error for commands that need the full model.
PhnModel& require_phn(Model& model);

// FNV-1a 64-bit over a file's bytes; used to fingerprint checkpoints in
// report headers.
std::uint64_t fnv1a_file(const std::string& path);
std::uint64_t fnv1a_bytes(const void* data, std::size_t size);

}  // namespace phn
