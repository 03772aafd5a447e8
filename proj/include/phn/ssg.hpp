#pragma once

#include <string>
#include <vector>

#include "phn/data.hpp"
#include "phn/graph.hpp"
#include "phn/rng.hpp"

namespace phn {

enum class SelectionMode { embed, sa, sg };
enum class Sharing { shared, per_tower };

// Which enhanced features the towers consume: raw embeddings, self-attention
// output, or the gated mix of both — and whether attention/gate instances are
// shared across towers or allocated per tower.
struct SelectionPattern {
    SelectionMode mode = SelectionMode::sg;
    Sharing attention = Sharing::per_tower;
    Sharing gate = Sharing::shared;

    // Accepts: embed | sa | Psa | sa+sg | Psa+sg | sa+Psg | Psa+Psg
    // (P prefix = per-tower instance).
    static SelectionPattern parse(const std::string& s);
    std::string to_string() const;
    bool uses_attention() const { return mode != SelectionMode::embed; }
    bool uses_gate() const { return mode == SelectionMode::sg; }
};

// Per-field embedding matrices sharing one width d.
struct EmbeddingTables {
    std::vector<Parameter*> fields;
    std::size_t d = 0;
};

EmbeddingTables make_embedding(ParameterStore& ps, const std::vector<std::size_t>& vocab_sizes,
                               std::size_t d, RngStream& rng, const std::string& prefix);

// (batch, F, d) lookup of a whole encoded batch.
NodeId embed_forward(Graph& g, const EmbeddingTables& emb, const EncodedBatch& batch);

struct AttentionParams {
    Parameter* wq = nullptr;
    Parameter* wk = nullptr;
    Parameter* wv = nullptr;
    std::size_t head_count = 1;
};

AttentionParams make_attention(ParameterStore& ps, std::size_t d, std::size_t head_count,
                               RngStream& rng, const std::string& prefix);

// Multi-head self-attention across the field axis: per head,
// softmax(Q Kᵀ / sqrt(d_k)) V with heads concatenated back to width d.
// Attention never crosses samples.
NodeId attention_forward(Graph& g, NodeId e, const AttentionParams& att);

// Gate parameters theta (F x d); the effective gate is sigma(theta).
struct SoftGate {
    Parameter* theta = nullptr;
};

SoftGate make_gate(ParameterStore& ps, std::size_t fields, std::size_t d, const std::string& prefix);

// E_sg = G ⊙ E_sa + (1 − G) ⊙ E_se with G = sigma(theta), elementwise a
// convex combination of the two inputs.
NodeId gate_forward(Graph& g, NodeId e_se, NodeId e_sa, const SoftGate& gate);

// Per-field mean over batch and embedding dims of |enhanced| / (|base| + 1e-8);
// both tensors (B, F, d), result (F).
Tensor scaling_ratio(const Tensor& enhanced, const Tensor& base);

}  // namespace phn
