#include "phn/ssg.hpp"

#include <cmath>

#include "phn/errors.hpp"

namespace phn {

SelectionPattern SelectionPattern::parse(const std::string& s) {
    SelectionPattern p;
    auto part = [&](const std::string& tok, bool gate_part) {
        bool per_tower = !tok.empty() && tok[0] == 'P';
        std::string core = per_tower ? tok.substr(1) : tok;
        if (gate_part) {
            if (core != "sg") throw ConfigError("selection pattern: bad gate term '" + tok + "'");
            p.gate = per_tower ? Sharing::per_tower : Sharing::shared;
        } else {
            if (core != "sa") throw ConfigError("selection pattern: bad attention term '" + tok + "'");
            p.attention = per_tower ? Sharing::per_tower : Sharing::shared;
        }
    };
    auto plus = s.find('+');
    if (s == "embed") {
        p.mode = SelectionMode::embed;
    } else if (plus == std::string::npos) {
        p.mode = SelectionMode::sa;
        part(s, false);
    } else {
        p.mode = SelectionMode::sg;
        part(s.substr(0, plus), false);
        part(s.substr(plus + 1), true);
    }
    return p;
}

std::string SelectionPattern::to_string() const {
    if (mode == SelectionMode::embed) return "embed";
    std::string out = attention == Sharing::per_tower ? "Psa" : "sa";
    if (mode == SelectionMode::sg) {
        out += gate == Sharing::per_tower ? "+Psg" : "+sg";
    }
    return out;
}

EmbeddingTables make_embedding(ParameterStore& ps, const std::vector<std::size_t>& vocab_sizes,
                               std::size_t d, RngStream& rng, const std::string& prefix) {
    if (d == 0) throw ConfigError("embedding: d must be positive");
    if (vocab_sizes.empty()) throw ConfigError("embedding: no fields");
    EmbeddingTables emb;
    emb.d = d;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t f = 0; f < vocab_sizes.size(); ++f) {
        if (vocab_sizes[f] == 0) throw ConfigError("embedding: zero vocab for field " + std::to_string(f));
        Tensor t({vocab_sizes[f], d});
        for (double& v : t.data()) v = rng.uniform(-scale, scale);
        emb.fields.push_back(&ps.add(prefix + ".field" + std::to_string(f), std::move(t)));
    }
    return emb;
}

NodeId embed_forward(Graph& g, const EmbeddingTables& emb, const EncodedBatch& batch) {
    if (batch.field_count != emb.fields.size()) {
        throw ContractError("embed_forward: batch has " + std::to_string(batch.field_count) +
                            " fields, embedding has " + std::to_string(emb.fields.size()));
    }
    std::vector<NodeId> tables;
    tables.reserve(emb.fields.size());
    for (Parameter* p : emb.fields) tables.push_back(g.leaf(*p));
    return g.embed_lookup(tables, batch.indices, batch.size(), batch.field_count);
}

AttentionParams make_attention(ParameterStore& ps, std::size_t d, std::size_t head_count,
                               RngStream& rng, const std::string& prefix) {
    if (head_count == 0) throw ConfigError("attention: head_count must be positive");
    if (d % head_count != 0) {
        throw ConfigError("attention: d=" + std::to_string(d) + " not divisible by head_count=" +
                          std::to_string(head_count));
    }
    AttentionParams att;
    att.head_count = head_count;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    auto proj = [&](const char* name) {
        Tensor t({d, d});
        for (double& v : t.data()) v = rng.uniform(-scale, scale);
        return &ps.add(prefix + "." + name, std::move(t));
    };
    att.wq = proj("wq");
    att.wk = proj("wk");
    att.wv = proj("wv");
    return att;
}

namespace {

// (B,F,d) x (d,d) via a flattening round trip.
NodeId project(Graph& g, NodeId e, NodeId w, std::size_t batch, std::size_t F, std::size_t d) {
    NodeId flat = g.reshape(e, {batch * F, d});
    return g.reshape(g.matmul(flat, w), {batch, F, d});
}

}  // namespace

NodeId attention_forward(Graph& g, NodeId e, const AttentionParams& att) {
    const Tensor& E = g.value(e);
    if (E.rank() != 3) throw ShapeError("attention: expected (batch,F,d), got " + shape_to_string(E.shape()));
    const std::size_t batch = E.dim(0), F = E.dim(1), d = E.dim(2);
    const std::size_t dk = d / att.head_count;

    NodeId q = project(g, e, g.leaf(*att.wq), batch, F, d);
    NodeId k = project(g, e, g.leaf(*att.wk), batch, F, d);
    NodeId v = project(g, e, g.leaf(*att.wv), batch, F, d);

    std::vector<NodeId> heads;
    heads.reserve(att.head_count);
    for (std::size_t h = 0; h < att.head_count; ++h) {
        NodeId qh = att.head_count == 1 ? q : g.slice_last(q, h * dk, (h + 1) * dk);
        NodeId kh = att.head_count == 1 ? k : g.slice_last(k, h * dk, (h + 1) * dk);
        NodeId vh = att.head_count == 1 ? v : g.slice_last(v, h * dk, (h + 1) * dk);
        NodeId scores = g.affine(g.bmm(qh, kh, /*transpose_b=*/true),
                                 1.0 / std::sqrt(static_cast<double>(dk)), 0.0);
        NodeId weights = g.softmax_rows(scores);  // (B,F,F), rows over source fields
        heads.push_back(g.bmm(weights, vh));
    }
    return heads.size() == 1 ? heads[0] : g.concat_last(heads);
}

SoftGate make_gate(ParameterStore& ps, std::size_t fields, std::size_t d, const std::string& prefix) {
    SoftGate gate;
    // theta = 0 puts the gate at 0.5: an even mix of raw and attended features.
    gate.theta = &ps.add(prefix + ".theta", Tensor::zeros({fields, d}));
    return gate;
}

NodeId gate_forward(Graph& g, NodeId e_se, NodeId e_sa, const SoftGate& gate) {
    require_same_shape(g.value(e_se), g.value(e_sa), "gate_forward");
    NodeId gatev = g.sigmoid(g.leaf(*gate.theta));       // (F,d) in (0,1)
    NodeId complement = g.affine(gatev, -1.0, 1.0);      // 1 - G
    return g.add(g.scale_fields(e_sa, gatev), g.scale_fields(e_se, complement));
}

Tensor scaling_ratio(const Tensor& enhanced, const Tensor& base) {
    require_same_shape(enhanced, base, "scaling_ratio");
    if (enhanced.rank() != 3) {
        throw ShapeError("scaling_ratio: expected (batch,F,d), got " + shape_to_string(enhanced.shape()));
    }
    const std::size_t batch = enhanced.dim(0), F = enhanced.dim(1), d = enhanced.dim(2);
    if (batch == 0) throw ContractError("scaling_ratio: empty batch");
    Tensor out({F});
    for (std::size_t f = 0; f < F; ++f) {
        double acc = 0.0;
        for (std::size_t s = 0; s < batch; ++s) {
            for (std::size_t c = 0; c < d; ++c) {
                acc += std::abs(enhanced(s, f, c)) / (std::abs(base(s, f, c)) + 1e-8);
            }
        }
        out[f] = acc / static_cast<double>(batch * d);
    }
    return out;
}

}  // namespace phn
