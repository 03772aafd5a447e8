#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "phn/params.hpp"
#include "phn/tensor.hpp"

namespace phn {

using NodeId = std::uint32_t;

enum class OpKind : std::uint8_t {
    leaf,
    constant,
    matmul,
    matvec,
    bmm,
    bmm_shared_left,
    add,
    add_bias,
    add_scalar,
    hadamard,
    row_scale,
    scale_fields,
    scale_rows,
    scale_cols,
    affine,
    sigmoid,
    leaky_relu,
    softmax,
    batch_norm,
    embed_lookup,
    reshape,
    slice_last,
    concat_last,
    sum_last,
    sum_all,
    mean_all,
    logloss,
};

// One record on the tape: the op, its input node ids, the forward value and
// (during backward) the accumulated gradient. Construction order is the
// topological order; backward walks it in reverse.
struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Tensor value;
    Tensor grad;  // empty until backward touches this node
    std::function<void(class Graph&)> backward;
    Parameter* param = nullptr;  // set for leaves bound to a parameter
};

// Reverse-mode tape covering exactly the primitives the model needs.
// Each op appends a node; backward() replays the tape in reverse and then
// accumulates leaf gradients into their parameters' grad slots.
class Graph {
public:
    NodeId leaf(Parameter& p);   // memoized: same parameter -> same node
    NodeId constant(Tensor t);   // value tracked, gradient discarded

    // a (m,k) x b (k,n) -> (m,n)
    NodeId matmul(NodeId a, NodeId b);
    // x (m,n) x v (n) -> (m)
    NodeId matvec(NodeId x, NodeId v);
    // a (B,m,k) x b (B,k,n) -> (B,m,n); transpose_b treats b as (B,n,k)
    NodeId bmm(NodeId a, NodeId b, bool transpose_b = false);
    // k (F,F) applied to every sample of x (B,F,d) -> (B,F,d)
    NodeId bmm_shared_left(NodeId k, NodeId x);

    NodeId add(NodeId a, NodeId b);                  // same shape
    NodeId add_bias(NodeId x, NodeId b);             // (m,n) + (n) per row
    NodeId add_scalar(NodeId x, NodeId b);           // (m) + scalar
    NodeId hadamard(NodeId a, NodeId b);             // same shape
    NodeId row_scale(NodeId x, NodeId s);            // (m,n) rows scaled by s (m)
    NodeId scale_fields(NodeId x, NodeId g);         // (B,F,d) * g (F,d), broadcast over B
    NodeId scale_rows(NodeId x, NodeId u);           // (B,F,d) * u (F), broadcast over B and d
    NodeId scale_cols(NodeId x, NodeId s);           // (m,n) * s (n), broadcast over rows
    NodeId affine(NodeId x, double mul, double shift);

    NodeId sigmoid(NodeId x);
    NodeId leaky_relu(NodeId x, double slope);
    NodeId softmax_rows(NodeId x);  // softmax over the last axis, rank 1..3

    // Train mode standardizes by batch mean / population variance and updates
    // the running stats (non-trainable parameters) in place; eval mode uses
    // the running stats. Requires batch >= 2 in train mode.
    NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, Parameter& running_mean,
                      Parameter& running_var, double eps, double momentum, bool train);

    // tables[f] is the leaf of field f's (vocab_f x d) matrix; indices is a
    // row-major (rows x fields) matrix. Output (rows, fields, d); backward
    // scatter-adds into the looked-up rows only.
    NodeId embed_lookup(const std::vector<NodeId>& tables, std::span<const std::uint32_t> indices,
                        std::size_t rows, std::size_t fields);

    NodeId reshape(NodeId x, Shape target);
    NodeId slice_last(NodeId x, std::size_t from, std::size_t to);  // rank 2..3
    NodeId concat_last(const std::vector<NodeId>& parts);           // rank 2..3

    NodeId sum_last(NodeId x);  // (m,n) -> (m)
    NodeId sum_all(NodeId x);   // -> scalar
    NodeId mean_all(NodeId x);  // -> scalar

    // Mean binary cross-entropy of probabilities vs {0,1} labels, with the
    // probabilities clamped to [1e-7, 1-1e-7] before the logs.
    NodeId logloss(NodeId prob, std::span<const double> labels);

    // Reverse sweep from a scalar loss; accumulates into parameter grads.
    void backward(NodeId loss);

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    double scalar_value(NodeId id) const { return nodes_[id].value[0]; }
    const Tensor& grad(NodeId id) const;
    Tensor& grad_buffer(NodeId id);  // lazily allocates a zero buffer
    const Node& node(NodeId id) const { return nodes_[id]; }
    std::size_t node_count() const { return nodes_.size(); }

    static constexpr double kProbClamp = 1e-7;

private:
    NodeId push(Node n);
    std::vector<Node> nodes_;
    std::vector<std::pair<Parameter*, NodeId>> leaf_cache_;
};

}  // namespace phn
