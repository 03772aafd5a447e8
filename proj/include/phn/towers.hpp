#pragma once

#include <string>
#include <vector>

#include "phn/graph.hpp"
#include "phn/rng.hpp"

namespace phn {

// base: each layer's own formula only. rl: adds an identity skip per layer.
// prl: adds a p ⊙ x skip with trainable p (init 1, so prl starts out
// behaving exactly like rl).
enum class ResidualMode { base, rl, prl };

ResidualMode residual_mode_from_string(const std::string& s);
std::string to_string(ResidualMode m);

// One combined cross layer over the flattened width n:
//   y = x0 ⊙ (x_i W + b) + (x_iᵀ w) · x0 + skip(x_i)
// where skip is x_i for base/rl and p ⊙ x_i for prl.
struct CrossLayerParams {
    Parameter* W = nullptr;  // (n, n)
    Parameter* w = nullptr;  // (n)
    Parameter* b = nullptr;  // (n)
    Parameter* p = nullptr;  // (n), prl only
};

struct CrossTower {
    std::vector<CrossLayerParams> layers;
    std::size_t width = 0;
};

CrossTower make_cross_tower(ParameterStore& ps, std::size_t width, std::size_t depth,
                            ResidualMode mode, RngStream& rng, const std::string& prefix);

NodeId cross_layer_forward(Graph& g, NodeId x0, NodeId xi, const CrossLayerParams& layer,
                           ResidualMode mode);

// x0: (B, n) layer-0 features, fed to every layer.
NodeId cross_tower_forward(Graph& g, NodeId x0, const CrossTower& tower, ResidualMode mode);

// One field interaction layer on (B, F, d):
//   out = H ⊙ (K · E0) + u ⊙_rows H + skip(H)
// K mixes fields of the layer-0 features E0; u is the per-field residual
// scale that is part of the layer itself (always trainable); skip is the
// ResidualMode extra (none / H / p ⊙ H with p of shape (F, d)).
struct FieldLayerParams {
    Parameter* K = nullptr;  // (F, F)
    Parameter* u = nullptr;  // (F)
    Parameter* p = nullptr;  // (F, d), prl only
};

struct FieldTower {
    std::vector<FieldLayerParams> layers;
    std::size_t fields = 0;
    std::size_t d = 0;
};

FieldTower make_field_tower(ParameterStore& ps, std::size_t fields, std::size_t d, std::size_t depth,
                            ResidualMode mode, RngStream& rng, const std::string& prefix);

NodeId field_layer_forward(Graph& g, NodeId e0, NodeId h, const FieldLayerParams& layer,
                           ResidualMode mode);

NodeId field_tower_forward(Graph& g, NodeId e0, const FieldTower& tower, ResidualMode mode);

// Feed-forward chain x -> LeakyReLU(x W + b), with rl/prl skips only on
// layers where input and output widths match.
struct FfnLayerParams {
    Parameter* W = nullptr;  // (d_in, d_out)
    Parameter* b = nullptr;  // (d_out)
    Parameter* p = nullptr;  // (d_out), prl layers with matching widths only
    bool skip = false;
};

struct FfnTower {
    std::vector<FfnLayerParams> layers;
    std::vector<std::size_t> widths;  // depth + 1 entries
    double slope = 0.01;
};

// Width chain for a given depth: in_width, then (depth-1) hidden layers of
// hidden_width, then out_width.
std::vector<std::size_t> ffn_widths(std::size_t in_width, std::size_t hidden_width,
                                    std::size_t out_width, std::size_t depth);

FfnTower make_ffn_tower(ParameterStore& ps, const std::vector<std::size_t>& widths, double slope,
                        ResidualMode mode, RngStream& rng, const std::string& prefix);

NodeId ffn_layer_forward(Graph& g, NodeId x, const FfnLayerParams& layer, double slope,
                         ResidualMode mode);

NodeId ffn_tower_forward(Graph& g, NodeId x, const FfnTower& tower, ResidualMode mode);

}  // namespace phn
