#include "phn/towers.hpp"

#include <cmath>

#include "phn/errors.hpp"

namespace phn {
namespace {

Tensor uniform_fan_in(RngStream& rng, Shape shape, std::size_t fan_in) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(-scale, scale);
    return t;
}

}  // namespace

ResidualMode residual_mode_from_string(const std::string& s) {
    if (s == "base") return ResidualMode::base;
    if (s == "rl") return ResidualMode::rl;
    if (s == "prl") return ResidualMode::prl;
    throw ConfigError("unknown residual mode '" + s + "' (expected base, rl or prl)");
}

std::string to_string(ResidualMode m) {
    switch (m) {
        case ResidualMode::base: return "base";
        case ResidualMode::rl: return "rl";
        case ResidualMode::prl: return "prl";
    }
    throw ContractError("unreachable residual mode");
}

CrossTower make_cross_tower(ParameterStore& ps, std::size_t width, std::size_t depth,
                            ResidualMode mode, RngStream& rng, const std::string& prefix) {
    if (width == 0) throw ConfigError("cross tower: width must be positive");
    if (depth == 0) throw ConfigError("cross tower: depth must be at least 1");
    CrossTower tower;
    tower.width = width;
    for (std::size_t l = 0; l < depth; ++l) {
        const std::string lp = prefix + ".l" + std::to_string(l);
        CrossLayerParams layer;
        layer.W = &ps.add(lp + ".W", uniform_fan_in(rng, {width, width}, width));
        layer.w = &ps.add(lp + ".w", uniform_fan_in(rng, {width}, width));
        layer.b = &ps.add(lp + ".b", Tensor::zeros({width}));
        if (mode == ResidualMode::prl) {
            // init 1 and no RNG draw: prl starts identical to rl and leaves
            // the shared weight stream untouched across modes
            layer.p = &ps.add(lp + ".p", Tensor({width}, 1.0));
        }
        tower.layers.push_back(layer);
    }
    return tower;
}

NodeId cross_layer_forward(Graph& g, NodeId x0, NodeId xi, const CrossLayerParams& layer,
                           ResidualMode mode) {
    NodeId bitwise = g.hadamard(x0, g.add_bias(g.matmul(xi, g.leaf(*layer.W)), g.leaf(*layer.b)));
    NodeId scalar_term = g.row_scale(x0, g.matvec(xi, g.leaf(*layer.w)));
    NodeId skip = mode == ResidualMode::prl ? g.scale_cols(xi, g.leaf(*layer.p)) : xi;
    return g.add(g.add(bitwise, scalar_term), skip);
}

NodeId cross_tower_forward(Graph& g, NodeId x0, const CrossTower& tower, ResidualMode mode) {
    const Tensor& X0 = g.value(x0);
    if (X0.rank() != 2 || X0.dim(1) != tower.width) {
        throw ShapeError("cross tower: input " + shape_to_string(X0.shape()) + " vs width " +
                         std::to_string(tower.width));
    }
    NodeId xi = x0;
    for (const auto& layer : tower.layers) {
        xi = cross_layer_forward(g, x0, xi, layer, mode);
    }
    return xi;
}

FieldTower make_field_tower(ParameterStore& ps, std::size_t fields, std::size_t d, std::size_t depth,
                            ResidualMode mode, RngStream& rng, const std::string& prefix) {
    if (fields == 0 || d == 0) throw ConfigError("field tower: fields and d must be positive");
    if (depth == 0) throw ConfigError("field tower: depth must be at least 1");
    FieldTower tower;
    tower.fields = fields;
    tower.d = d;
    for (std::size_t l = 0; l < depth; ++l) {
        const std::string lp = prefix + ".l" + std::to_string(l);
        FieldLayerParams layer;
        layer.K = &ps.add(lp + ".K", uniform_fan_in(rng, {fields, fields}, fields));
        layer.u = &ps.add(lp + ".u", Tensor({fields}, 1.0));
        if (mode == ResidualMode::prl) {
            layer.p = &ps.add(lp + ".p", Tensor({fields, d}, 1.0));
        }
        tower.layers.push_back(layer);
    }
    return tower;
}

NodeId field_layer_forward(Graph& g, NodeId e0, NodeId h, const FieldLayerParams& layer,
                           ResidualMode mode) {
    NodeId mixed = g.hadamard(h, g.bmm_shared_left(g.leaf(*layer.K), e0));
    NodeId out = g.add(mixed, g.scale_rows(h, g.leaf(*layer.u)));
    if (mode == ResidualMode::rl) {
        out = g.add(out, h);
    } else if (mode == ResidualMode::prl) {
        out = g.add(out, g.scale_fields(h, g.leaf(*layer.p)));
    }
    return out;
}

NodeId field_tower_forward(Graph& g, NodeId e0, const FieldTower& tower, ResidualMode mode) {
    const Tensor& E0 = g.value(e0);
    if (E0.rank() != 3 || E0.dim(1) != tower.fields || E0.dim(2) != tower.d) {
        throw ShapeError("field tower: input " + shape_to_string(E0.shape()) + " vs (" +
                         std::to_string(tower.fields) + "," + std::to_string(tower.d) + ")");
    }
    NodeId h = e0;
    for (const auto& layer : tower.layers) {
        h = field_layer_forward(g, e0, h, layer, mode);
    }
    return h;
}

std::vector<std::size_t> ffn_widths(std::size_t in_width, std::size_t hidden_width,
                                    std::size_t out_width, std::size_t depth) {
    if (depth == 0) throw ConfigError("ffn tower: depth must be at least 1");
    std::vector<std::size_t> widths;
    widths.push_back(in_width);
    for (std::size_t l = 0; l + 1 < depth; ++l) widths.push_back(hidden_width);
    widths.push_back(out_width);
    return widths;
}

FfnTower make_ffn_tower(ParameterStore& ps, const std::vector<std::size_t>& widths, double slope,
                        ResidualMode mode, RngStream& rng, const std::string& prefix) {
    if (widths.size() < 2) throw ConfigError("ffn tower: need at least one layer");
    for (std::size_t w : widths) {
        if (w == 0) throw ConfigError("ffn tower: zero layer width");
    }
    if (!(slope > 0.0 && slope < 1.0)) {
        throw ConfigError("ffn tower: slope must be in (0,1), got " + std::to_string(slope));
    }
    FfnTower tower;
    tower.widths = widths;
    tower.slope = slope;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const std::string lp = prefix + ".l" + std::to_string(l);
        const std::size_t din = widths[l], dout = widths[l + 1];
        FfnLayerParams layer;
        layer.W = &ps.add(lp + ".W", uniform_fan_in(rng, {din, dout}, din));
        layer.b = &ps.add(lp + ".b", Tensor::zeros({dout}));
        layer.skip = mode != ResidualMode::base && din == dout;
        if (mode == ResidualMode::prl && layer.skip) {
            layer.p = &ps.add(lp + ".p", Tensor({dout}, 1.0));
        }
        tower.layers.push_back(layer);
    }
    return tower;
}

NodeId ffn_layer_forward(Graph& g, NodeId x, const FfnLayerParams& layer, double slope,
                         ResidualMode mode) {
    if (layer.skip && g.value(x).dim(1) != layer.W->value.dim(1)) {
        throw ConfigError("ffn layer: skip requested across unequal widths");
    }
    NodeId y = g.leaky_relu(g.add_bias(g.matmul(x, g.leaf(*layer.W)), g.leaf(*layer.b)), slope);
    if (layer.skip) {
        y = mode == ResidualMode::prl ? g.add(y, g.scale_cols(x, g.leaf(*layer.p))) : g.add(y, x);
    }
    return y;
}

NodeId ffn_tower_forward(Graph& g, NodeId x, const FfnTower& tower, ResidualMode mode) {
    const Tensor& X = g.value(x);
    if (X.rank() != 2 || X.dim(1) != tower.widths.front()) {
        throw ShapeError("ffn tower: input " + shape_to_string(X.shape()) + " vs width " +
                         std::to_string(tower.widths.front()));
    }
    NodeId h = x;
    for (const auto& layer : tower.layers) {
        h = ffn_layer_forward(g, h, layer, tower.slope, mode);
    }
    return h;
}

}  // namespace phn
