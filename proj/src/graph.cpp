#include "phn/graph.hpp"

#include <algorithm>
#include <cmath>

#include "phn/errors.hpp"

namespace phn {

namespace {

double stable_sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
    }
}

}  // namespace

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::leaf(Parameter& p) {
    for (const auto& [ptr, id] : leaf_cache_) {
        if (ptr == &p) return id;
    }
    Node n;
    n.kind = OpKind::leaf;
    n.value = p.value;
    n.param = &p;
    NodeId id = push(std::move(n));
    leaf_cache_.emplace_back(&p, id);
    return id;
}

NodeId Graph::constant(Tensor t) {
    Node n;
    n.kind = OpKind::constant;
    n.value = std::move(t);
    return push(std::move(n));
}

const Tensor& Graph::grad(NodeId id) const {
    if (nodes_[id].grad.empty() && nodes_[id].value.size() > 0) {
        throw ContractError("grad: node " + std::to_string(id) + " has no gradient (run backward first)");
    }
    return nodes_[id].grad;
}

Tensor& Graph::grad_buffer(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) {
        n.grad = Tensor(n.value.shape());
    }
    return n.grad;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_rank(A, 2, "matmul");
    require_rank(B, 2, "matmul");
    if (A.dim(1) != B.dim(0)) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_to_string(A.shape()) + " vs " +
                         shape_to_string(B.shape()));
    }
    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A(i, p);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) {
                out(i, j) += av * B(p, j);
            }
        }
    }
    Node node;
    node.kind = OpKind::matmul;
    node.inputs = {a, b};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, a, b, m, k, n](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& A2 = g.value(a);
        const Tensor& B2 = g.value(b);
        Tensor& dA = g.grad_buffer(a);
        Tensor& dB = g.grad_buffer(b);
        // dA = dY * B^T, dB = A^T * dY
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double dv = dY(i, j);
                if (dv == 0.0) continue;
                for (std::size_t p = 0; p < k; ++p) {
                    dA(i, p) += dv * B2(p, j);
                    dB(p, j) += A2(i, p) * dv;
                }
            }
        }
    };
    return id;
}

NodeId Graph::matvec(NodeId x, NodeId v) {
    const Tensor& X = value(x);
    const Tensor& V = value(v);
    require_rank(X, 2, "matvec");
    require_rank(V, 1, "matvec");
    if (X.dim(1) != V.dim(0)) {
        throw ShapeError("matvec: " + shape_to_string(X.shape()) + " vs " + shape_to_string(V.shape()));
    }
    const std::size_t m = X.dim(0), n = X.dim(1);
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += X(i, j) * V[j];
        out[i] = acc;
    }
    Node node;
    node.kind = OpKind::matvec;
    node.inputs = {x, v};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, v, m, n](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& X2 = g.value(x);
        const Tensor& V2 = g.value(v);
        Tensor& dX = g.grad_buffer(x);
        Tensor& dV = g.grad_buffer(v);
        for (std::size_t i = 0; i < m; ++i) {
            const double dv = dY[i];
            if (dv == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) {
                dX(i, j) += dv * V2[j];
                dV[j] += dv * X2(i, j);
            }
        }
    };
    return id;
}

NodeId Graph::bmm(NodeId a, NodeId b, bool transpose_b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_rank(A, 3, "bmm");
    require_rank(B, 3, "bmm");
    const std::size_t batch = A.dim(0), m = A.dim(1), k = A.dim(2);
    const std::size_t n = transpose_b ? B.dim(1) : B.dim(2);
    const std::size_t bk = transpose_b ? B.dim(2) : B.dim(1);
    if (B.dim(0) != batch || bk != k) {
        throw ShapeError("bmm: " + shape_to_string(A.shape()) + " vs " + shape_to_string(B.shape()));
    }
    Tensor out({batch, m, n});
    for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) {
                    acc += A(s, i, p) * (transpose_b ? B(s, j, p) : B(s, p, j));
                }
                out(s, i, j) = acc;
            }
        }
    }
    Node node;
    node.kind = OpKind::bmm;
    node.inputs = {a, b};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, a, b, transpose_b, batch, m, n, k](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& A2 = g.value(a);
        const Tensor& B2 = g.value(b);
        Tensor& dA = g.grad_buffer(a);
        Tensor& dB = g.grad_buffer(b);
        for (std::size_t s = 0; s < batch; ++s) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const double dv = dY(s, i, j);
                    if (dv == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p) {
                        if (transpose_b) {
                            dA(s, i, p) += dv * B2(s, j, p);
                            dB(s, j, p) += dv * A2(s, i, p);
                        } else {
                            dA(s, i, p) += dv * B2(s, p, j);
                            dB(s, p, j) += dv * A2(s, i, p);
                        }
                    }
                }
            }
        }
    };
    return id;
}

NodeId Graph::bmm_shared_left(NodeId k, NodeId x) {
    const Tensor& K = value(k);
    const Tensor& X = value(x);
    require_rank(K, 2, "bmm_shared_left");
    require_rank(X, 3, "bmm_shared_left");
    const std::size_t F = K.dim(0);
    if (K.dim(1) != F || X.dim(1) != F) {
        throw ShapeError("bmm_shared_left: " + shape_to_string(K.shape()) + " vs " +
                         shape_to_string(X.shape()));
    }
    const std::size_t batch = X.dim(0), d = X.dim(2);
    Tensor out({batch, F, d});
    for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t i = 0; i < F; ++i) {
            for (std::size_t j = 0; j < F; ++j) {
                const double kv = K(i, j);
                if (kv == 0.0) continue;
                for (std::size_t c = 0; c < d; ++c) {
                    out(s, i, c) += kv * X(s, j, c);
                }
            }
        }
    }
    Node node;
    node.kind = OpKind::bmm_shared_left;
    node.inputs = {k, x};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, k, x, batch, F, d](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& K2 = g.value(k);
        const Tensor& X2 = g.value(x);
        Tensor& dK = g.grad_buffer(k);
        Tensor& dX = g.grad_buffer(x);
        for (std::size_t s = 0; s < batch; ++s) {
            for (std::size_t i = 0; i < F; ++i) {
                for (std::size_t j = 0; j < F; ++j) {
                    double acc = 0.0;
                    const double kv = K2(i, j);
                    for (std::size_t c = 0; c < d; ++c) {
                        const double dv = dY(s, i, c);
                        acc += dv * X2(s, j, c);
                        dX(s, j, c) += kv * dv;
                    }
                    dK(i, j) += acc;
                }
            }
        }
    };
    return id;
}

NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_same_shape(A, B, "add");
    Tensor out(A.shape());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[i];
    Node node;
    node.kind = OpKind::add;
    node.inputs = {a, b};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, a, b](Graph& g) {
        const Tensor& dY = g.grad(id);
        Tensor& dA = g.grad_buffer(a);
        Tensor& dB = g.grad_buffer(b);
        for (std::size_t i = 0; i < dY.size(); ++i) {
            dA[i] += dY[i];
            dB[i] += dY[i];
        }
    };
    return id;
}

NodeId Graph::add_bias(NodeId x, NodeId b) {
    const Tensor& X = value(x);
    const Tensor& B = value(b);
    require_rank(X, 2, "add_bias");
    require_rank(B, 1, "add_bias");
    if (X.dim(1) != B.dim(0)) {
        throw ShapeError("add_bias: " + shape_to_string(X.shape()) + " vs " + shape_to_string(B.shape()));
    }
    const std::size_t m = X.dim(0), n = X.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out(i, j) = X(i, j) + B[j];
    }
    Node node;
    node.kind = OpKind::add_bias;
    node.inputs = {x, b};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, b, m, n](Graph& g) {
        const Tensor& dY = g.grad(id);
        Tensor& dX = g.grad_buffer(x);
        Tensor& dB = g.grad_buffer(b);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                dX(i, j) += dY(i, j);
                dB[j] += dY(i, j);
            }
        }
    };
    return id;
}

NodeId Graph::add_scalar(NodeId x, NodeId b) {
    const Tensor& X = value(x);
    const Tensor& B = value(b);
    require_rank(X, 1, "add_scalar");
    if (B.size() != 1) {
        throw ShapeError("add_scalar: bias must be scalar, got " + shape_to_string(B.shape()));
    }
    Tensor out(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] + B[0];
    Node node;
    node.kind = OpKind::add_scalar;
    node.inputs = {x, b};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, b](Graph& g) {
        const Tensor& dY = g.grad(id);
        Tensor& dX = g.grad_buffer(x);
        Tensor& dB = g.grad_buffer(b);
        for (std::size_t i = 0; i < dY.size(); ++i) {
            dX[i] += dY[i];
            dB[0] += dY[i];
        }
    };
    return id;
}

NodeId Graph::hadamard(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_same_shape(A, B, "hadamard");
    Tensor out(A.shape());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[i];
    Node node;
    node.kind = OpKind::hadamard;
    node.inputs = {a, b};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, a, b](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& A2 = g.value(a);
        const Tensor& B2 = g.value(b);
        Tensor& dA = g.grad_buffer(a);
        Tensor& dB = g.grad_buffer(b);
        for (std::size_t i = 0; i < dY.size(); ++i) {
            dA[i] += dY[i] * B2[i];
            dB[i] += dY[i] * A2[i];
        }
    };
    return id;
}

NodeId Graph::row_scale(NodeId x, NodeId s) {
    const Tensor& X = value(x);
    const Tensor& S = value(s);
    require_rank(X, 2, "row_scale");
    require_rank(S, 1, "row_scale");
    if (X.dim(0) != S.dim(0)) {
        throw ShapeError("row_scale: " + shape_to_string(X.shape()) + " vs " + shape_to_string(S.shape()));
    }
    const std::size_t m = X.dim(0), n = X.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out(i, j) = X(i, j) * S[i];
    }
    Node node;
    node.kind = OpKind::row_scale;
    node.inputs = {x, s};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, s, m, n](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& X2 = g.value(x);
        const Tensor& S2 = g.value(s);
        Tensor& dX = g.grad_buffer(x);
        Tensor& dS = g.grad_buffer(s);
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                dX(i, j) += dY(i, j) * S2[i];
                acc += dY(i, j) * X2(i, j);
            }
            dS[i] += acc;
        }
    };
    return id;
}

NodeId Graph::scale_fields(NodeId x, NodeId g_in) {
    const Tensor& X = value(x);
    const Tensor& G = value(g_in);
    require_rank(X, 3, "scale_fields");
    require_rank(G, 2, "scale_fields");
    if (X.dim(1) != G.dim(0) || X.dim(2) != G.dim(1)) {
        throw ShapeError("scale_fields: " + shape_to_string(X.shape()) + " vs " +
                         shape_to_string(G.shape()));
    }
    const std::size_t batch = X.dim(0), F = X.dim(1), d = X.dim(2);
    Tensor out({batch, F, d});
    for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t f = 0; f < F; ++f) {
            for (std::size_t c = 0; c < d; ++c) out(s, f, c) = X(s, f, c) * G(f, c);
        }
    }
    Node node;
    node.kind = OpKind::scale_fields;
    node.inputs = {x, g_in};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, g_in, batch, F, d](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& X2 = g.value(x);
        const Tensor& G2 = g.value(g_in);
        Tensor& dX = g.grad_buffer(x);
        Tensor& dG = g.grad_buffer(g_in);
        for (std::size_t s = 0; s < batch; ++s) {
            for (std::size_t f = 0; f < F; ++f) {
                for (std::size_t c = 0; c < d; ++c) {
                    dX(s, f, c) += dY(s, f, c) * G2(f, c);
                    dG(f, c) += dY(s, f, c) * X2(s, f, c);
                }
            }
        }
    };
    return id;
}

NodeId Graph::scale_rows(NodeId x, NodeId u) {
    const Tensor& X = value(x);
    const Tensor& U = value(u);
    require_rank(X, 3, "scale_rows");
    require_rank(U, 1, "scale_rows");
    if (X.dim(1) != U.dim(0)) {
        throw ShapeError("scale_rows: " + shape_to_string(X.shape()) + " vs " + shape_to_string(U.shape()));
    }
    const std::size_t batch = X.dim(0), F = X.dim(1), d = X.dim(2);
    Tensor out({batch, F, d});
    for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t f = 0; f < F; ++f) {
            for (std::size_t c = 0; c < d; ++c) out(s, f, c) = X(s, f, c) * U[f];
        }
    }
    Node node;
    node.kind = OpKind::scale_rows;
    node.inputs = {x, u};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, u, batch, F, d](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& X2 = g.value(x);
        const Tensor& U2 = g.value(u);
        Tensor& dX = g.grad_buffer(x);
        Tensor& dU = g.grad_buffer(u);
        for (std::size_t s = 0; s < batch; ++s) {
            for (std::size_t f = 0; f < F; ++f) {
                for (std::size_t c = 0; c < d; ++c) {
                    dX(s, f, c) += dY(s, f, c) * U2[f];
                    dU[f] += dY(s, f, c) * X2(s, f, c);
                }
            }
        }
    };
    return id;
}

NodeId Graph::scale_cols(NodeId x, NodeId s_in) {
    const Tensor& X = value(x);
    const Tensor& S = value(s_in);
    require_rank(X, 2, "scale_cols");
    require_rank(S, 1, "scale_cols");
    if (X.dim(1) != S.dim(0)) {
        throw ShapeError("scale_cols: " + shape_to_string(X.shape()) + " vs " + shape_to_string(S.shape()));
    }
    const std::size_t m = X.dim(0), n = X.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out(i, j) = X(i, j) * S[j];
    }
    Node node;
    node.kind = OpKind::scale_cols;
    node.inputs = {x, s_in};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, s_in, m, n](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& X2 = g.value(x);
        const Tensor& S2 = g.value(s_in);
        Tensor& dX = g.grad_buffer(x);
        Tensor& dS = g.grad_buffer(s_in);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                dX(i, j) += dY(i, j) * S2[j];
                dS[j] += dY(i, j) * X2(i, j);
            }
        }
    };
    return id;
}

NodeId Graph::affine(NodeId x, double mul, double shift) {
    const Tensor& X = value(x);
    Tensor out(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = mul * X[i] + shift;
    Node node;
    node.kind = OpKind::affine;
    node.inputs = {x};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, mul](Graph& g) {
        const Tensor& dY = g.grad(id);
        Tensor& dX = g.grad_buffer(x);
        for (std::size_t i = 0; i < dY.size(); ++i) dX[i] += mul * dY[i];
    };
    return id;
}

NodeId Graph::sigmoid(NodeId x) {
    const Tensor& X = value(x);
    Tensor out(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = stable_sigmoid(X[i]);
    Node node;
    node.kind = OpKind::sigmoid;
    node.inputs = {x};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& Y = g.value(id);
        Tensor& dX = g.grad_buffer(x);
        for (std::size_t i = 0; i < dY.size(); ++i) {
            dX[i] += dY[i] * Y[i] * (1.0 - Y[i]);
        }
    };
    return id;
}

NodeId Graph::leaky_relu(NodeId x, double slope) {
    if (!(slope > 0.0 && slope < 1.0)) {
        throw ConfigError("leaky_relu: slope must be in (0,1), got " + std::to_string(slope));
    }
    const Tensor& X = value(x);
    Tensor out(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] > 0.0 ? X[i] : slope * X[i];
    Node node;
    node.kind = OpKind::leaky_relu;
    node.inputs = {x};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, slope](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& X2 = g.value(x);
        Tensor& dX = g.grad_buffer(x);
        // gradient at exactly 0 is defined as the slope
        for (std::size_t i = 0; i < dY.size(); ++i) {
            dX[i] += dY[i] * (X2[i] > 0.0 ? 1.0 : slope);
        }
    };
    return id;
}

NodeId Graph::softmax_rows(NodeId x) {
    const Tensor& X = value(x);
    if (X.rank() < 1 || X.rank() > 3) {
        throw ShapeError("softmax_rows: rank 1..3 required, got " + shape_to_string(X.shape()));
    }
    const std::size_t n = X.dim(X.rank() - 1);
    if (n < 1) {
        throw ShapeError("softmax_rows: empty last axis");
    }
    const std::size_t rows = X.size() / n;
    Tensor out(X.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = X.data().data() + r * n;
        double* dst = out.data().data() + r * n;
        double mx = src[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, src[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        for (std::size_t j = 0; j < n; ++j) dst[j] /= sum;
    }
    Node node;
    node.kind = OpKind::softmax;
    node.inputs = {x};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, rows, n](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& Y = g.value(id);
        Tensor& dX = g.grad_buffer(x);
        // per row: dx = y * (dy - <dy, y>)
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = Y.data().data() + r * n;
            const double* dy = dY.data().data() + r * n;
            double* dx = dX.data().data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    };
    return id;
}

NodeId Graph::batch_norm(NodeId x, NodeId gamma, NodeId beta, Parameter& running_mean,
                         Parameter& running_var, double eps, double momentum, bool train) {
    const Tensor& X = value(x);
    require_rank(X, 2, "batch_norm");
    const std::size_t m = X.dim(0), d = X.dim(1);
    const Tensor& G = value(gamma);
    const Tensor& B = value(beta);
    if (G.shape() != Shape{d} || B.shape() != Shape{d} || running_mean.value.shape() != Shape{d} ||
        running_var.value.shape() != Shape{d}) {
        throw ShapeError("batch_norm: affine/stat shapes do not match feature width " + std::to_string(d));
    }
    if (train && m < 2) {
        throw ContractError("batch_norm: train mode needs batch >= 2, got " + std::to_string(m));
    }

    Tensor xhat({m, d});
    Tensor inv_std({d});
    if (train) {
        for (std::size_t j = 0; j < d; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < m; ++i) mean += X(i, j);
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                const double c = X(i, j) - mean;
                var += c * c;
            }
            var /= static_cast<double>(m);  // population variance
            const double inv = 1.0 / std::sqrt(var + eps);
            inv_std[j] = inv;
            for (std::size_t i = 0; i < m; ++i) xhat(i, j) = (X(i, j) - mean) * inv;
            running_mean.value[j] = (1.0 - momentum) * running_mean.value[j] + momentum * mean;
            running_var.value[j] = (1.0 - momentum) * running_var.value[j] + momentum * var;
        }
    } else {
        for (std::size_t j = 0; j < d; ++j) {
            const double inv = 1.0 / std::sqrt(running_var.value[j] + eps);
            inv_std[j] = inv;
            const double mean = running_mean.value[j];
            for (std::size_t i = 0; i < m; ++i) xhat(i, j) = (X(i, j) - mean) * inv;
        }
    }
    Tensor out({m, d});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < d; ++j) out(i, j) = G[j] * xhat(i, j) + B[j];
    }

    Node node;
    node.kind = OpKind::batch_norm;
    node.inputs = {x, gamma, beta};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, gamma, beta, m, d, train, xhat = std::move(xhat),
                           inv_std = std::move(inv_std)](Graph& g) {
        const Tensor& dY = g.grad(id);
        const Tensor& G2 = g.value(gamma);
        Tensor& dX = g.grad_buffer(x);
        Tensor& dG = g.grad_buffer(gamma);
        Tensor& dB = g.grad_buffer(beta);
        const double mf = static_cast<double>(m);
        for (std::size_t j = 0; j < d; ++j) {
            double sum_dy = 0.0;
            double sum_dy_xhat = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                sum_dy += dY(i, j);
                sum_dy_xhat += dY(i, j) * xhat(i, j);
            }
            dG[j] += sum_dy_xhat;
            dB[j] += sum_dy;
            if (train) {
                // full gradient including the batch mean/variance terms
                const double scale = G2[j] * inv_std[j];
                for (std::size_t i = 0; i < m; ++i) {
                    dX(i, j) += scale * (dY(i, j) - sum_dy / mf - xhat(i, j) * sum_dy_xhat / mf);
                }
            } else {
                const double scale = G2[j] * inv_std[j];
                for (std::size_t i = 0; i < m; ++i) dX(i, j) += scale * dY(i, j);
            }
        }
    };
    return id;
}

NodeId Graph::embed_lookup(const std::vector<NodeId>& tables, std::span<const std::uint32_t> indices,
                           std::size_t rows, std::size_t fields) {
    if (tables.size() != fields) {
        throw ContractError("embed_lookup: " + std::to_string(tables.size()) + " tables for " +
                            std::to_string(fields) + " fields");
    }
    if (indices.size() != rows * fields) {
        throw ContractError("embed_lookup: index matrix size mismatch");
    }
    if (fields == 0 || rows == 0) {
        throw ContractError("embed_lookup: empty batch");
    }
    const std::size_t d = value(tables[0]).dim(1);
    for (NodeId t : tables) {
        const Tensor& T = value(t);
        require_rank(T, 2, "embed_lookup");
        if (T.dim(1) != d) {
            throw ShapeError("embed_lookup: embedding widths differ across fields");
        }
    }
    Tensor out({rows, fields, d});
    for (std::size_t s = 0; s < rows; ++s) {
        for (std::size_t f = 0; f < fields; ++f) {
            const Tensor& T = value(tables[f]);
            const std::uint32_t idx = indices[s * fields + f];
            if (idx >= T.dim(0)) {
                throw ContractError("embed_lookup: index " + std::to_string(idx) + " out of range for field " +
                                    std::to_string(f) + " (vocab " + std::to_string(T.dim(0)) + ")");
            }
            for (std::size_t c = 0; c < d; ++c) out(s, f, c) = T(idx, c);
        }
    }
    Node node;
    node.kind = OpKind::embed_lookup;
    node.inputs = tables;
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    std::vector<std::uint32_t> idx_copy(indices.begin(), indices.end());
    nodes_[id].backward = [id, tables, idx_copy = std::move(idx_copy), rows, fields, d](Graph& g) {
        const Tensor& dY = g.grad(id);
        for (std::size_t s = 0; s < rows; ++s) {
            for (std::size_t f = 0; f < fields; ++f) {
                Tensor& dT = g.grad_buffer(tables[f]);
                const std::uint32_t idx = idx_copy[s * fields + f];
                for (std::size_t c = 0; c < d; ++c) dT(idx, c) += dY(s, f, c);
            }
        }
    };
    return id;
}

NodeId Graph::reshape(NodeId x, Shape target) {
    const Tensor& X = value(x);
    if (shape_size(target) != X.size()) {
        throw ShapeError("reshape: cannot view " + shape_to_string(X.shape()) + " as " +
                         shape_to_string(target));
    }
    Tensor out(target, std::vector<double>(X.data().begin(), X.data().end()));
    Node node;
    node.kind = OpKind::reshape;
    node.inputs = {x};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x](Graph& g) {
        const Tensor& dY = g.grad(id);
        Tensor& dX = g.grad_buffer(x);
        for (std::size_t i = 0; i < dY.size(); ++i) dX[i] += dY[i];
    };
    return id;
}

NodeId Graph::slice_last(NodeId x, std::size_t from, std::size_t to) {
    const Tensor& X = value(x);
    if (X.rank() < 2 || X.rank() > 3) {
        throw ShapeError("slice_last: rank 2..3 required");
    }
    const std::size_t last = X.dim(X.rank() - 1);
    if (from >= to || to > last) {
        throw ShapeError("slice_last: range [" + std::to_string(from) + "," + std::to_string(to) +
                         ") out of " + std::to_string(last));
    }
    const std::size_t width = to - from;
    const std::size_t rows = X.size() / last;
    Shape out_shape = X.shape();
    out_shape.back() = width;
    Tensor out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < width; ++j) {
            out[r * width + j] = X[r * last + from + j];
        }
    }
    Node node;
    node.kind = OpKind::slice_last;
    node.inputs = {x};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, from, width, last, rows](Graph& g) {
        const Tensor& dY = g.grad(id);
        Tensor& dX = g.grad_buffer(x);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < width; ++j) {
                dX[r * last + from + j] += dY[r * width + j];
            }
        }
    };
    return id;
}

NodeId Graph::concat_last(const std::vector<NodeId>& parts) {
    if (parts.empty()) {
        throw ContractError("concat_last: no inputs");
    }
    const Tensor& first = value(parts[0]);
    if (first.rank() < 2 || first.rank() > 3) {
        throw ShapeError("concat_last: rank 2..3 required");
    }
    Shape lead(first.shape().begin(), first.shape().end() - 1);
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (NodeId p : parts) {
        const Tensor& T = value(p);
        Shape l(T.shape().begin(), T.shape().end() - 1);
        if (l != lead) {
            throw ShapeError("concat_last: leading dimensions differ, " + shape_to_string(first.shape()) +
                             " vs " + shape_to_string(T.shape()));
        }
        widths.push_back(T.dim(T.rank() - 1));
        total += widths.back();
    }
    const std::size_t rows = shape_size(lead);
    Shape out_shape = lead;
    out_shape.push_back(total);
    Tensor out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            const Tensor& T = value(parts[p]);
            for (std::size_t j = 0; j < widths[p]; ++j) {
                out[r * total + off + j] = T[r * widths[p] + j];
            }
            off += widths[p];
        }
    }
    Node node;
    node.kind = OpKind::concat_last;
    node.inputs = parts;
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, parts, widths, total, rows](Graph& g) {
        const Tensor& dY = g.grad(id);
        std::size_t off = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            Tensor& dX = g.grad_buffer(parts[p]);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < widths[p]; ++j) {
                    dX[r * widths[p] + j] += dY[r * total + off + j];
                }
            }
            off += widths[p];
        }
    };
    return id;
}

NodeId Graph::sum_last(NodeId x) {
    const Tensor& X = value(x);
    require_rank(X, 2, "sum_last");
    const std::size_t m = X.dim(0), n = X.dim(1);
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += X(i, j);
        out[i] = acc;
    }
    Node node;
    node.kind = OpKind::sum_last;
    node.inputs = {x};
    node.value = std::move(out);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, m, n](Graph& g) {
        const Tensor& dY = g.grad(id);
        Tensor& dX = g.grad_buffer(x);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) dX(i, j) += dY[i];
        }
    };
    return id;
}

NodeId Graph::sum_all(NodeId x) {
    const Tensor& X = value(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) acc += X[i];
    Node node;
    node.kind = OpKind::sum_all;
    node.inputs = {x};
    node.value = Tensor::scalar(acc);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x](Graph& g) {
        const double dv = g.grad(id)[0];
        Tensor& dX = g.grad_buffer(x);
        for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += dv;
    };
    return id;
}

NodeId Graph::mean_all(NodeId x) {
    const Tensor& X = value(x);
    if (X.size() == 0) {
        throw ContractError("mean_all: empty tensor");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) acc += X[i];
    const double n = static_cast<double>(X.size());
    Node node;
    node.kind = OpKind::mean_all;
    node.inputs = {x};
    node.value = Tensor::scalar(acc / n);
    NodeId id = push(std::move(node));
    nodes_[id].backward = [id, x, n](Graph& g) {
        const double dv = g.grad(id)[0] / n;
        Tensor& dX = g.grad_buffer(x);
        for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += dv;
    };
    return id;
}

NodeId Graph::logloss(NodeId prob, std::span<const double> labels) {
    const Tensor& P = value(prob);
    require_rank(P, 1, "logloss");
    if (P.size() != labels.size()) {
        throw ContractError("logloss: " + std::to_string(P.size()) + " probabilities vs " +
                            std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = P.size();
    const double lo = kProbClamp, hi = 1.0 - kProbClamp;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = std::clamp(P[i], lo, hi);
        acc -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
    }
    Node node;
    node.kind = OpKind::logloss;
    node.inputs = {prob};
    node.value = Tensor::scalar(acc / static_cast<double>(n));
    NodeId id = push(std::move(node));
    std::vector<double> labels_copy(labels.begin(), labels.end());
    nodes_[id].backward = [id, prob, labels_copy = std::move(labels_copy), n, lo, hi](Graph& g) {
        const double dv = g.grad(id)[0] / static_cast<double>(n);
        const Tensor& P2 = g.value(prob);
        Tensor& dP = g.grad_buffer(prob);
        for (std::size_t i = 0; i < n; ++i) {
            // clamped coordinates have zero gradient
            if (P2[i] < lo || P2[i] > hi) continue;
            const double p = P2[i];
            dP[i] += dv * (p - labels_copy[i]) / (p * (1.0 - p));
        }
    };
    return id;
}

void Graph::backward(NodeId loss) {
    if (value(loss).size() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_to_string(value(loss).shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor();
    grad_buffer(loss)[0] = 1.0;
    for (std::size_t i = loss + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty()) continue;  // not on a path to the loss
        if (n.backward) n.backward(*this);
    }
    for (auto& [param, id] : leaf_cache_) {
        const Tensor& g = nodes_[id].grad;
        if (g.empty()) continue;
        for (std::size_t i = 0; i < g.size(); ++i) param->grad[i] += g[i];
    }
}

}  // namespace phn
