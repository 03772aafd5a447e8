#include "phn/optim.hpp"

#include <cmath>

#include "phn/errors.hpp"

namespace phn {

Parameter& ParameterStore::add(std::string name, Tensor init, bool trainable) {
    Parameter p;
    p.name = std::move(name);
    p.grad = Tensor::zeros(init.shape());
    p.value = std::move(init);
    p.trainable = trainable;
    params_.push_back(std::move(p));
    return params_.back();
}

void ParameterStore::zero_grads() {
    for (auto& p : params_) p.grad.fill(0.0);
}

std::size_t ParameterStore::total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

std::size_t ParameterStore::trainable_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        if (p.trainable) n += p.value.size();
    }
    return n;
}

std::vector<Tensor> ParameterStore::snapshot_values() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.value);
    return out;
}

void ParameterStore::restore_values(const std::vector<Tensor>& values) {
    if (values.size() != params_.size()) {
        throw ContractError("restore_values: snapshot has " + std::to_string(values.size()) +
                            " tensors, store has " + std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        require_same_shape(params_[i].value, values[i], "restore_values");
        params_[i].value = values[i];
    }
}

OptimizerKind optimizer_kind_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

std::string to_string(OptimizerKind k) {
    return k == OptimizerKind::sgd ? "sgd" : "adam";
}

void Optimizer::step(ParameterStore& params) {
    if (config_.kind == OptimizerKind::adam && m_.empty()) {
        for (auto& p : params) {
            m_.push_back(Tensor::zeros(p.value.shape()));
            v_.push_back(Tensor::zeros(p.value.shape()));
        }
    }
    if (config_.kind == OptimizerKind::adam && m_.size() != params.count()) {
        throw ContractError("optimizer: state has " + std::to_string(m_.size()) +
                            " slots, store has " + std::to_string(params.count()));
    }
    ++step_;

    const double lr = config_.learning_rate;
    for (std::size_t i = 0; i < params.count(); ++i) {
        Parameter& p = params.at(i);
        if (!p.trainable) continue;
        if (!p.grad.same_shape(p.value)) {
            throw ContractError("optimizer: missing or misshaped grad for parameter '" + p.name + "'");
        }
        const double wd = config_.weight_decay;
        if (config_.kind == OptimizerKind::sgd) {
            for (std::size_t j = 0; j < p.value.size(); ++j) {
                p.value[j] -= lr * (p.grad[j] + wd * p.value[j]);
            }
        } else {
            const double b1 = config_.beta1;
            const double b2 = config_.beta2;
            const double bias1 = 1.0 - std::pow(b1, static_cast<double>(step_));
            const double bias2 = 1.0 - std::pow(b2, static_cast<double>(step_));
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (std::size_t j = 0; j < p.value.size(); ++j) {
                const double g = p.grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                const double m_hat = m[j] / bias1;
                const double v_hat = v[j] / bias2;
                p.value[j] -= lr * (m_hat / (std::sqrt(v_hat) + config_.epsilon) + wd * p.value[j]);
            }
        }
    }
}

}  // namespace phn
