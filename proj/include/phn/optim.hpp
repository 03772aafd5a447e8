#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "phn/params.hpp"

namespace phn {

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;  // decoupled: p -= lr * weight_decay * p each step
};

OptimizerKind optimizer_kind_from_string(const std::string& s);
std::string to_string(OptimizerKind k);

// SGD / Adam over a ParameterStore. Moment buffers are lazily sized against
// the store on the first step and must match it afterwards.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig config) : config_(config) {}

    const OptimizerConfig& config() const { return config_; }
    std::int64_t step_count() const { return step_; }

    // Applies one update from the grads currently in the store.
    void step(ParameterStore& params);

private:
    OptimizerConfig config_;
    std::int64_t step_ = 0;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
};

}  // namespace phn
