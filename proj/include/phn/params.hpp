#pragma once

#include <cstddef>
#include <deque>
#include <string>
#include <vector>

#include "phn/tensor.hpp"

namespace phn {

// A named tensor with a gradient slot. Non-trainable entries (batch-norm
// running stats) still live here so snapshots and checkpoints cover them,
// but the optimizer skips them.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
};

// Owns all parameters of a model in registration order. Uses a deque so
// Parameter addresses stay stable; the graph memoizes leaves by address.
class ParameterStore {
public:
    Parameter& add(std::string name, Tensor init, bool trainable = true);

    std::size_t count() const { return params_.size(); }
    Parameter& at(std::size_t i) { return params_[i]; }
    const Parameter& at(std::size_t i) const { return params_[i]; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grads();
    std::size_t total_size() const;
    std::size_t trainable_size() const;

    // Deep copy of all values (used for best-epoch snapshots).
    std::vector<Tensor> snapshot_values() const;
    void restore_values(const std::vector<Tensor>& values);

private:
    std::deque<Parameter> params_;
};

}  // namespace phn
