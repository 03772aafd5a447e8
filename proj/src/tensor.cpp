#include "phn/tensor.hpp"

#include <cmath>
#include <sstream>

#include "phn/errors.hpp"

namespace phn {

std::string shape_to_string(const Shape& s) {
    std::ostringstream out;
    out << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out << "x";
        out << s[i];
    }
    out << ")";
    return out.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), values_(shape_size(shape_), 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_size(shape_)) {
        throw ShapeError("tensor: " + std::to_string(values_.size()) + " values do not fill shape " +
                         shape_to_string(shape_));
    }
}

Tensor Tensor::vec(std::vector<double> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
}

void Tensor::fill(double v) {
    for (double& x : values_) x = v;
}

bool Tensor::all_finite() const {
    for (double x : values_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    }
}

}  // namespace phn
