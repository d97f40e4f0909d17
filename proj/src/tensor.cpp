#include "clamp/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace clamp {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape)) {
        throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    }
}

int Tensor::dim(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) throw std::out_of_range("tensor axis out of range");
    return shape[static_cast<std::size_t>(axis)];
}

Tensor Tensor::reshaped(Shape s) const {
    if (shape_numel(s) != numel()) {
        throw std::invalid_argument("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
    }
    return Tensor(std::move(s), data);
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace clamp
