#include "triqdef/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "triqdef/error.hpp"

namespace triqdef {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != data.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape_) + " needs " +
                         std::to_string(shape_numel(shape_)) + " values, got " +
                         std::to_string(data.size()));
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

std::span<const double> Tensor::values() const {
    if (!data_) return {};
    return {data_->data(), data_->size()};
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a single value");
    return (*data_)[0];
}

bool Tensor::all_finite() const {
    for (double v : values()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
        throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
}

bool Tensor::identical(const Tensor& other) const {
    if (shape_ != other.shape_ || size() != other.size()) return false;
    if (size() == 0) return true;
    return std::memcmp(data(), other.data(), size() * sizeof(double)) == 0;
}

} // namespace triqdef
