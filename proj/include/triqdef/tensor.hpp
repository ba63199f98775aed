#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace triqdef {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Immutable dense row-major tensor of doubles.
///
/// Copies share the underlying buffer, so a Tensor can be passed around by
/// value and read concurrently from several threads. A default-constructed
/// tensor is "undefined" (no shape, no data).
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_ ? data_->size() : 0; }

    std::span<const double> values() const;
    const double* data() const { return data_->data(); }
    double operator[](std::size_t i) const { return (*data_)[i]; }
    /// Value of a single-element tensor.
    double item() const;

    bool all_finite() const;
    /// Same data, new shape with equal element count.
    Tensor reshaped(Shape shape) const;
    std::vector<double> to_vector() const { return data_ ? *data_ : std::vector<double>{}; }

    /// Bit-exact equality of shape and contents.
    bool identical(const Tensor& other) const;

private:
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
};

} // namespace triqdef
