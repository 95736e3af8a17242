#include "eib/numerics/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace eib {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, Real fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
        fail(ErrorKind::InvalidShape, "shape " + shape_string(shape_) + " does not match " +
                                          std::to_string(data_.size()) + " values");
    }
}

Real Tensor::item() const {
    if (data_.size() != 1) fail(ErrorKind::InvalidShape, "item() on tensor of shape " + shape_string(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
        fail(ErrorKind::InvalidShape, "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
    for (Real v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

IntTensor::IntTensor(Shape shape) : shape_(std::move(shape)), data_(numel(shape_), 0) {}

IntTensor::IntTensor(Shape shape, std::vector<std::int8_t> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
        fail(ErrorKind::InvalidShape, "int tensor shape " + shape_string(shape_) + " does not match data");
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::InvalidShape,
             std::string(where) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
}

}  // namespace eib
