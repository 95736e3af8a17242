#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eib/error.hpp"

namespace eib {

// Storage type for every real-valued tensor. Arithmetic is carried out in
// double; in 32-bit mode op outputs are rounded to float (see precision.hpp).
using Real = double;

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major real tensor.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, Real fill = 0);
    Tensor(Shape shape, std::vector<Real> data);

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }
    static Tensor scalar(Real v) { return Tensor({1}, std::vector<Real>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t rank() const noexcept { return shape_.size(); }

    // Leading dimension; cols() is the product of the remaining ones.
    std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const noexcept { return rows() == 0 ? 0 : data_.size() / rows(); }

    std::span<Real> data() noexcept { return data_; }
    std::span<const Real> data() const noexcept { return data_; }
    std::vector<Real>& vec() noexcept { return data_; }
    const std::vector<Real>& vec() const noexcept { return data_; }

    Real& operator[](std::size_t i) noexcept { return data_[i]; }
    Real operator[](std::size_t i) const noexcept { return data_[i]; }
    Real& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    Real at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<Real> row(std::size_t r) noexcept { return std::span<Real>(data_).subspan(r * cols(), cols()); }
    std::span<const Real> row(std::size_t r) const noexcept {
        return std::span<const Real>(data_).subspan(r * cols(), cols());
    }

    Real item() const;

    // Same data, new shape with equal element count.
    Tensor reshaped(Shape shape) const;

    void fill(Real v);
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

  private:
    Shape shape_;
    std::vector<Real> data_;
};

// Signed 8-bit tensor; codes stay inside [-127, 127].
class IntTensor {
  public:
    IntTensor() = default;
    explicit IntTensor(Shape shape);
    IntTensor(Shape shape, std::vector<std::int8_t> data);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const noexcept { return rows() == 0 ? 0 : data_.size() / rows(); }

    std::span<std::int8_t> data() noexcept { return data_; }
    std::span<const std::int8_t> data() const noexcept { return data_; }
    std::int8_t& operator[](std::size_t i) noexcept { return data_[i]; }
    std::int8_t operator[](std::size_t i) const noexcept { return data_[i]; }

    friend bool operator==(const IntTensor& a, const IntTensor& b) = default;

  private:
    Shape shape_;
    std::vector<std::int8_t> data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* where);

}  // namespace eib
