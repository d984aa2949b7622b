#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace dg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

/// Dense row-major f32 array. `data().size() == numel()` always holds.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<float> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<float> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const noexcept { return data_.size(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    float* ptr() noexcept { return data_.data(); }
    const float* ptr() const noexcept { return data_.data(); }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    /// Row `r` of a 2-D tensor.
    std::span<float> row(std::size_t r);
    std::span<const float> row(std::size_t r) const;

    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

  private:
    Shape shape_;
    std::vector<float> data_;
};

/// Bitwise equality (distinguishes -0.0 from 0.0, compares NaN payloads).
bool bit_equal(const Tensor& a, const Tensor& b);

double frobenius_norm(std::span<const float> x);
float max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace dg
