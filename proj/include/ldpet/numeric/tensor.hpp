#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ldpet::numeric {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 4;

class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public NumericError {
   public:
    using NumericError::NumericError;
};

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major tensor. Images are laid out channels-major (C x H x W).
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<T> data);
    Tensor(Shape shape, T fill);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<const T> data() const noexcept { return data_; }
    std::span<T> mutable_data() noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    T operator[](std::size_t i) const { return data_[i]; }
    T& operator[](std::size_t i) { return data_[i]; }

    /// Same data, new shape; element counts must agree.
    Tensor reshaped(Shape shape) const;

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const noexcept;

   private:
    Shape shape_;
    std::vector<T> data_;
};

void check_shape(const Shape& shape);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ldpet::numeric
