#include "ldpet/numeric/tensor.hpp"

#include <cmath>
#include <sstream>

namespace ldpet::numeric {

std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > kMaxRank)
        throw ShapeError("tensor rank must be 1.." + std::to_string(kMaxRank) + ", got " + to_string(shape));
    for (auto d : shape)
        if (d == 0) throw ShapeError("tensor dims must be positive, got " + to_string(shape));
}

template <typename T>
Tensor<T>::Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(element_count(shape_), T{0});
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != element_count(shape_))
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " + to_string(shape_));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(element_count(shape_), fill);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    check_shape(shape);
    if (element_count(shape) != data_.size())
        throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    return Tensor(std::move(shape), data_);
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
    for (T v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace ldpet::numeric
