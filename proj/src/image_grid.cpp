#include "ldpet/image_grid.hpp"

#include <algorithm>
#include <string>

namespace ldpet {

ImageGrid::ImageGrid(std::size_t height, std::size_t width, double pixel_mm, float fill)
    : height_(height), width_(width), pixel_mm_(pixel_mm), values_(height * width, fill) {
    if (height == 0 || width == 0) throw std::invalid_argument("ImageGrid: dimensions must be positive");
    if (!(pixel_mm > 0)) throw std::invalid_argument("ImageGrid: pixel size must be positive");
}

ImageGrid::ImageGrid(std::size_t height, std::size_t width, double pixel_mm, std::vector<float> values)
    : height_(height), width_(width), pixel_mm_(pixel_mm), values_(std::move(values)) {
    if (height == 0 || width == 0) throw std::invalid_argument("ImageGrid: dimensions must be positive");
    if (!(pixel_mm > 0)) throw std::invalid_argument("ImageGrid: pixel size must be positive");
    if (values_.size() != height * width)
        throw std::invalid_argument("ImageGrid: expected " + std::to_string(height * width) + " values, got " +
                                    std::to_string(values_.size()));
}

float ImageGrid::max() const { return *std::max_element(values_.begin(), values_.end()); }
float ImageGrid::min() const { return *std::min_element(values_.begin(), values_.end()); }

numeric::Tensor<float> ImageGrid::to_tensor() const {
    return numeric::Tensor<float>({1, height_, width_}, values_);
}

ImageGrid ImageGrid::from_tensor(const numeric::Tensor<float>& t, double pixel_mm) {
    if (t.rank() == 3 && t.dim(0) == 1) return ImageGrid(t.dim(1), t.dim(2), pixel_mm, t.vec());
    if (t.rank() == 2) return ImageGrid(t.dim(0), t.dim(1), pixel_mm, t.vec());
    throw numeric::ShapeError("ImageGrid::from_tensor: expected 1xHxW or HxW, got " + numeric::to_string(t.shape()));
}

}  // namespace ldpet
