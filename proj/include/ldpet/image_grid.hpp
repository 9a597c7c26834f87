#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "ldpet/numeric/tensor.hpp"

namespace ldpet {

/// 2D activity image with a physical pixel size. Row-major, row 0 at the top.
class ImageGrid {
   public:
    ImageGrid() = default;
    ImageGrid(std::size_t height, std::size_t width, double pixel_mm, float fill = 0.0f);
    ImageGrid(std::size_t height, std::size_t width, double pixel_mm, std::vector<float> values);

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return values_.size(); }
    double pixel_mm() const noexcept { return pixel_mm_; }

    float at(std::size_t row, std::size_t col) const { return values_[row * width_ + col]; }
    float& at(std::size_t row, std::size_t col) { return values_[row * width_ + col]; }
    float operator[](std::size_t i) const { return values_[i]; }
    float& operator[](std::size_t i) { return values_[i]; }

    std::span<const float> values() const noexcept { return values_; }
    std::span<float> values() noexcept { return values_; }

    /// Physical coordinates (mm) of a pixel center, origin at the grid center.
    double x_mm(std::size_t col) const { return (static_cast<double>(col) + 0.5 - width_ / 2.0) * pixel_mm_; }
    double y_mm(std::size_t row) const { return (static_cast<double>(row) + 0.5 - height_ / 2.0) * pixel_mm_; }

    bool same_shape(const ImageGrid& o) const noexcept { return height_ == o.height_ && width_ == o.width_; }
    float max() const;
    float min() const;

    /// 1 x H x W view for the network stages.
    numeric::Tensor<float> to_tensor() const;
    static ImageGrid from_tensor(const numeric::Tensor<float>& t, double pixel_mm);

   private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    double pixel_mm_ = 1.0;
    std::vector<float> values_;
};

}  // namespace ldpet
