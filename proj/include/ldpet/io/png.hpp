#pragma once

#include <filesystem>
#include <stdexcept>
#include <vector>

#include "ldpet/image_grid.hpp"

namespace ldpet::io {

class PngError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct Window {
    double lo = 0.0;
    double hi = 1.0;

    static Window of(const ImageGrid& g);          // [min, max]
    static Window symmetric(const ImageGrid& g);   // [-max|g|, max|g|], for residual panels
};

/// Linear windowing to 0..255 with clamping.
std::vector<std::uint8_t> to_gray8(const ImageGrid& g, const Window& w);

/// 8-bit grayscale PNG, written atomically.
void export_png(const ImageGrid& g, const Window& w, const std::filesystem::path& path);

/// Per-pixel maximum over a stack of same-shape slices.
ImageGrid mip(const std::vector<ImageGrid>& stack);

struct Gray8 {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> pixels;
};

Gray8 read_png_gray8(const std::filesystem::path& path);

/// x - y, same shape.
ImageGrid residual(const ImageGrid& x, const ImageGrid& y);

}  // namespace ldpet::io
