#include "ldpet/io/png.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

#include "ldpet/io/tensor_file.hpp"

namespace ldpet::io {

Window Window::of(const ImageGrid& g) { return {g.min(), g.max()}; }

Window Window::symmetric(const ImageGrid& g) {
    double m = 0.0;
    for (float v : g.values()) m = std::max(m, std::abs(double(v)));
    return {-m, m};
}

std::vector<std::uint8_t> to_gray8(const ImageGrid& g, const Window& w) {
    if (!(w.hi > w.lo) || !std::isfinite(w.lo) || !std::isfinite(w.hi))
        throw PngError("png: degenerate window [" + std::to_string(w.lo) + ", " + std::to_string(w.hi) + "]");
    std::vector<std::uint8_t> out(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double t = std::clamp((double(g[i]) - w.lo) / (w.hi - w.lo), 0.0, 1.0);
        out[i] = static_cast<std::uint8_t>(std::lround(255.0 * t));
    }
    return out;
}

namespace {

struct MemBuf {
    std::vector<std::uint8_t> bytes;
};

void write_cb(png_structp p, png_bytep data, png_size_t n) {
    auto* m = static_cast<MemBuf*>(png_get_io_ptr(p));
    m->bytes.insert(m->bytes.end(), data, data + n);
}

void flush_cb(png_structp) {}

}  // namespace

void export_png(const ImageGrid& g, const Window& w, const std::filesystem::path& path) {
    if (g.size() == 0) throw PngError("png: empty image");
    auto pixels = to_gray8(g, w);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw PngError("png: cannot create writer");
    png_infop info = png_create_info_struct(png);
    MemBuf buf;
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw PngError("png: encoding failed");
    }
    png_set_write_fn(png, &buf, write_cb, flush_cb);
    png_set_IHDR(png, info, static_cast<png_uint_32>(g.width()), static_cast<png_uint_32>(g.height()), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t r = 0; r < g.height(); ++r) png_write_row(png, pixels.data() + r * g.width());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    try {
        write_file_atomic(path, buf.bytes.data(), buf.bytes.size());
    } catch (const TensorFileError& e) {
        throw PngError(std::string("png: ") + e.what());
    }
}

ImageGrid mip(const std::vector<ImageGrid>& stack) {
    if (stack.empty()) throw PngError("mip: empty stack");
    ImageGrid out = stack.front();
    for (const auto& s : stack) {
        if (!s.same_shape(out)) throw PngError("mip: slices differ in shape");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], s[i]);
    }
    return out;
}

Gray8 read_png_gray8(const std::filesystem::path& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!f) throw PngError("png: cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw PngError("png: cannot create reader");
    }
    Gray8 out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw PngError("png: decoding failed for " + path.string());
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw PngError("png: not 8-bit grayscale");
    }
    out.width = png_get_image_width(png, info);
    out.height = png_get_image_height(png, info);
    out.pixels.resize(out.width * out.height);
    for (std::size_t r = 0; r < out.height; ++r) png_read_row(png, out.pixels.data() + r * out.width, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

ImageGrid residual(const ImageGrid& x, const ImageGrid& y) {
    if (!x.same_shape(y)) throw PngError("residual: shape mismatch");
    ImageGrid out(x.height(), x.width(), x.pixel_mm());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
    return out;
}

}  // namespace ldpet::io
