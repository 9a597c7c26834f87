#include "ldpet/io/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include <unistd.h>

namespace ldpet::io {

const char* errc_name(TensorFileErrc e) {
    switch (e) {
        case TensorFileErrc::io: return "io";
        case TensorFileErrc::bad_magic: return "bad magic";
        case TensorFileErrc::bad_version: return "bad version";
        case TensorFileErrc::bad_dtype: return "bad dtype";
        case TensorFileErrc::truncated: return "truncated";
        case TensorFileErrc::trailing_bytes: return "trailing bytes";
        case TensorFileErrc::dim_overflow: return "dim overflow";
        case TensorFileErrc::empty_dim: return "empty dim";
    }
    return "unknown";
}

TensorFileError::TensorFileError(TensorFileErrc code, const std::string& what)
    : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

namespace {

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get(const std::vector<std::uint8_t>& in, std::size_t& pos) {
    if (in.size() - pos < sizeof(U)) throw TensorFileError(TensorFileErrc::truncated, "header ends early");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in[pos + i]) << (8 * i));
    pos += sizeof(U);
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const numeric::Tensor<float>& t) { return encode_tensor(t.shape(), t.data()); }

std::vector<std::uint8_t> encode_tensor(const numeric::Shape& shape, std::span<const float> values) {
    if (shape.size() > 255) throw TensorFileError(TensorFileErrc::dim_overflow, "rank above 255");
    for (std::size_t d : shape) {
        if (d == 0) throw TensorFileError(TensorFileErrc::empty_dim, "zero-length dimension");
        if (d > std::numeric_limits<std::uint32_t>::max())
            throw TensorFileError(TensorFileErrc::dim_overflow, "dimension exceeds u32");
    }
    std::size_t count = 1;
    for (std::size_t d : shape) count *= d;
    if (count != values.size()) throw TensorFileError(TensorFileErrc::dim_overflow, "payload length differs from dims");
    std::vector<std::uint8_t> out(kTensorMagic, kTensorMagic + 4);
    put<std::uint16_t>(out, kTensorVersion);
    out.push_back(kDtypeF32);
    out.push_back(static_cast<std::uint8_t>(shape.size()));
    for (std::size_t d : shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.reserve(out.size() + 4 * values.size());
    for (float v : values) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

numeric::Tensor<float> decode_tensor(const std::vector<std::uint8_t>& in) {
    if (in.size() < 4 || std::memcmp(in.data(), kTensorMagic, 4) != 0)
        throw TensorFileError(TensorFileErrc::bad_magic, "not a DTMT file");
    std::size_t pos = 4;
    const auto version = get<std::uint16_t>(in, pos);
    if (version != kTensorVersion) throw TensorFileError(TensorFileErrc::bad_version, std::to_string(version));
    const auto dtype = get<std::uint8_t>(in, pos);
    if (dtype != kDtypeF32) throw TensorFileError(TensorFileErrc::bad_dtype, std::to_string(dtype));
    const auto rank = get<std::uint8_t>(in, pos);
    numeric::Shape shape;
    std::size_t count = 1;
    for (std::size_t k = 0; k < rank; ++k) {
        const auto d = get<std::uint32_t>(in, pos);
        if (d == 0) throw TensorFileError(TensorFileErrc::empty_dim, "zero-length dimension");
        if (count > std::numeric_limits<std::size_t>::max() / 4 / d)
            throw TensorFileError(TensorFileErrc::dim_overflow, "element count overflows");
        count *= d;
        shape.push_back(d);
    }
    const std::size_t remaining = in.size() - pos;
    if (remaining < 4 * count) throw TensorFileError(TensorFileErrc::truncated, "payload ends early");
    if (remaining > 4 * count) throw TensorFileError(TensorFileErrc::trailing_bytes, "data after payload");
    std::vector<float> values(count);
    for (auto& v : values) v = std::bit_cast<float>(get<std::uint32_t>(in, pos));
    return numeric::Tensor<float>(shape, std::move(values));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw TensorFileError(TensorFileErrc::io, "cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
    auto tmp = path;
    tmp += ".tmp" + std::to_string(::getpid());
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw TensorFileError(TensorFileErrc::io, "cannot write " + tmp.string());
        f.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!f) throw TensorFileError(TensorFileErrc::io, "write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw TensorFileError(TensorFileErrc::io, "rename to " + path.string() + ": " + ec.message());
    }
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, text.data(), text.size());
}

void save_tensor(const numeric::Tensor<float>& t, const std::filesystem::path& path) {
    const auto bytes = encode_tensor(t);
    write_file_atomic(path, bytes.data(), bytes.size());
}

void save_tensor(const numeric::Shape& shape, std::span<const float> values, const std::filesystem::path& path) {
    const auto bytes = encode_tensor(shape, values);
    write_file_atomic(path, bytes.data(), bytes.size());
}

numeric::Tensor<float> load_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

}  // namespace ldpet::io
