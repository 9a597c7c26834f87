#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ldpet/numeric/tensor.hpp"

namespace ldpet::io {

enum class TensorFileErrc {
    io,
    bad_magic,
    bad_version,
    bad_dtype,
    truncated,
    trailing_bytes,
    dim_overflow,
    empty_dim,
};

const char* errc_name(TensorFileErrc e);

class TensorFileError : public std::runtime_error {
   public:
    TensorFileError(TensorFileErrc code, const std::string& what);
    TensorFileErrc code() const noexcept { return code_; }

   private:
    TensorFileErrc code_;
};

inline constexpr char kTensorMagic[4] = {'D', 'T', 'M', 'T'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;

/// "DTMT" | u16 version | u8 dtype | u8 rank | u32 dims[rank] | f32 payload, all little-endian.
std::vector<std::uint8_t> encode_tensor(const numeric::Tensor<float>& t);
std::vector<std::uint8_t> encode_tensor(const numeric::Shape& shape, std::span<const float> values);
numeric::Tensor<float> decode_tensor(const std::vector<std::uint8_t>& bytes);

/// Atomic: written to a sibling temp file, then renamed.
void save_tensor(const numeric::Tensor<float>& t, const std::filesystem::path& path);
void save_tensor(const numeric::Shape& shape, std::span<const float> values, const std::filesystem::path& path);
numeric::Tensor<float> load_tensor(const std::filesystem::path& path);

/// Whole-file read; throws TensorFileError(io) if unreadable.
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Temp file in the same directory, then rename over `path`.
void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace ldpet::io
