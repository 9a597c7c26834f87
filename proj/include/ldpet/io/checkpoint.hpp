#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "ldpet/nn/params.hpp"

namespace ldpet::io {

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// FNV-1a 64 over the compact JSON dump (object keys are sorted).
std::uint64_t config_hash(const nlohmann::json& config);
std::string hash_hex(std::uint64_t h);

struct Checkpoint {
    std::string stage;
    nlohmann::json config;
    nn::ParamStore params;
};

/// Directory with manifest.json plus one .dtmt file per parameter.
void save_checkpoint(const std::filesystem::path& dir, const nn::ParamStore& params, const std::string& stage,
                     const nlohmann::json& config);

/// Verifies stage tag, file shapes against the manifest, and the stored config hash.
Checkpoint load_checkpoint(const std::filesystem::path& dir, const std::string& stage);
/// As above, and rejects a checkpoint whose config hash differs from `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& dir, const std::string& stage, const nlohmann::json& expected);

/// Copies tensors into `target`, requiring every name present with the same shape.
void assign_into(nn::ParamStore& target, const nn::ParamStore& loaded);

}  // namespace ldpet::io
