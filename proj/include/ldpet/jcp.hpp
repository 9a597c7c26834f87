#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ldpet/image_grid.hpp"
#include "ldpet/nn/params.hpp"

namespace ldpet::jcp {

struct JcpConfig {
    std::size_t downsample = 8;     // space_to_channel factor on the 2-channel input
    std::size_t width = 64;         // residual stack channels
    std::size_t blocks = 3;
    std::size_t prior_length = 64;  // C'; each head emits C'/2

    void validate() const;
};

/// J = [horizontal || vertical], horizontal first.
struct CompactPrior {
    std::vector<float> values;

    std::size_t length() const noexcept { return values.size(); }
    std::span<const float> horizontal() const { return std::span(values).first(values.size() / 2); }
    std::span<const float> vertical() const { return std::span(values).subspan(values.size() / 2); }
    double norm() const;
};

CompactPrior combine_priors(std::span<const float> h, std::span<const float> v);
std::pair<std::vector<float>, std::vector<float>> split_prior(const CompactPrior& j);

/// Parameters under the "jcp." prefix. `zero_heads` zeroes both linear heads.
nn::ParamStore init_jcp(const JcpConfig& cfg, std::uint64_t seed, bool zero_heads = false);
void init_jcp_into(nn::ParamStore& store, const JcpConfig& cfg, std::uint64_t seed, bool zero_heads = false);

/// Graph form. `normal` and `low` are 1 x H x W; the result is 1 x C'.
template <typename T>
nn::Var<T> jcp_graph(nn::Binder<T>& p, const JcpConfig& cfg, nn::Var<T> normal, nn::Var<T> low);

/// Training-mode extraction from the (normal, low) pair.
CompactPrior extract_jcp(const ImageGrid& normal, const ImageGrid& low, const nn::ParamStore& params,
                         const JcpConfig& cfg);
/// Inference-mode extraction: the normal-dose channel is a zero plane.
CompactPrior extract_condition(const ImageGrid& low, const nn::ParamStore& params, const JcpConfig& cfg);

void to_json(nlohmann::json& j, const JcpConfig& c);
void from_json(const nlohmann::json& j, JcpConfig& c);

}  // namespace ldpet::jcp
