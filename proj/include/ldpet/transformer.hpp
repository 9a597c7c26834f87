#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ldpet/image_grid.hpp"
#include "ldpet/jcp.hpp"
#include "ldpet/nn/params.hpp"
#include "ldpet/phantom.hpp"

namespace ldpet::transformer {

inline constexpr std::size_t kLevels = 4;
inline constexpr double kMinTemperature = 1e-3;

struct StageConfig {
    std::array<std::size_t, kLevels> heads{1, 2, 4, 8};
    std::array<std::size_t, kLevels> channels{8, 16, 32, 64};
    std::array<std::size_t, kLevels> blocks{1, 1, 1, 1};
    std::size_t prior_length = 64;
    std::size_t ffn_expansion = 2;

    static StageConfig toy() { return {}; }
    static StageConfig full_scale();
    void validate() const;
};

/// Parameters under the "tf." prefix.
nn::ParamStore init_stage(const StageConfig& cfg, std::uint64_t seed);
void init_stage_into(nn::ParamStore& store, const StageConfig& cfg, std::uint64_t seed);
/// Adds the parameters of one block named `prefix` (e.g. "tf.enc0.b0.") with C channels.
void init_block_into(nn::ParamStore& store, const std::string& prefix, std::size_t channels, std::size_t prior_length,
                     std::size_t ffn_expansion, std::size_t heads, nn::Initializer& init);

// Graph building blocks. Feature maps are C x H x W, J is 1 x C'.
template <typename T>
nn::Var<T> modulate(nn::Binder<T>& p, const std::string& prefix, nn::Var<T> a, nn::Var<T> j);
template <typename T>
nn::Var<T> mta(nn::Binder<T>& p, const std::string& prefix, nn::Var<T> a_mod, nn::Var<T> a, std::size_t heads,
               std::vector<nn::Var<T>>* attention_maps = nullptr);
template <typename T>
nn::Var<T> gffn(nn::Binder<T>& p, const std::string& prefix, nn::Var<T> a_mod, nn::Var<T> a);
template <typename T>
nn::Var<T> block(nn::Binder<T>& p, const std::string& prefix, nn::Var<T> a, nn::Var<T> j, std::size_t heads);
/// low is 1 x H x W (H, W divisible by 8); returns low + head(decoded).
template <typename T>
nn::Var<T> unet_graph(nn::Binder<T>& p, const StageConfig& cfg, nn::Var<T> low, nn::Var<T> j);

/// Shape of every level's feature map for an H x W input, without computing.
std::vector<numeric::Shape> trace_shapes(const StageConfig& cfg, std::size_t height, std::size_t width);

ImageGrid unet_forward(const ImageGrid& low, const jcp::CompactPrior& j, const StageConfig& cfg,
                       const nn::ParamStore& params);

/// Restoration in normalized units: inputs are divided by mean(low) over
/// positive pixels before the network and the output is scaled back.
double intensity_scale(const ImageGrid& low);
/// Prior extraction on the same normalized intensities the training loop uses.
jcp::CompactPrior normalized_prior(const ImageGrid& normal, const ImageGrid& low, const nn::ParamStore& params,
                                   const jcp::JcpConfig& cfg);
jcp::CompactPrior normalized_condition(const ImageGrid& low, const nn::ParamStore& params, const jcp::JcpConfig& cfg);
ImageGrid restore(const ImageGrid& low, const jcp::CompactPrior& j, const StageConfig& cfg,
                  const nn::ParamStore& params);

struct TrainConfig {
    std::size_t steps = 1000;
    std::size_t batch = 4;
    nn::AdamConfig adam{2e-3, 0.9, 0.99, 1e-8};
    bool cosine_decay = true;
    std::uint64_t seed = 7;  // sample order
    std::size_t log_every = 0;
};

struct TrainResult {
    nn::ParamStore params;           // jcp.* and tf.*
    std::vector<double> loss_curve;  // one entry per step
};

struct PairedSample {
    ImageGrid normal;
    ImageGrid low;
};

std::vector<PairedSample> pairs_from(const std::vector<phantom::Sample>& samples);

/// Joint JCP + transformer training on mean absolute error. Throws
/// numeric::NumericError if the loss becomes non-finite.
TrainResult train_transformer(const std::vector<PairedSample>& data, const jcp::JcpConfig& jcfg,
                              const StageConfig& scfg, nn::ParamStore init, const TrainConfig& tcfg,
                              const std::function<void(std::size_t, double)>& on_step = {});

/// Training loss for one batch in graph form (used by gradient checks).
template <typename T>
nn::Var<T> batch_loss(nn::Binder<T>& p, const jcp::JcpConfig& jcfg, const StageConfig& scfg,
                      const std::vector<const PairedSample*>& batch);

void to_json(nlohmann::json& j, const StageConfig& c);
void from_json(const nlohmann::json& j, StageConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace ldpet::transformer
