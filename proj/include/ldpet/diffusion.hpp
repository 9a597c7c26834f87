#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ldpet/jcp.hpp"
#include "ldpet/nn/params.hpp"

namespace ldpet::diffusion {

class DiffusionError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Tables of length T + 1. Index 0 is the clean state: beta_0 = 0, alpha_0 = 1,
/// alpha_bar_0 = 1, so alpha_bar_t = prod_{i=0..t} alpha_i = prod_{i=1..t} alpha_i.
struct DiffusionSchedule {
    std::size_t T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
};

struct BetaSpec {
    double beta_min = 0.1;
    double beta_max = 0.99;
};

/// Linear beta from beta_min (t = 1) to beta_max (t = T).
DiffusionSchedule make_schedule(std::size_t T, BetaSpec spec = {});
/// Schedule from explicit betas for t = 1..T.
DiffusionSchedule make_schedule(const std::vector<double>& betas);

/// J_t = sqrt(alpha_bar_t) J + sqrt(1 - alpha_bar_t) noise.
template <typename T>
std::vector<T> diffuse_forward(std::span<const T> j, const DiffusionSchedule& s, std::size_t t,
                               std::span<const T> noise);

/// J_{t-1} = (J_t - eps (1 - alpha_t) / sqrt(1 - alpha_bar_t)) / sqrt(alpha_t). No noise injection.
template <typename T>
std::vector<T> denoise_step(std::span<const T> jt, std::span<const T> eps, const DiffusionSchedule& s, std::size_t t);

/// Standard-normal start vector for the reverse chain.
std::vector<float> initial_noise(std::size_t length, std::uint64_t seed, std::uint64_t stream = 0);

/// Any noise predictor: (J_t, t) -> eps_hat.
using NoisePredictor = std::function<std::vector<double>(const std::vector<double>& jt, std::size_t t)>;

/// T reverse steps from `init`, calling `predict` once per step (t = T..1).
std::vector<double> sample_with(const NoisePredictor& predict, const DiffusionSchedule& s, std::vector<double> init);

struct DenoiserConfig {
    std::size_t prior_length = 64;
    std::size_t hidden = 256;       // 4 * C'
    std::size_t layers = 3;
    std::size_t time_features = 16;

    void validate() const;
};

/// Parameters under the "dn." prefix.
nn::ParamStore init_denoiser(const DenoiserConfig& cfg, std::uint64_t seed);
void init_denoiser_into(nn::ParamStore& store, const DenoiserConfig& cfg, std::uint64_t seed);

/// Sinusoidal features of the step index.
std::vector<float> time_embedding(std::size_t t, std::size_t features);

/// eps_hat for J_t (1 x C') given the condition (1 x C').
template <typename T>
nn::Var<T> denoiser_graph(nn::Binder<T>& p, const DenoiserConfig& cfg, nn::Var<T> jt, nn::Var<T> cond, std::size_t t);

/// Full reverse chain in graph form; `evaluations` counts denoiser calls.
template <typename T>
nn::Var<T> sample_graph(nn::Binder<T>& p, const DenoiserConfig& cfg, const DiffusionSchedule& s, nn::Var<T> cond,
                        nn::Var<T> init, std::size_t* evaluations = nullptr);

/// Prior estimate J-hat from the condition vector.
jcp::CompactPrior sample_prior(const jcp::CompactPrior& condition, const nn::ParamStore& params,
                               const DenoiserConfig& cfg, const DiffusionSchedule& s, const std::vector<float>& init,
                               std::size_t* evaluations = nullptr);

struct PriorPair {
    jcp::CompactPrior target;     // extract_jcp(normal, low)
    jcp::CompactPrior condition;  // extract_condition(low)
};

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 8;
    nn::AdamConfig adam{1e-3, 0.9, 0.99, 1e-8};
    bool cosine_decay = true;
    std::uint64_t seed = 11;  // sample order and chain start noise
};

struct TrainResult {
    nn::ParamStore params;
    std::vector<double> loss_curve;
};

/// Whole-chain prior prediction: L1 between the sampled J-hat and J.
TrainResult train_diffusion(const std::vector<PriorPair>& data, const DenoiserConfig& cfg,
                            const DiffusionSchedule& s, nn::ParamStore init, const TrainConfig& tcfg,
                            const std::function<void(std::size_t, double)>& on_step = {});

/// Mean of ||J-hat - J|| / ||J|| with chain starts drawn from (seed, index).
double relative_prior_error(const std::vector<PriorPair>& data, const nn::ParamStore& params,
                            const DenoiserConfig& cfg, const DiffusionSchedule& s, std::uint64_t seed);

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace ldpet::diffusion
