#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ldpet/dcs.hpp"
#include "ldpet/diffusion.hpp"
#include "ldpet/jcp.hpp"
#include "ldpet/metrics.hpp"
#include "ldpet/phantom.hpp"
#include "ldpet/transformer.hpp"

namespace ldpet::pipeline {

class PipelineError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct Seeds {
    std::uint64_t dataset = 1;
    std::uint64_t init = 2;
    std::uint64_t sampler = 3;
};

struct RunConfig {
    std::string phantom_spec_path;  // empty: built-in NEMA body layout
    phantom::DatasetConfig dataset;
    jcp::JcpConfig jcp;
    transformer::StageConfig stage = transformer::StageConfig::toy();
    transformer::TrainConfig stage1_train;
    diffusion::DenoiserConfig denoiser;
    std::size_t diffusion_steps = 4;
    diffusion::BetaSpec beta;
    diffusion::TrainConfig stage2_train;
    dcs::DcsConfig dcs;
    Seeds seeds;
    std::string output_dir = "ldpet-run";

    /// Hash identity of each checkpoint stage.
    nlohmann::json stage1_section() const;
    nlohmann::json stage2_section() const;
    diffusion::DiffusionSchedule schedule() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Reads a run config, resolving phantom_spec_path relative to the config file.
RunConfig load_run_config(const std::filesystem::path& path);

inline constexpr const char* kStage1Tag = "jcp+transformer";
inline constexpr const char* kStage2Tag = "diffusion";

/// Dataset generation straight from the config.
phantom::Dataset make_dataset(const RunConfig& cfg);

std::string dose_tag(double fraction);

/// Ground-truth phantoms and specs under `dir`.
void write_phantoms(const RunConfig& cfg, const std::filesystem::path& dir);
/// Low-dose realizations for every configured dose, next to the phantoms.
void write_lowdose(const RunConfig& cfg, const std::filesystem::path& dir);
/// Loads what write_phantoms + write_lowdose produced.
phantom::Dataset load_dataset(const RunConfig& cfg, const std::filesystem::path& dir);

struct StageResult {
    nn::ParamStore params;
    std::vector<double> loss_curve;
};

using StepCallback = std::function<void(std::size_t, double)>;

StageResult train_stage1(const RunConfig& cfg, const phantom::Dataset& ds, const StepCallback& on_step = {});
/// Targets and conditions come from the frozen stage-1 JCP extractor.
std::vector<diffusion::PriorPair> prior_pairs(const RunConfig& cfg, const std::vector<phantom::Sample>& samples,
                                              const nn::ParamStore& stage1);
StageResult train_stage2(const RunConfig& cfg, const phantom::Dataset& ds, const nn::ParamStore& stage1,
                         const StepCallback& on_step = {});

void save_stage(const std::filesystem::path& dir, const StageResult& r, const std::string& tag,
                const nlohmann::json& section, const RunConfig& cfg);
nn::ParamStore load_stage1(const RunConfig& cfg, const std::filesystem::path& dir);
nn::ParamStore load_stage2(const RunConfig& cfg, const std::filesystem::path& dir);

struct Reconstruction {
    jcp::CompactPrior prior;
    ImageGrid f_hat;
    std::optional<ImageGrid> dcs;
    dcs::DcsReport dcs_report;
};

/// Sampler -> U-net -> optional DCS. `stream` selects the sampler start noise.
Reconstruction reconstruct(const RunConfig& cfg, const nn::ParamStore& stage1, const nn::ParamStore& stage2,
                           const ImageGrid& low, double dose_fraction, bool use_dcs, std::uint64_t stream);

/// Every test sample at one dose, written under dir/<dose tag>/{fhat,dcs}/NNN.dtmt.
void reconstruct_split(const RunConfig& cfg, const nn::ParamStore& stage1, const nn::ParamStore& stage2,
                       const phantom::Dataset& ds, double dose_fraction, bool use_dcs,
                       const std::filesystem::path& dir);

struct Evaluation {
    double dose_fraction = 0.0;
    std::vector<metrics::MetricsReport> low, f_hat, dcs;  // one per test phantom
};

/// Reports for low, f_hat and (if present) f_hat + DCS read from a reconstruct_split directory.
Evaluation evaluate_split(const RunConfig& cfg, const phantom::Dataset& ds, double dose_fraction,
                          const std::filesystem::path& recon_dir);

nlohmann::json summarize(const Evaluation& e);
void to_json(nlohmann::json& j, const Evaluation& e);

/// Snapshot of the resolved config in an artifact directory.
void write_snapshot(const std::filesystem::path& dir, const RunConfig& cfg);
nlohmann::json read_snapshot(const std::filesystem::path& dir);

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& loss);

ImageGrid grid_from(const numeric::Tensor<float>& t, double pixel_mm);
numeric::Tensor<float> tensor_from(const ImageGrid& g);

}  // namespace ldpet::pipeline
