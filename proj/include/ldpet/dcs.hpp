#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "ldpet/image_grid.hpp"
#include "ldpet/jcp.hpp"
#include "ldpet/nn/params.hpp"
#include "ldpet/transformer.hpp"

namespace ldpet::dcs {

class DcsError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

enum class ThresholdKind { quantile, background_multiple };

struct MaskPolicy {
    ThresholdKind kind = ThresholdKind::quantile;
    double q = 0.98;                  // quantile of in-body pixels
    double m = 2.0;                   // multiple of the in-body median
    std::size_t min_component = 2;    // smaller 4-connected components are dropped
};

struct LesionMask {
    std::vector<std::uint8_t> M;
    ImageGrid v;  // M * source
    double threshold = 0.0;

    std::size_t count() const;
};

/// Threshold from the policy over in-body (x > 0) pixels, then strict >.
LesionMask extract_lesion_mask(const ImageGrid& x, const MaskPolicy& policy = {});
/// Strict > against an explicit threshold, with the speckle guard.
LesionMask mask_above(const ImageGrid& x, double threshold, std::size_t min_component = 2);

/// u = (x + eta v) / 2.
ImageGrid refine(const ImageGrid& x, const ImageGrid& v, double eta);

using Field = std::vector<double>;

/// Forward map zeta and its adjoint (d zeta / du)^T g at u.
struct Degradation {
    std::function<Field(const Field& u)> apply;
    std::function<Field(const Field& u, const Field& g)> adjoint;

    static Degradation identity();
    /// zeta(u) = inner(2u - eta v): inverts the refine blend before the dose map.
    static Degradation unblend(Field v, double eta, Degradation inner = identity());
};

/// zeta(u) = restored network output for input u with a fixed prior and intensity scale.
Degradation network_degradation(const nn::ParamStore& params, const transformer::StageConfig& cfg,
                                const jcp::CompactPrior& prior, std::size_t height, std::size_t width, double scale);

enum class DataMode { low_dose, network };

struct DcsConfig {
    double mu = 1.0;
    double eta = 1.0;
    double rho = 1.0;
    double gamma = 1.0;  // penalty on the refine constraint
    double delta = 1e-2;
    double kappa = 1e-4;
    std::size_t outer = 2;
    std::size_t inner = 20;
    double weight_floor = 0.05;  // lower bound on the per-pixel variance estimate
    MaskPolicy mask;
    DataMode data = DataMode::low_dose;

    void validate() const;
};

struct DcsState {
    std::size_t height = 0, width = 0;
    Field x, u, v, y, w, f_hat;
    std::vector<std::uint8_t> M;
    Field lambda1, lambda2;
    Degradation zeta = Degradation::identity();

    void validate() const;
    std::size_t size() const { return height * width; }
};

/// Full augmented Lagrangian.
double lagrangian(const DcsState& s, const DcsConfig& cfg);
Field grad_x(const DcsState& s, const DcsConfig& cfg);
Field grad_u(const DcsState& s, const DcsConfig& cfg);

double residual_mask(const DcsState& s);    // ||M x - v||
double residual_refine(const DcsState& s, const DcsConfig& cfg);  // ||u - (x + eta v)/2||

struct InnerTrace {
    std::vector<double> objective;  // value before the first step, then after each accepted step
    std::size_t halvings = 0;
};

/// Backtracking gradient descent in x (resp. u) for cfg.inner steps. Returns the new iterate.
Field update_x(const DcsState& s, const DcsConfig& cfg, InnerTrace* trace = nullptr);
Field update_u(const DcsState& s, const DcsConfig& cfg, InnerTrace* trace = nullptr);

struct DcsModel {
    Degradation zeta;       // empty apply: unblend over the identity dose map
    std::optional<ImageGrid> y;  // default: x0
    double dose_fraction = 1.0;
    double counts_scale = 20.0;
};

struct DcsReport {
    std::vector<double> residual_mask;    // after each outer iteration
    std::vector<double> residual_refine;
    std::vector<double> step_norm;        // ||x^{i+1} - x^i||
    std::size_t iterations = 0;
    std::size_t mask_pixels = 0;
    double threshold = 0.0;
};

/// Per-pixel inverse-variance weights 1 / max(x0 / (f s), floor).
Field pwls_weights(const ImageGrid& x0, double dose_fraction, double counts_scale, double floor);

/// Initial state: mask from x0, u0 = refine(x0, v0), zero multipliers.
DcsState init_state(const ImageGrid& x0, const ImageGrid& f_hat, const DcsModel& model, const DcsConfig& cfg);

ImageGrid run_dcs(const ImageGrid& x0, const ImageGrid& f_hat, const DcsModel& model, const DcsConfig& cfg,
                  DcsReport* report = nullptr);

void to_json(nlohmann::json& j, const DcsConfig& c);
void from_json(const nlohmann::json& j, DcsConfig& c);
void to_json(nlohmann::json& j, const DcsReport& r);

}  // namespace ldpet::dcs
