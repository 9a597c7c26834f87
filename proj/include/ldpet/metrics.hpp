#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ldpet/image_grid.hpp"
#include "ldpet/phantom.hpp"

namespace ldpet::metrics {

class MetricsError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

enum class RoiLabel { lesion, liver, background };

/// Pixel index set on a fixed grid.
struct Roi {
    RoiLabel label = RoiLabel::background;
    std::vector<std::size_t> pixels;

    /// Pixels whose centers fall inside the disc. Throws if none do.
    static Roi from_disc(const ImageGrid& grid, const phantom::Disc& disc, RoiLabel label);
    void validate(const ImageGrid& grid) const;
};

/// 20*log10(max(y) / ||x - y||_2), raw 2-norm. +inf when x == y.
double psnr(const ImageGrid& x, const ImageGrid& y);
/// 20*log10(max(y) / rmse(x, y)).
double psnr_conventional(const ImageGrid& x, const ImageGrid& y);

/// Single-window SSIM over the whole image with population statistics.
double ssim(const ImageGrid& x, const ImageGrid& y, double c1, double c2);
/// c1 = (0.01 L)^2, c2 = (0.03 L)^2, L = max(y).
double ssim(const ImageGrid& x, const ImageGrid& y);

double nrmse(const ImageGrid& x, const ImageGrid& y);

/// Lesion maximum over liver mean.
double cr(const ImageGrid& x, const Roi& lesion, const Roi& liver);
/// Population std over mean.
double cov(const ImageGrid& x, const Roi& roi);

struct MetricsReport {
    std::string method;
    double dose_fraction = 1.0;
    double psnr = 0.0;
    double psnr_conventional = 0.0;
    double ssim = 0.0;
    double nrmse = 0.0;
    std::vector<double> cr;   // one per sphere, spec order
    std::vector<double> cov;  // liver ROI
};

/// All indices of `x` against `truth`, with ROIs taken from the phantom spec.
MetricsReport evaluate(const ImageGrid& x, const ImageGrid& truth, const phantom::PhantomSpec& spec,
                       double dose_fraction, std::string method);

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

}  // namespace ldpet::metrics
