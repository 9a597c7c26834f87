#include "ldpet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ldpet::metrics {

namespace {

void check_pair(const ImageGrid& x, const ImageGrid& y) {
    if (!x.same_shape(y) || x.size() == 0) throw MetricsError("metrics: image shapes differ");
}

double sq_error(const ImageGrid& x, const ImageGrid& y) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = double(x[i]) - double(y[i]);
        acc += d * d;
    }
    return acc;
}

struct Moments {
    double mean = 0.0;
    double var = 0.0;
};

Moments roi_moments(const ImageGrid& x, const Roi& roi) {
    Moments m;
    for (auto p : roi.pixels) m.mean += x[p];
    m.mean /= double(roi.pixels.size());
    for (auto p : roi.pixels) m.var += (x[p] - m.mean) * (x[p] - m.mean);
    m.var /= double(roi.pixels.size());
    return m;
}

double json_number(double v) { return std::isfinite(v) ? v : std::numeric_limits<double>::max(); }

}  // namespace

Roi Roi::from_disc(const ImageGrid& grid, const phantom::Disc& disc, RoiLabel label) {
    Roi roi{label, {}};
    for (std::size_t i = 0; i < grid.height(); ++i)
        for (std::size_t j = 0; j < grid.width(); ++j)
            if (std::hypot(grid.x_mm(j) - disc.cx_mm, grid.y_mm(i) - disc.cy_mm) <= disc.radius_mm())
                roi.pixels.push_back(i * grid.width() + j);
    if (roi.pixels.empty()) throw MetricsError("metrics: ROI disc covers no pixel centers");
    return roi;
}

void Roi::validate(const ImageGrid& grid) const {
    if (pixels.empty()) throw MetricsError("metrics: empty ROI");
    for (auto p : pixels)
        if (p >= grid.size()) throw MetricsError("metrics: ROI index outside grid");
}

double psnr(const ImageGrid& x, const ImageGrid& y) {
    check_pair(x, y);
    const double norm = std::sqrt(sq_error(x, y));
    if (norm == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(double(y.max()) / norm);
}

double psnr_conventional(const ImageGrid& x, const ImageGrid& y) {
    check_pair(x, y);
    const double rmse = std::sqrt(sq_error(x, y) / double(x.size()));
    if (rmse == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(double(y.max()) / rmse);
}

double ssim(const ImageGrid& x, const ImageGrid& y, double c1, double c2) {
    check_pair(x, y);
    if (!(c1 > 0 && c2 > 0)) throw MetricsError("metrics: ssim constants must be positive");
    const double n = double(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double vx = 0, vy = 0, cxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
    }
    vx /= n;
    vy /= n;
    cxy /= n;
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}

double ssim(const ImageGrid& x, const ImageGrid& y) {
    const double L = y.max();
    if (!(L > 0)) throw MetricsError("metrics: ssim needs max(y) > 0 for the default constants");
    return ssim(x, y, (0.01 * L) * (0.01 * L), (0.03 * L) * (0.03 * L));
}

double nrmse(const ImageGrid& x, const ImageGrid& y) {
    check_pair(x, y);
    const double range = double(y.max()) - double(y.min());
    if (!(range > 0)) throw MetricsError("metrics: nrmse undefined for a constant reference");
    return std::sqrt(sq_error(x, y) / double(x.size())) / range;
}

double cr(const ImageGrid& x, const Roi& lesion, const Roi& liver) {
    lesion.validate(x);
    liver.validate(x);
    const double mu = roi_moments(x, liver).mean;
    if (mu == 0.0) throw MetricsError("metrics: zero liver mean");
    float mx = x[lesion.pixels.front()];
    for (auto p : lesion.pixels) mx = std::max(mx, x[p]);
    return double(mx) / mu;
}

double cov(const ImageGrid& x, const Roi& roi) {
    roi.validate(x);
    const auto m = roi_moments(x, roi);
    if (m.mean == 0.0) throw MetricsError("metrics: zero ROI mean");
    return std::sqrt(m.var) / m.mean;
}

MetricsReport evaluate(const ImageGrid& x, const ImageGrid& truth, const phantom::PhantomSpec& spec,
                       double dose_fraction, std::string method) {
    MetricsReport r;
    r.method = std::move(method);
    r.dose_fraction = dose_fraction;
    r.psnr = psnr(x, truth);
    r.psnr_conventional = psnr_conventional(x, truth);
    r.ssim = ssim(x, truth);
    r.nrmse = nrmse(x, truth);
    const auto liver = Roi::from_disc(x, spec.liver_roi, RoiLabel::liver);
    for (const auto& sp : spec.spheres) r.cr.push_back(cr(x, Roi::from_disc(x, sp.disc, RoiLabel::lesion), liver));
    r.cov.push_back(cov(x, liver));
    return r;
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
    j = {{"method", r.method},
         {"dose_fraction", r.dose_fraction},
         {"psnr_db", json_number(r.psnr)},
         {"psnr_conventional_db", json_number(r.psnr_conventional)},
         {"ssim", r.ssim},
         {"nrmse", r.nrmse},
         {"cr", r.cr},
         {"cov", r.cov}};
}

void from_json(const nlohmann::json& j, MetricsReport& r) {
    r.method = j.at("method").get<std::string>();
    r.dose_fraction = j.at("dose_fraction").get<double>();
    r.psnr = j.at("psnr_db").get<double>();
    r.psnr_conventional = j.at("psnr_conventional_db").get<double>();
    r.ssim = j.at("ssim").get<double>();
    r.nrmse = j.at("nrmse").get<double>();
    r.cr = j.at("cr").get<std::vector<double>>();
    r.cov = j.at("cov").get<std::vector<double>>();
}

}  // namespace ldpet::metrics
