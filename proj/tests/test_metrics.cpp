#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "ldpet/metrics.hpp"

using namespace ldpet;
using namespace ldpet::metrics;

namespace {

ImageGrid from(std::vector<float> v, std::size_t h, std::size_t w) { return ImageGrid(h, w, 1.0, std::move(v)); }

ImageGrid random_grid(std::mt19937_64& rng, std::size_t h, std::size_t w, float lo, float hi) {
    std::uniform_real_distribution<float> u(lo, hi);
    std::vector<float> v(h * w);
    for (auto& e : v) e = u(rng);
    return from(std::move(v), h, w);
}

ImageGrid scaled(const ImageGrid& g, float k) {
    ImageGrid out = g;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = g[i] * k;
    return out;
}

// Independent direct-formula oracles in long double.
struct Oracle {
    static long double mean(const ImageGrid& a) {
        long double s = 0;
        for (auto v : a.values()) s += v;
        return s / a.size();
    }
    static long double psnr(const ImageGrid& x, const ImageGrid& y) {
        long double s = 0, m = y[0];
        for (std::size_t i = 0; i < x.size(); ++i) {
            s += (long double)(x[i] - (long double)y[i]) * (x[i] - (long double)y[i]);
            m = std::max<long double>(m, y[i]);
        }
        return 20 * std::log10(m / std::sqrt(s));
    }
    static long double ssim(const ImageGrid& x, const ImageGrid& y) {
        const long double mx = mean(x), my = mean(y);
        long double sx = 0, sy = 0, sxy = 0, L = y[0];
        for (std::size_t i = 0; i < x.size(); ++i) {
            sx += (x[i] - mx) * (x[i] - mx);
            sy += (y[i] - my) * (y[i] - my);
            sxy += (x[i] - mx) * (y[i] - my);
            L = std::max<long double>(L, y[i]);
        }
        const long double n = x.size();
        sx /= n;
        sy /= n;
        sxy /= n;
        const long double c1 = (0.01L * L) * (0.01L * L), c2 = (0.03L * L) * (0.03L * L);
        return (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sx + sy + c2));
    }
    static long double nrmse(const ImageGrid& x, const ImageGrid& y) {
        long double s = 0, lo = y[0], hi = y[0];
        for (std::size_t i = 0; i < x.size(); ++i) {
            s += (x[i] - (long double)y[i]) * (x[i] - (long double)y[i]);
            lo = std::min<long double>(lo, y[i]);
            hi = std::max<long double>(hi, y[i]);
        }
        return std::sqrt(s / x.size()) / (hi - lo);
    }
    static long double cr(const ImageGrid& x, const Roi& les, const Roi& liv) {
        long double m = -1e30L, s = 0;
        for (auto p : les.pixels) m = std::max<long double>(m, x[p]);
        for (auto p : liv.pixels) s += x[p];
        return m / (s / liv.pixels.size());
    }
    static long double cov(const ImageGrid& x, const Roi& roi) {
        long double s = 0, s2 = 0;
        for (auto p : roi.pixels) s += x[p];
        const long double mu = s / roi.pixels.size();
        for (auto p : roi.pixels) s2 += (x[p] - mu) * (x[p] - mu);
        return std::sqrt(s2 / roi.pixels.size()) / mu;
    }
};

}  // namespace

TEST(Metrics, PsnrSingleOffsetEntry) {
    const auto y = from({0, 0, 0, 1}, 2, 2);
    const auto x = from({0, 0.1f, 0, 1}, 2, 2);
    EXPECT_NEAR(psnr(x, y), 20.0, 1e-5);
    EXPECT_TRUE(std::isinf(psnr(y, y)));
    EXPECT_GT(psnr(y, y), 0.0);
}

TEST(Metrics, PsnrDoublingInvariant) {
    std::mt19937_64 rng(1);
    const auto x = random_grid(rng, 8, 8, 0, 1), y = random_grid(rng, 8, 8, 0, 1);
    EXPECT_EQ(psnr(scaled(x, 2), scaled(y, 2)), psnr(x, y));
}

TEST(Metrics, ConventionalPsnrUsesRmse) {
    const auto y = from({0, 0, 0, 1}, 2, 2);
    const auto x = from({0, 0.1f, 0, 1}, 2, 2);
    EXPECT_NEAR(psnr_conventional(x, y), 20.0 + 10.0 * std::log10(4.0), 1e-5);
}

TEST(Metrics, SsimIdentityAndAntiCorrelation) {
    std::mt19937_64 rng(2);
    const auto y = random_grid(rng, 8, 8, 0, 1);
    EXPECT_DOUBLE_EQ(ssim(y, y), 1.0);
    const double m = Oracle::mean(y);
    ImageGrid anti = y;
    for (std::size_t i = 0; i < y.size(); ++i) anti[i] = static_cast<float>(2 * m - y[i]);
    EXPECT_LT(ssim(anti, y), 1.0);
    EXPECT_GE(ssim(anti, y), -1.0);
}

TEST(Metrics, NrmseExamples) {
    std::mt19937_64 rng(3);
    auto y = random_grid(rng, 8, 8, 0, 1);
    y[0] = 0.0f;
    y[1] = 1.0f;
    EXPECT_EQ(nrmse(y, y), 0.0);
    ImageGrid x = y;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = y[i] + 0.1f;
    EXPECT_NEAR(nrmse(x, y), 0.1, 1e-6);
    EXPECT_THROW(nrmse(x, from(std::vector<float>(64, 2.0f), 8, 8)), MetricsError);
}

TEST(Metrics, CrAndCovHandCases) {
    const auto img = from({4, 1, 2, 2, 1, 3}, 2, 3);
    const Roi lesion{RoiLabel::lesion, {0, 1}};
    const Roi liver{RoiLabel::liver, {2, 3}};
    EXPECT_DOUBLE_EQ(cr(img, lesion, liver), 2.0);
    EXPECT_DOUBLE_EQ(cov(img, liver), 0.0);
    EXPECT_DOUBLE_EQ(cov(img, Roi{RoiLabel::background, {4, 5}}), 0.5);
    const auto zero = from({4, 1, 0, 0, 1, 3}, 2, 3);
    EXPECT_THROW(cr(zero, lesion, liver), MetricsError);
    EXPECT_THROW(cov(zero, liver), MetricsError);
    EXPECT_THROW(cov(img, Roi{RoiLabel::liver, {}}), MetricsError);
    EXPECT_THROW(cov(img, Roi{RoiLabel::liver, {99}}), MetricsError);
}

TEST(Metrics, PhantomContrastRatioIsFour) {
    const auto spec = phantom::PhantomSpec::nema_default();
    const auto truth = phantom::generate_phantom(spec);
    const auto liver = Roi::from_disc(truth, spec.liver_roi, RoiLabel::liver);
    for (const auto& sp : spec.spheres) {
        const auto lesion = Roi::from_disc(truth, sp.disc, RoiLabel::lesion);
        EXPECT_NEAR(cr(truth, lesion, liver), 4.0, 4.0 * 0.03);
    }
}

TEST(Metrics, OracleEquivalenceOnRandomPairs) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t h = 3 + rng() % 14, w = 3 + rng() % 14;
        const auto y = random_grid(rng, h, w, 0.1f, 3.0f);
        const auto x = random_grid(rng, h, w, 0.1f, 3.0f);
        const Roi a{RoiLabel::lesion, {0, 1, 2}};
        const Roi b{RoiLabel::liver, {3, 4, 5, h * w - 1}};
        ASSERT_NEAR(psnr(x, y), (double)Oracle::psnr(x, y), 1e-9);
        ASSERT_NEAR(ssim(x, y), (double)Oracle::ssim(x, y), 1e-9);
        ASSERT_NEAR(nrmse(x, y), (double)Oracle::nrmse(x, y), 1e-9);
        ASSERT_NEAR(cr(x, a, b), (double)Oracle::cr(x, a, b), 1e-9);
        ASSERT_NEAR(cov(x, b), (double)Oracle::cov(x, b), 1e-9);
    }
}

TEST(Metrics, ScaleInvariance) {
    std::mt19937_64 rng(5);
    const auto y = random_grid(rng, 8, 8, 0.1f, 3.0f);
    const auto x = random_grid(rng, 8, 8, 0.1f, 3.0f);
    const Roi a{RoiLabel::lesion, {0, 1, 2}}, b{RoiLabel::liver, {10, 11, 12, 13}};
    for (float k : {2.0f, 0.5f, 4.0f}) {
        const auto xs = scaled(x, k), ys = scaled(y, k);
        EXPECT_EQ(psnr(xs, ys), psnr(x, y));
        EXPECT_EQ(nrmse(xs, ys), nrmse(x, y));
        EXPECT_EQ(cr(xs, a, b), cr(x, a, b));
        EXPECT_EQ(cov(xs, b), cov(x, b));
    }
    // Non power-of-two factors agree to rounding.
    const auto xs = scaled(x, 3.7f), ys = scaled(y, 3.7f);
    EXPECT_NEAR(psnr(xs, ys), psnr(x, y), 1e-5);
    EXPECT_NEAR(cr(xs, a, b), cr(x, a, b), 1e-6);
}

TEST(Metrics, MonotoneInPerturbation) {
    const auto truth = phantom::generate_phantom(phantom::PhantomSpec::nema_default());
    std::mt19937_64 rng(6);
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::vector<float> z(truth.size());
    for (auto& e : z) e = n(rng);
    double prev_psnr = std::numeric_limits<double>::infinity(), prev_nrmse = 0.0;
    for (float sigma : {0.05f, 0.1f, 0.2f, 0.4f, 0.8f}) {
        ImageGrid x = truth;
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += sigma * z[i];
        const double p = psnr(x, truth), e = nrmse(x, truth);
        EXPECT_LT(p, prev_psnr);
        EXPECT_GT(e, prev_nrmse);
        prev_psnr = p;
        prev_nrmse = e;
    }
}

TEST(Metrics, ReportIdenticalInputs) {
    const auto spec = phantom::PhantomSpec::nema_default();
    const auto truth = phantom::generate_phantom(spec);
    const auto r = evaluate(truth, truth, spec, 1.0, "truth");
    EXPECT_EQ(r.nrmse, 0.0);
    EXPECT_EQ(r.ssim, 1.0);
    EXPECT_EQ(r.cr.size(), 6u);
    const nlohmann::json j = r;
    const auto back = j.get<MetricsReport>();
    EXPECT_EQ(back.method, "truth");
    EXPECT_EQ(back.cr, r.cr);
}

TEST(Metrics, ShapeMismatch) {
    EXPECT_THROW(psnr(ImageGrid(2, 2, 1.0), ImageGrid(2, 3, 1.0)), MetricsError);
}
