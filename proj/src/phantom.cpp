#include "ldpet/phantom.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace ldpet::phantom {

namespace {

bool inside_disc(const Disc& d, double x, double y) {
    const double dx = x - d.cx_mm, dy = y - d.cy_mm;
    return dx * dx + dy * dy <= d.radius_mm() * d.radius_mm();
}

bool inside_ellipse(double ax, double ay, double x, double y) {
    return (x * x) / (ax * ax) + (y * y) / (ay * ay) <= 1.0;
}

bool disc_inside_ellipse(const Disc& d, double ax, double ay, double radius_override = -1.0) {
    const double r = radius_override >= 0 ? radius_override : d.radius_mm();
    constexpr int kProbe = 720;
    for (int k = 0; k < kProbe; ++k) {
        const double th = 2.0 * std::numbers::pi * k / kProbe;
        if (!inside_ellipse(ax, ay, d.cx_mm + r * std::cos(th), d.cy_mm + r * std::sin(th))) return false;
    }
    return true;
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(c)};
    return std::mt19937_64(seq);
}

// Activity at a point of the slice at height z above the sphere plane.
double activity_at(const PhantomSpec& s, double x, double y, double z) {
    if (!inside_ellipse(s.body_semi_x_mm, s.body_semi_y_mm, x, y)) return 0.0;
    for (const auto& sp : s.spheres) {
        const double r = sp.disc.radius_mm();
        if (std::abs(z) >= r) continue;
        Disc section = sp.disc;
        section.diameter_mm = 2.0 * std::sqrt(r * r - z * z);
        if (inside_disc(section, x, y)) return sp.ratio * s.background;
    }
    for (const auto& c : s.cold)
        if (inside_disc(c.disc, x, y)) return c.ratio * s.background;
    return s.background;
}

ImageGrid rasterize(const PhantomSpec& s, double z) {
    ImageGrid img(s.height, s.width, s.pixel_mm);
    const int ss = s.supersample;
    const double step = s.pixel_mm / ss;
    const double inv = 1.0 / (ss * ss);
    for (std::size_t r = 0; r < s.height; ++r)
        for (std::size_t c = 0; c < s.width; ++c) {
            const double x0 = img.x_mm(c) - 0.5 * s.pixel_mm;
            const double y0 = img.y_mm(r) - 0.5 * s.pixel_mm;
            double acc = 0.0;
            for (int a = 0; a < ss; ++a)
                for (int b = 0; b < ss; ++b) acc += activity_at(s, x0 + (b + 0.5) * step, y0 + (a + 0.5) * step, z);
            img.at(r, c) = static_cast<float>(acc * inv);
        }
    return img;
}

}  // namespace

PhantomSpec PhantomSpec::nema_default() {
    PhantomSpec s;
    const double diameters[] = {10.0, 13.0, 17.0, 22.0, 28.0, 37.0};
    constexpr double kRing = 57.2;
    for (int i = 0; i < 6; ++i) {
        const double th = std::numbers::pi / 3.0 * i;
        s.spheres.push_back({{kRing * std::cos(th), kRing * std::sin(th), diameters[i]}, 4.0});
    }
    return s;
}

void PhantomSpec::validate() const {
    if (height == 0 || width == 0) throw PhantomError("phantom: grid must be non-empty");
    if (!(pixel_mm > 0)) throw PhantomError("phantom: pixel size must be positive");
    if (!(body_semi_x_mm > 0 && body_semi_y_mm > 0)) throw PhantomError("phantom: body semi-axes must be positive");
    if (!(background >= 0) || !std::isfinite(background)) throw PhantomError("phantom: background must be >= 0");
    if (supersample < 1) throw PhantomError("phantom: supersample must be >= 1");
    for (std::size_t i = 0; i < spheres.size(); ++i) {
        const auto& sp = spheres[i];
        if (!(sp.ratio >= 0)) throw PhantomError("phantom: sphere " + std::to_string(i) + " has negative activity");
        if (!(sp.disc.diameter_mm > 2.0 * pixel_mm))
            throw PhantomError("phantom: sphere " + std::to_string(i) + " diameter must exceed two pixels");
        if (!disc_inside_ellipse(sp.disc, body_semi_x_mm, body_semi_y_mm))
            throw PhantomError("phantom: sphere " + std::to_string(i) + " lies outside the body ellipse");
        for (std::size_t j = 0; j < i; ++j) {
            const auto& o = spheres[j].disc;
            const double d = std::hypot(sp.disc.cx_mm - o.cx_mm, sp.disc.cy_mm - o.cy_mm);
            if (d < sp.disc.radius_mm() + o.radius_mm())
                throw PhantomError("phantom: spheres " + std::to_string(j) + " and " + std::to_string(i) + " overlap");
        }
    }
    for (std::size_t i = 0; i < cold.size(); ++i) {
        if (!(cold[i].ratio >= 0)) throw PhantomError("phantom: cold region has negative activity");
        if (!disc_inside_ellipse(cold[i].disc, body_semi_x_mm, body_semi_y_mm))
            throw PhantomError("phantom: cold region " + std::to_string(i) + " lies outside the body ellipse");
    }
    if (!(liver_roi.diameter_mm > 0) || !disc_inside_ellipse(liver_roi, body_semi_x_mm, body_semi_y_mm))
        throw PhantomError("phantom: liver ROI must be a non-empty disc inside the body");
    for (const auto& sp : spheres)
        if (std::hypot(sp.disc.cx_mm - liver_roi.cx_mm, sp.disc.cy_mm - liver_roi.cy_mm) <
            sp.disc.radius_mm() + liver_roi.radius_mm())
            throw PhantomError("phantom: liver ROI overlaps a sphere");
}

void DoseModel::validate(double max_activity) const {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw PhantomError("dose: fraction must be in (0, 1]");
    if (!(counts_scale > 0.0)) throw PhantomError("dose: counts scale must be positive");
    if (max_activity > 0 && fraction * counts_scale * max_activity < 1.0)
        throw PhantomError("dose: f*s*max(activity) < 1, the low-dose image would be pure noise");
}

ImageGrid generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    return rasterize(spec, 0.0);
}

std::vector<ImageGrid> generate_slab(const PhantomSpec& spec, std::size_t slices, double slice_mm) {
    spec.validate();
    std::vector<ImageGrid> out;
    out.reserve(slices);
    const double mid = 0.5 * (static_cast<double>(slices) - 1.0);
    for (std::size_t k = 0; k < slices; ++k) out.push_back(rasterize(spec, (static_cast<double>(k) - mid) * slice_mm));
    return out;
}

ImageGrid simulate_lowdose(const ImageGrid& truth, const DoseModel& dose, std::uint64_t stream) {
    dose.validate(truth.max());
    const double rate = dose.fraction * dose.counts_scale;
    auto rng = stream_rng(dose.seed, 0x10d05e, stream);
    ImageGrid out(truth.height(), truth.width(), truth.pixel_mm());
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const double a = truth[i];
        if (a < 0) throw PhantomError("dose: negative activity in truth image");
        if (a == 0.0) continue;
        std::poisson_distribution<long long> pois(rate * a);
        out[i] = static_cast<float>(static_cast<double>(pois(rng)) / rate);
    }
    return out;
}

PhantomSpec randomize_spec(const DatasetConfig& cfg, int split, std::size_t index) {
    auto rng = stream_rng(cfg.seed, 0x5bec + static_cast<std::uint64_t>(split), index);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    // Rejection loop: jittered layouts occasionally collide; the stream is still deterministic.
    for (int attempt = 0; attempt < 1000; ++attempt) {
        PhantomSpec s = cfg.base;
        s.background = cfg.base.background * (1.0 + cfg.background_jitter * (2.0 * u(rng) - 1.0));
        const double rot = 2.0 * std::numbers::pi * u(rng);
        const double cr = std::cos(rot), sr = std::sin(rot);
        for (auto& sp : s.spheres) {
            const double x = sp.disc.cx_mm, y = sp.disc.cy_mm;
            sp.disc.cx_mm = cr * x - sr * y + cfg.position_jitter_mm * (2.0 * u(rng) - 1.0);
            sp.disc.cy_mm = sr * x + cr * y + cfg.position_jitter_mm * (2.0 * u(rng) - 1.0);
            sp.ratio *= 1.0 + cfg.ratio_jitter * (2.0 * u(rng) - 1.0);
        }
        try {
            s.validate();
            return s;
        } catch (const PhantomError&) {
        }
    }
    throw PhantomError("dataset: could not draw a valid randomized phantom");
}

Dataset make_dataset(const DatasetConfig& cfg) {
    if (cfg.dose_fractions.empty()) throw PhantomError("dataset: no dose fractions");
    Dataset ds;
    ds.dose_fractions = cfg.dose_fractions;
    auto build = [&](int split, std::size_t n, std::vector<Sample>& out) {
        for (std::size_t i = 0; i < n; ++i) {
            const PhantomSpec spec = randomize_spec(cfg, split, i);
            const ImageGrid truth = generate_phantom(spec);
            for (std::size_t k = 0; k < cfg.dose_fractions.size(); ++k) {
                const DoseModel dose{cfg.dose_fractions[k], cfg.counts_scale, cfg.seed};
                const std::uint64_t stream = (static_cast<std::uint64_t>(split) << 48) | (i << 8) | k;
                out.push_back({spec, truth, dose.fraction, simulate_lowdose(truth, dose, stream)});
            }
        }
    };
    build(0, cfg.n_train, ds.train);
    build(1, cfg.n_test, ds.test);
    return ds;
}

// ---------------------------------------------------------------------------
// JSON schema

void to_json(nlohmann::json& j, const Disc& d) {
    j = {{"center_mm", {d.cx_mm, d.cy_mm}}, {"diameter_mm", d.diameter_mm}};
}

void from_json(const nlohmann::json& j, Disc& d) {
    const auto& c = j.at("center_mm");
    d.cx_mm = c.at(0).get<double>();
    d.cy_mm = c.at(1).get<double>();
    d.diameter_mm = j.at("diameter_mm").get<double>();
}

void to_json(nlohmann::json& j, const PhantomSpec& s) {
    nlohmann::json spheres = nlohmann::json::array();
    for (const auto& sp : s.spheres) {
        nlohmann::json e = sp.disc;
        e["ratio"] = sp.ratio;
        spheres.push_back(e);
    }
    nlohmann::json cold = nlohmann::json::array();
    for (const auto& c : s.cold) {
        nlohmann::json e = c.disc;
        e["ratio"] = c.ratio;
        cold.push_back(e);
    }
    j = {{"grid", {s.height, s.width}},
         {"pixel_mm", s.pixel_mm},
         {"body_semi_axes_mm", {s.body_semi_x_mm, s.body_semi_y_mm}},
         {"background", s.background},
         {"spheres", spheres},
         {"cold_regions", cold},
         {"liver_roi", s.liver_roi},
         {"supersample", s.supersample}};
}

void from_json(const nlohmann::json& j, PhantomSpec& s) {
    s = PhantomSpec{};
    const auto& grid = j.at("grid");
    s.height = grid.at(0).get<std::size_t>();
    s.width = grid.at(1).get<std::size_t>();
    s.pixel_mm = j.at("pixel_mm").get<double>();
    const auto& axes = j.at("body_semi_axes_mm");
    s.body_semi_x_mm = axes.at(0).get<double>();
    s.body_semi_y_mm = axes.at(1).get<double>();
    s.background = j.at("background").get<double>();
    for (const auto& e : j.at("spheres")) s.spheres.push_back({e.get<Disc>(), e.value("ratio", 4.0)});
    if (j.contains("cold_regions"))
        for (const auto& e : j.at("cold_regions")) s.cold.push_back({e.get<Disc>(), e.value("ratio", 0.0)});
    if (j.contains("liver_roi")) s.liver_roi = j.at("liver_roi").get<Disc>();
    s.supersample = j.value("supersample", 4);
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
    j = {{"n_train", c.n_train},
         {"n_test", c.n_test},
         {"dose_fractions", c.dose_fractions},
         {"counts_scale", c.counts_scale},
         {"seed", c.seed},
         {"phantom", c.base},
         {"position_jitter_mm", c.position_jitter_mm},
         {"ratio_jitter", c.ratio_jitter},
         {"background_jitter", c.background_jitter}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
    c = DatasetConfig{};
    c.n_train = j.value("n_train", c.n_train);
    c.n_test = j.value("n_test", c.n_test);
    c.dose_fractions = j.value("dose_fractions", c.dose_fractions);
    c.counts_scale = j.value("counts_scale", c.counts_scale);
    c.seed = j.value("seed", c.seed);
    if (j.contains("phantom")) {
        // Keys given here override the built-in layout.
        nlohmann::json base = PhantomSpec::nema_default();
        base.merge_patch(j.at("phantom"));
        c.base = base.get<PhantomSpec>();
    }
    c.position_jitter_mm = j.value("position_jitter_mm", c.position_jitter_mm);
    c.ratio_jitter = j.value("ratio_jitter", c.ratio_jitter);
    c.background_jitter = j.value("background_jitter", c.background_jitter);
}

}  // namespace ldpet::phantom
