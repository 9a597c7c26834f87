#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ldpet/image_grid.hpp"

namespace ldpet::phantom {

class PhantomError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Circular region in the slice plane. Coordinates are millimetres from the grid center.
struct Disc {
    double cx_mm = 0.0;
    double cy_mm = 0.0;
    double diameter_mm = 0.0;

    double radius_mm() const { return 0.5 * diameter_mm; }
};

/// Hot insert; `ratio` is activity relative to the background.
struct Sphere {
    Disc disc;
    double ratio = 4.0;
};

/// Cold (or lukewarm) insert; ratio below 1, default empty.
struct ColdRegion {
    Disc disc;
    double ratio = 0.0;
};

struct PhantomSpec {
    std::size_t height = 128;
    std::size_t width = 128;
    double pixel_mm = 2.0;
    double body_semi_x_mm = 110.0;
    double body_semi_y_mm = 80.0;
    double background = 5.3;  // kBq/ml
    std::vector<Sphere> spheres;
    std::vector<ColdRegion> cold;
    Disc liver_roi{0.0, 0.0, 40.0};  // uniform background disc used as the CR/COV reference
    int supersample = 4;             // sub-samples per pixel edge for partial-volume coverage

    /// NEMA-style body slice: six spheres (10-37 mm) on a 57.2 mm ring at 4:1 contrast.
    static PhantomSpec nema_default();

    /// Throws PhantomError on any violated invariant.
    void validate() const;
};

struct DoseModel {
    double fraction = 1.0;       // retained fraction of full-dose counts, in (0, 1]
    double counts_scale = 20.0;  // expected full-dose counts per unit activity per pixel
    std::uint64_t seed = 0;

    void validate(double max_activity) const;
};

/// Rasterizes the slice through all sphere centers. Deterministic and seed-free.
ImageGrid generate_phantom(const PhantomSpec& spec);

/// Thin stack of parallel slices spaced `slice_mm` apart, centred on the sphere plane.
std::vector<ImageGrid> generate_slab(const PhantomSpec& spec, std::size_t slices, double slice_mm);

/// Poisson count thinning: counts ~ Poisson(f*s*activity), returned as counts/(f*s).
/// `stream` selects an independent random stream for the same seed.
ImageGrid simulate_lowdose(const ImageGrid& truth, const DoseModel& dose, std::uint64_t stream = 0);

struct Sample {
    PhantomSpec spec;
    ImageGrid truth;
    double dose_fraction = 1.0;
    ImageGrid low;
};

struct DatasetConfig {
    std::size_t n_train = 16;
    std::size_t n_test = 4;
    std::vector<double> dose_fractions{0.5, 0.25, 0.1};
    double counts_scale = 20.0;
    std::uint64_t seed = 1;
    PhantomSpec base = PhantomSpec::nema_default();
    double position_jitter_mm = 6.0;
    double ratio_jitter = 0.25;       // ratio scaled by U(1 - j, 1 + j)
    double background_jitter = 0.2;   // background scaled by U(1 - j, 1 + j)
};

struct Dataset {
    std::vector<Sample> train;  // one entry per (phantom, dose fraction)
    std::vector<Sample> test;
    std::vector<double> dose_fractions;
};

/// Randomized phantom specs derived from `cfg.base`. Train and test draw from
/// disjoint seed streams.
PhantomSpec randomize_spec(const DatasetConfig& cfg, int split, std::size_t index);
Dataset make_dataset(const DatasetConfig& cfg);

void to_json(nlohmann::json& j, const Disc& d);
void from_json(const nlohmann::json& j, Disc& d);
void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);
void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

}  // namespace ldpet::phantom
