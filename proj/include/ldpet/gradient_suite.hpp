#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ldpet {

struct SuiteEntry {
    std::string name;
    double max_relative_error = 0.0;
    double tolerance = 0.0;
    std::size_t checked = 0;
    bool passed = false;
};

/// Finite-difference checks of every registered op on seeded random shapes,
/// plus the end-to-end transformer loss, the diffusion chain and the DCS Lagrangian.
std::vector<SuiteEntry> run_gradient_suite(std::uint64_t seed = 0, std::size_t cases_per_op = 6);

}  // namespace ldpet
