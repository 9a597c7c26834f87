#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ldpet/numeric/graph.hpp"

namespace ldpet::numeric {

/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
double relative_error(double analytic, double numeric);

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;  // number of scalar parameters compared
    bool passed = false;
};

/// One randomized instance of an op: input shapes plus attributes.
struct OpCase {
    OpId op = OpId::add;
    std::vector<Shape> shapes;
    OpAttrs attrs;
};

/// Central-difference check of one op in 64-bit. The scalar probed is
/// sum(R * op(inputs)) for a fixed random R; every input element is perturbed.
/// Never throws unless the forward itself fails.
GradCheckResult grad_check(const OpCase& c, double eps, double tol, std::uint64_t seed);

/// A seeded random instance for `op` with small, shape-valid dimensions.
OpCase random_case(OpId op, std::uint64_t seed);

/// Builds a scalar loss on a fresh 64-bit graph from the given leaves.
using LossBuilder = std::function<Var<double>(Graph<double>&, std::span<const Var<double>>)>;

/// Central-difference check of an arbitrary scalar function of several
/// tensors, all evaluated in 64-bit.
GradCheckResult grad_check_function(const LossBuilder& loss, std::span<const Tensor<double>> inputs, double eps,
                                    double tol);

}  // namespace ldpet::numeric
