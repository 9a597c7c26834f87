#include "ldpet/numeric/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace ldpet::numeric {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check_function(const LossBuilder& loss, std::span<const Tensor<double>> inputs, double eps,
                                    double tol) {
    auto evaluate = [&](const std::vector<Tensor<double>>& values) {
        Graph<double> g;
        std::vector<Var<double>> leaves;
        for (const auto& v : values) leaves.push_back(g.leaf(v));
        return g.value(loss(g, leaves))[0];
    };

    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (const auto& v : inputs) leaves.push_back(g.leaf(v, true));
    const auto out = loss(g, leaves);
    if (g.value(out).size() != 1) throw ShapeError("grad_check_function: loss must be a scalar");
    const auto grads = g.backward(out);

    GradCheckResult res;
    std::vector<Tensor<double>> probe(inputs.begin(), inputs.end());
    for (std::size_t t = 0; t < probe.size(); ++t) {
        const auto& analytic = grads[leaves[t]];
        for (std::size_t i = 0; i < probe[t].size(); ++i) {
            const double orig = probe[t][i];
            probe[t][i] = orig + eps;
            const double up = evaluate(probe);
            probe[t][i] = orig - eps;
            const double down = evaluate(probe);
            probe[t][i] = orig;
            const double numeric = (up - down) / (2.0 * eps);
            res.max_relative_error = std::max(res.max_relative_error, relative_error(analytic[i], numeric));
            ++res.checked;
        }
    }
    res.passed = res.max_relative_error < tol;
    return res;
}

namespace {

Tensor<double> random_input(OpId op, std::size_t index, const Shape& shape, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor<double> t(shape);
    for (auto& v : t.mutable_data()) {
        v = u(rng);
        // keep clear of the kink at 0 so central differences stay valid
        if (op == OpId::abs) v = (v < 0 ? -1.0 : 1.0) * (0.2 + 0.8 * std::abs(v));
        if (op == OpId::div && index == 1) v = 1.0 + 0.5 * v;
    }
    return t;
}

}  // namespace

GradCheckResult grad_check(const OpCase& c, double eps, double tol, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Tensor<double>> inputs;
    for (std::size_t i = 0; i < c.shapes.size(); ++i) inputs.push_back(random_input(c.op, i, c.shapes[i], rng));

    // Output shape is needed for the random projection; build once.
    Tensor<double> weights;
    {
        Graph<double> g;
        std::vector<Var<double>> leaves;
        for (const auto& v : inputs) leaves.push_back(g.leaf(v));
        const auto& y = g.value(g.apply(c.op, leaves, c.attrs));
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        weights = Tensor<double>(y.shape());
        for (auto& v : weights.mutable_data()) v = u(rng);
    }

    const LossBuilder loss = [&](Graph<double>& g, std::span<const Var<double>> xs) {
        auto y = g.apply(c.op, xs, c.attrs);
        auto w = g.leaf(weights);
        return mean(mul(y, w));
    };
    return grad_check_function(loss, inputs, eps, tol);
}

OpCase random_case(OpId op, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto pick = [&](std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    OpCase c;
    c.op = op;
    const std::size_t C = pick(2, 4), H = pick(2, 5), W = pick(2, 5);
    switch (op) {
        case OpId::matmul: {
            const std::size_t m = pick(1, 5), k = pick(1, 5), n = pick(1, 5);
            c.attrs.trans_a = pick(0, 1) == 1;
            c.attrs.trans_b = pick(0, 1) == 1;
            c.shapes = {c.attrs.trans_a ? Shape{k, m} : Shape{m, k}, c.attrs.trans_b ? Shape{n, k} : Shape{k, n}};
            break;
        }
        case OpId::conv1x1: {
            const std::size_t co = pick(1, 4);
            c.shapes = {{C, H, W}, {co, C}, {co}};
            break;
        }
        case OpId::dwconv3x3:
            c.shapes = {{C, H, W}, {C, 3, 3}, {C}};
            break;
        case OpId::add:
        case OpId::sub:
        case OpId::mul:
            c.shapes = {{C, H, W}, pick(0, 1) ? Shape{C, H, W} : Shape{C, 1, 1}};
            break;
        case OpId::scale:
            c.shapes = {{C, H, W}};
            c.attrs.scalar = -1.7;
            break;
        case OpId::div:
            c.shapes = {{C, H, W}, {1}};
            c.attrs.scalar = 1e-3;
            break;
        case OpId::layernorm:
            c.shapes = {{C, H, W}, {C}, {C}};
            break;
        case OpId::softmax:
            c.shapes = {{C, H}};
            c.attrs.axis = static_cast<int>(pick(0, 1));
            break;
        case OpId::gelu:
        case OpId::abs:
        case OpId::sum_sq:
            c.shapes = {{C, H, W}};
            break;
        case OpId::space_to_channel:
            c.attrs.factor = 2;
            c.shapes = {{C, 2 * pick(1, 3), 2 * pick(1, 3)}};
            break;
        case OpId::channel_to_space:
            c.attrs.factor = 2;
            c.shapes = {{4 * C, H, W}};
            break;
        case OpId::reshape:
            c.shapes = {{C, H, W}};
            c.attrs.shape = {C * H, W};
            break;
        case OpId::concat:
            c.attrs.axis = static_cast<int>(pick(0, 2));
            c.shapes = {{C, H, W}, {C, H, W}};
            c.shapes[1][static_cast<std::size_t>(c.attrs.axis)] = pick(1, 3);
            break;
        case OpId::slice:
            c.attrs.axis = 0;
            c.attrs.begin = 1;
            c.attrs.end = C;
            c.shapes = {{C, H, W}};
            break;
        case OpId::mean:
            c.attrs.axis = static_cast<int>(pick(0, 3)) - 1;
            c.shapes = {{C, H, W}};
            break;
        case OpId::l2_normalize:
            c.attrs.axis = 1;
            c.shapes = {{C, H * W}};
            break;
        case OpId::leaf:
            break;
    }
    return c;
}

}  // namespace ldpet::numeric
