#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "ldpet/numeric/gradcheck.hpp"
#include "ldpet/numeric/graph.hpp"

using namespace ldpet::numeric;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.mutable_data()) v = static_cast<T>(u(rng));
    return t;
}

}  // namespace

TEST(NumericForward, GeluOfZeroIsZero) {
    Graph<float> g;
    auto y = gelu(g.leaf(Tensor<float>::scalar(0.0f)));
    EXPECT_EQ(y.value()[0], 0.0f);
}

TEST(NumericForward, SoftmaxOfConstantIsUniform) {
    for (float c : {-3.0f, 0.0f, 7.5f}) {
        Graph<float> g;
        auto y = softmax(g.leaf(Tensor<float>(Shape{3}, c)), 0);
        for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y.value()[i], 1.0f / 3.0f, 1e-7);
    }
}

TEST(NumericForward, SpaceToChannelRampMatchesHandEnumeration) {
    std::vector<float> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[i] = static_cast<float>(i);
    Graph<float> g;
    auto y = space_to_channel(g.leaf(Tensor<float>({1, 4, 4}, ramp)), 2);
    ASSERT_EQ(y.shape(), (Shape{4, 2, 2}));
    // channel index = c*r^2 + dy*r + dx, each channel samples x[2i+dy][2j+dx]
    const std::vector<float> expected = {0, 2, 8, 10, 1, 3, 9, 11, 4, 6, 12, 14, 5, 7, 13, 15};
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y.value()[i], expected[i]) << i;
}

TEST(NumericForward, MatmulMatchesBruteForceAllTransposes) {
    std::mt19937_64 rng(11);
    for (int ta = 0; ta < 2; ++ta)
        for (int tb = 0; tb < 2; ++tb) {
            const std::size_t m = 3, k = 4, n = 5;
            auto A = random_tensor<double>(ta ? Shape{k, m} : Shape{m, k}, rng);
            auto B = random_tensor<double>(tb ? Shape{n, k} : Shape{k, n}, rng);
            Graph<double> g;
            auto C = matmul(g.leaf(A), g.leaf(B), ta == 1, tb == 1);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0;
                    for (std::size_t p = 0; p < k; ++p)
                        s += (ta ? A[p * m + i] : A[i * k + p]) * (tb ? B[j * k + p] : B[p * n + j]);
                    EXPECT_NEAR(C.value()[i * n + j], s, 1e-12);
                }
        }
}

TEST(NumericForward, DwconvMatchesZeroPaddedBruteForce) {
    std::mt19937_64 rng(5);
    auto x = random_tensor<double>({2, 4, 5}, rng);
    auto w = random_tensor<double>({2, 3, 3}, rng);
    Graph<double> g;
    auto y = dwconv3x3(g.leaf(x), g.leaf(w));
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 5; ++j) {
                double s = 0;
                for (int a = -1; a <= 1; ++a)
                    for (int b = -1; b <= 1; ++b) {
                        const int ii = i + a, jj = j + b;
                        if (ii < 0 || ii >= 4 || jj < 0 || jj >= 5) continue;
                        s += w[c * 9 + (a + 1) * 3 + (b + 1)] * x[(c * 4 + ii) * 5 + jj];
                    }
                EXPECT_NEAR(y.value()[(c * 4 + i) * 5 + j], s, 1e-12);
            }
}

TEST(NumericForward, ShapeErrors) {
    Graph<float> g;
    auto a = g.leaf(Tensor<float>({2, 3}));
    auto b = g.leaf(Tensor<float>({2, 3}));
    EXPECT_THROW(matmul(a, b), ShapeError);
    auto img = g.leaf(Tensor<float>({1, 6, 6}));
    EXPECT_THROW(space_to_channel(img, 4), ShapeError);
    EXPECT_THROW(add(img, g.leaf(Tensor<float>({2, 1, 1}))), ShapeError);
    EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
}

TEST(NumericForward, NonFiniteOutputIsAnError) {
    Graph<float> g;
    auto big = g.leaf(Tensor<float>(Shape{2}, 1e30f));
    EXPECT_THROW(mul(big, big), NumericError);
}

TEST(NumericBackward, SumSqGradientIsTwoX) {
    Graph<float> g;
    auto x = g.leaf(Tensor<float>({2}, {1.0f, 2.0f}), true);
    auto grads = g.backward(sum_sq(x));
    EXPECT_EQ(grads[x][0], 2.0f);
    EXPECT_EQ(grads[x][1], 4.0f);
}

TEST(NumericBackward, LayernormOfConstantHasZeroGradient) {
    Graph<float> g;
    auto x = g.leaf(Tensor<float>({4, 3, 3}, 2.5f), true);
    // unit scale: mean over channels of the normalized map is identically 0
    auto w = g.leaf(Tensor<float>({4}, 1.0f));
    auto b = g.leaf(Tensor<float>({4}, {0.1f, 0.2f, 0.3f, 0.4f}));
    auto y = layernorm(x, w, b);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_FLOAT_EQ(y.value()[c * 9], b.value()[c]);
    auto grads = g.backward(mean(y));
    for (float v : grads[x].data()) EXPECT_NEAR(v, 0.0f, 1e-5);
}

TEST(NumericBackward, DwconvMatchesCentralDifferences) {
    std::mt19937_64 rng(2024);
    std::vector<Tensor<double>> inputs = {random_tensor<double>({2, 5, 5}, rng), random_tensor<double>({2, 3, 3}, rng)};
    auto weights = random_tensor<double>({2, 5, 5}, rng);
    const LossBuilder loss = [&](Graph<double>& g, std::span<const Var<double>> xs) {
        return mean(mul(dwconv3x3(xs[0], xs[1]), g.leaf(weights)));
    };
    auto res = grad_check_function(loss, inputs, 1e-3, 1e-6);
    EXPECT_EQ(res.checked, 50u + 18u);
    EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(NumericBackward, UnreachedLeafIsAnError) {
    Graph<float> g;
    auto x = g.leaf(Tensor<float>::scalar(1.0f), true);
    auto y = g.leaf(Tensor<float>::scalar(2.0f), true);
    (void)x;
    auto out = sum_sq(y);
    EXPECT_THROW(g.backward(out), NumericError);
}

TEST(NumericBackward, SeedShapeMustMatch) {
    Graph<float> g;
    auto x = g.leaf(Tensor<float>({3}), true);
    auto y = gelu(x);
    EXPECT_THROW(g.backward(y, Tensor<float>({2})), ShapeError);
}

TEST(GradCheck, SpecExamples) {
    OpCase mm{OpId::matmul, {{4, 3}, {3, 2}}, {}};
    EXPECT_LT(grad_check(mm, 1e-4, 1e-4, 1).max_relative_error, 1e-4);

    OpCase sm{OpId::softmax, {{5}}, {}};
    sm.attrs.axis = 0;
    EXPECT_LT(grad_check(sm, 1e-4, 1e-4, 2).max_relative_error, 1e-4);

    OpCase ge{OpId::gelu, {{16}}, {}};
    auto r = grad_check(ge, 1e-4, 1e-4, 3);
    EXPECT_EQ(r.checked, 16u);
    EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, EveryRegisteredOpOnRandomShapes) {
    for (OpId op : registered_ops())
        for (std::uint64_t seed = 0; seed < 6; ++seed) {
            const auto c = random_case(op, 1000 * static_cast<std::uint64_t>(op) + seed);
            const auto r = grad_check(c, 1e-5, 1e-4, seed);
            EXPECT_TRUE(r.passed) << op_name(op) << " seed " << seed << " err " << r.max_relative_error;
            EXPECT_GT(r.checked, 0u);
        }
}

TEST(NumericProperty, SoftmaxIsADistribution) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const double spread = std::pow(10.0, trial % 5);  // up to 1e4
        auto x = random_tensor<float>({3, 7}, rng, -spread, spread);
        Graph<float> g;
        const int axis = trial % 2;
        auto y = softmax(g.leaf(x), axis);
        const std::size_t outer = axis == 0 ? 7 : 3, len = axis == 0 ? 3 : 7;
        for (std::size_t o = 0; o < outer; ++o) {
            double s = 0;
            for (std::size_t l = 0; l < len; ++l) {
                const float v = axis == 0 ? y.value()[l * 7 + o] : y.value()[o * 7 + l];
                EXPECT_GE(v, 0.0f);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(NumericProperty, ChannelToSpaceInvertsSpaceToChannel) {
    std::mt19937_64 rng(3);
    for (std::size_t r : {1u, 2u, 4u})
        for (int trial = 0; trial < 5; ++trial) {
            const std::size_t C = 1 + trial % 3, H = r * (1 + trial), W = r * (2 + trial % 2);
            auto x = random_tensor<float>({C, H, W}, rng);
            Graph<float> g;
            auto y = channel_to_space(space_to_channel(g.leaf(x), r), r);
            ASSERT_EQ(y.shape(), x.shape());
            EXPECT_EQ(std::memcmp(y.value().data().data(), x.data().data(), x.size() * sizeof(float)), 0);
        }
}

TEST(NumericProperty, LayernormNormalizesEachPixel) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t C = 4 + trial % 8;
        auto x = random_tensor<double>({C, 3, 4}, rng, -3.0, 5.0);
        Graph<double> g;
        auto y = layernorm(g.leaf(x), g.leaf(Tensor<double>({C}, 1.0)), g.leaf(Tensor<double>({C})));
        for (std::size_t p = 0; p < 12; ++p) {
            double m = 0, v = 0;
            for (std::size_t c = 0; c < C; ++c) m += y.value()[c * 12 + p];
            m /= static_cast<double>(C);
            for (std::size_t c = 0; c < C; ++c) v += std::pow(y.value()[c * 12 + p] - m, 2);
            v /= static_cast<double>(C);
            EXPECT_LE(std::abs(m), 1e-6);
            EXPECT_NEAR(v, 1.0, 1e-4);
        }
    }
}

TEST(NumericProperty, BackwardIsBitDeterministic) {
    std::mt19937_64 rng(13);
    auto x = random_tensor<float>({4, 6, 6}, rng);
    auto w1 = random_tensor<float>({8, 4}, rng);
    auto wd = random_tensor<float>({8, 3, 3}, rng);
    auto run = [&] {
        Graph<float> g;
        auto xv = g.leaf(x, true);
        auto a = g.leaf(w1, true);
        auto d = g.leaf(wd, true);
        auto h = gelu(dwconv3x3(conv1x1(xv, a), d));
        auto s = softmax(reshape(h, {8, 36}), 1);
        auto grads = g.backward(sum_sq(s));
        std::vector<float> out(grads[xv].data().begin(), grads[xv].data().end());
        out.insert(out.end(), grads[a].data().begin(), grads[a].data().end());
        out.insert(out.end(), grads[d].data().begin(), grads[d].data().end());
        return out;
    };
    const auto first = run();
    const auto second = run();
    ASSERT_EQ(first.size(), second.size());
    EXPECT_EQ(std::memcmp(first.data(), second.data(), first.size() * sizeof(float)), 0);
}
