#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <random>

#include "ldpet/jcp.hpp"
#include "ldpet/transformer.hpp"

using namespace ldpet;
using namespace ldpet::jcp;

namespace {

ImageGrid noise_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 2.0f);
    ImageGrid g(h, w, 2.0);
    for (auto& v : g.values()) v = u(rng);
    return g;
}

}  // namespace

TEST(Jcp, ZeroInputsZeroHeadsGiveZeroPrior) {
    const JcpConfig cfg;
    const auto params = init_jcp(cfg, 3, true);
    const ImageGrid zero(32, 32, 2.0, 0.0f);
    const auto j = extract_jcp(zero, zero, params, cfg);
    ASSERT_EQ(j.length(), 64u);
    for (float v : j.values) EXPECT_EQ(v, 0.0f);
    const auto c = extract_condition(zero, params, cfg);
    for (float v : c.values) EXPECT_EQ(v, 0.0f);
}

TEST(Jcp, UnshuffledFeatureShape) {
    const JcpConfig cfg;
    numeric::Graph<float> g;
    const auto a = g.leaf(ImageGrid(128, 128, 2.0).to_tensor());
    const auto b = g.leaf(ImageGrid(128, 128, 2.0).to_tensor());
    const numeric::Var<float> both[] = {a, b};
    const auto x = numeric::space_to_channel(numeric::concat<float>(both, 0), cfg.downsample);
    EXPECT_EQ(x.shape(), (numeric::Shape{128, 16, 16}));
    const auto params = init_jcp(cfg, 1);
    EXPECT_EQ(params.get("jcp.in.w").shape(), (numeric::Shape{cfg.width, 128}));
}

TEST(Jcp, LengthIndependentOfGrid) {
    const JcpConfig cfg;
    const auto params = init_jcp(cfg, 4);
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{16, 16}, {64, 48}, {128, 128}}) {
        const auto j = extract_jcp(noise_image(h, w, 1), noise_image(h, w, 2), params, cfg);
        EXPECT_EQ(j.length(), 64u);
        EXPECT_EQ(j.horizontal().size(), 32u);
        EXPECT_EQ(j.vertical().size(), 32u);
    }
}

TEST(Jcp, ShapeErrors) {
    const JcpConfig cfg;
    const auto params = init_jcp(cfg, 4);
    EXPECT_THROW(extract_jcp(noise_image(16, 16, 1), noise_image(16, 24, 2), params, cfg), numeric::ShapeError);
    EXPECT_THROW(extract_jcp(noise_image(20, 20, 1), noise_image(20, 20, 2), params, cfg), numeric::ShapeError);
}

TEST(Jcp, CombineSplitRoundTrip) {
    std::vector<float> h(32), v(32);
    for (int i = 0; i < 32; ++i) {
        h[i] = 0.5f * i;
        v[i] = -1.0f * i;
    }
    const auto j = combine_priors(h, v);
    EXPECT_EQ(j.length(), 64u);
    EXPECT_EQ(j.values[0], h[0]);
    EXPECT_EQ(j.values[32], v[0]);
    const auto [h2, v2] = split_prior(j);
    EXPECT_EQ(h2, h);
    EXPECT_EQ(v2, v);
    const auto z = combine_priors(std::vector<float>(32, 0.0f), std::vector<float>(32, 0.0f));
    EXPECT_EQ(z.norm(), 0.0);
    EXPECT_THROW(combine_priors(h, std::vector<float>(31)), numeric::ShapeError);
}

TEST(Jcp, ConditionIsDeterministic) {
    const JcpConfig cfg;
    const auto params = init_jcp(cfg, 5);
    const auto low = noise_image(32, 32, 9);
    const auto a = extract_condition(low, params, cfg);
    const auto b = extract_condition(low, params, cfg);
    EXPECT_EQ(std::memcmp(a.values.data(), b.values.data(), a.length() * sizeof(float)), 0);
    // The condition differs from the paired extraction: the normal channel is zero-filled.
    const auto paired = extract_jcp(low, low, params, cfg);
    EXPECT_NE(std::memcmp(a.values.data(), paired.values.data(), a.length() * sizeof(float)), 0);
}

TEST(Jcp, ParameterGradientsMatchFiniteDifferences) {
    JcpConfig cfg;
    cfg.width = 16;
    const auto params = init_jcp(cfg, 6);
    const auto normal = noise_image(16, 16, 1).to_tensor().cast<double>();
    const auto low = noise_image(16, 16, 2).to_tensor().cast<double>();
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    numeric::Tensor<double> r({1, cfg.prior_length});
    for (auto& v : r.mutable_data()) v = n(rng);
    const auto loss = [&](nn::Binder<double>& b) {
        auto& g = b.graph();
        auto j = jcp_graph(b, cfg, g.leaf(normal), g.leaf(low));
        return numeric::mean(numeric::mul(j, g.leaf(r)));
    };
    // Every scalar parameter.
    std::vector<nn::Probe> probes;
    for (const auto& name : params.names())
        for (std::size_t i = 0; i < params.get(name).size(); ++i) probes.push_back({name, i});
    const auto res = nn::check_param_gradients(params, loss, probes, 1e-5, 1e-4);
    EXPECT_TRUE(res.passed) << res.max_relative_error << " at " << res.worst;
    EXPECT_EQ(res.checked, params.element_count());
}

TEST(Jcp, OutputVariesContinuously) {
    const JcpConfig cfg;
    const auto params = init_jcp(cfg, 7);
    const auto normal = noise_image(32, 32, 1), low = noise_image(32, 32, 2);
    const auto base = extract_jcp(normal, low, params, cfg);
    std::vector<double> lipschitz;
    for (double delta : {1e-1, 1e-2, 1e-3}) {
        ImageGrid pert = low;
        for (auto& v : pert.values()) v = static_cast<float>(v + delta);
        const auto j = extract_jcp(normal, pert, params, cfg);
        double d = 0.0;
        for (std::size_t i = 0; i < j.length(); ++i) d += (j.values[i] - base.values[i]) * (j.values[i] - base.values[i]);
        lipschitz.push_back(std::sqrt(d) / delta);
    }
    const double L = *std::max_element(lipschitz.begin(), lipschitz.end());
    std::cout << "[jcp] empirical Lipschitz estimate L = " << L << "\n";
    EXPECT_TRUE(std::isfinite(L));
    for (double l : lipschitz) EXPECT_LE(l, 1.5 * lipschitz.front() + 1e-3);
}

// After a short joint training run the zero-filled condition stays on the same
// scale as the paired prior.
TEST(Jcp, ConditionScaleMatchesTrainedPrior) {
    phantom::DatasetConfig dc;
    dc.n_train = 4;
    dc.n_test = 2;
    dc.base.height = dc.base.width = 64;
    dc.base.pixel_mm = 4.0;
    const auto ds = phantom::make_dataset(dc);
    const JcpConfig jc;
    const auto sc = transformer::StageConfig::toy();
    auto params = init_jcp(jc, 1);
    transformer::init_stage_into(params, sc, 2);
    transformer::TrainConfig tc;
    tc.steps = 30;
    tc.batch = 2;
    const auto res = transformer::train_transformer(transformer::pairs_from(ds.train), jc, sc, params, tc);
    for (const auto& smp : ds.test) {
        const auto j = transformer::normalized_prior(smp.truth, smp.low, res.params, jc);
        const auto c = transformer::normalized_condition(smp.low, res.params, jc);
        ASSERT_EQ(j.length(), c.length());
        const double ratio = c.norm() / j.norm();
        EXPECT_GT(ratio, 0.1);
        EXPECT_LT(ratio, 10.0);
    }
}
