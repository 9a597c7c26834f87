#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <random>

#include "ldpet/transformer.hpp"

using namespace ldpet;
using namespace ldpet::transformer;
using numeric::Shape;
using numeric::Tensor;

namespace {

Tensor<float> random_tensor(Shape s, std::uint64_t seed, float scale = 1.0f) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(0.0f, scale);
    Tensor<float> t(std::move(s));
    for (auto& v : t.mutable_data()) v = n(rng);
    return t;
}

nn::ParamStore block_params(std::size_t C, std::size_t Cp, std::size_t heads, std::uint64_t seed) {
    nn::ParamStore s;
    nn::Initializer init(seed);
    init_block_into(s, "b.", C, Cp, 2, heads, init);
    return s;
}

void fill(nn::ParamStore& s, const std::string& name, float v) {
    for (auto& e : s.get(name).mutable_data()) e = v;
}

// Plain-loop references in double.
using Vec = std::vector<double>;

Vec conv1x1_ref(const Vec& x, const Tensor<float>& w, std::size_t P) {
    const std::size_t co = w.dim(0), ci = w.dim(1);
    Vec out(co * P, 0.0);
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < ci; ++i)
            for (std::size_t p = 0; p < P; ++p) out[o * P + p] += double(w[o * ci + i]) * x[i * P + p];
    return out;
}

Vec dwconv_ref(const Vec& x, const Tensor<float>& w, std::size_t C, std::size_t H, std::size_t W) {
    Vec out(C * H * W, 0.0);
    for (std::size_t c = 0; c < C; ++c)
        for (long y = 0; y < long(H); ++y)
            for (long xx = 0; xx < long(W); ++xx) {
                double acc = 0.0;
                for (long dy = -1; dy <= 1; ++dy)
                    for (long dx = -1; dx <= 1; ++dx) {
                        const long yy = y + dy, xs = xx + dx;
                        if (yy < 0 || xs < 0 || yy >= long(H) || xs >= long(W)) continue;
                        acc += double(w[c * 9 + (dy + 1) * 3 + (dx + 1)]) * x[(c * H + yy) * W + xs];
                    }
                out[(c * H + y) * W + xx] = acc;
            }
    return out;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Vec modulate_ref(const Vec& a, const Vec& j, const nn::ParamStore& s, const std::string& p, std::size_t C,
                 std::size_t P) {
    const std::size_t Cp = j.size();
    Vec s1(C), s2(C), out(C * P);
    for (std::size_t c = 0; c < C; ++c) {
        s1[c] = s.get(p + "b1")[c];
        s2[c] = s.get(p + "b2")[c];
        for (std::size_t k = 0; k < Cp; ++k) {
            s1[c] += j[k] * s.get(p + "w1")[k * C + c];
            s2[c] += j[k] * s.get(p + "w2")[k * C + c];
        }
    }
    for (std::size_t q = 0; q < P; ++q) {
        double mu = 0, var = 0;
        for (std::size_t c = 0; c < C; ++c) mu += a[c * P + q];
        mu /= C;
        for (std::size_t c = 0; c < C; ++c) var += (a[c * P + q] - mu) * (a[c * P + q] - mu);
        var /= C;
        for (std::size_t c = 0; c < C; ++c)
            out[c * P + q] = s1[c] * (a[c * P + q] - mu) / std::sqrt(var + 1e-5) + s2[c];
    }
    return out;
}

Vec to_vec(const Tensor<float>& t) { return Vec(t.data().begin(), t.data().end()); }

struct Fixture {
    numeric::Graph<float> g;
    nn::ParamStore s;
    nn::Binder<float> b;
    Fixture(nn::ParamStore store) : s(std::move(store)), b(g, s, false) {}
};

}  // namespace

TEST(Modulate, IdentityModulationIsLayerNorm) {
    const std::size_t C = 6, Cp = 8;
    Fixture f(block_params(C, Cp, 1, 1));
    fill(f.s, "b.mod1.w1", 0.0f);
    fill(f.s, "b.mod1.w2", 0.0f);
    const auto a = random_tensor({C, 4, 5}, 2);
    const auto j = random_tensor({1, Cp}, 3);
    const auto out = modulate(f.b, "b.mod1.", f.g.leaf(a), f.g.leaf(j)).value();
    const auto ref = modulate_ref(to_vec(a), to_vec(j), f.s, "b.mod1.", C, 20);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-6);
    // Per-pixel layernorm statistics.
    for (std::size_t p = 0; p < 20; ++p) {
        double mu = 0;
        for (std::size_t c = 0; c < C; ++c) mu += out[c * 20 + p];
        EXPECT_NEAR(mu / C, 0.0, 1e-6);
    }
}

TEST(Modulate, ZeroScaleGivesConstantChannels) {
    const std::size_t C = 4, Cp = 8;
    Fixture f(block_params(C, Cp, 1, 4));
    fill(f.s, "b.mod1.w1", 0.0f);
    fill(f.s, "b.mod1.b1", 0.0f);
    const auto j = random_tensor({1, Cp}, 5);
    const auto out1 = modulate(f.b, "b.mod1.", f.g.leaf(random_tensor({C, 3, 3}, 6)), f.g.leaf(j)).value();
    const auto out2 = modulate(f.b, "b.mod1.", f.g.leaf(random_tensor({C, 3, 3}, 7)), f.g.leaf(j)).value();
    for (std::size_t c = 0; c < C; ++c) {
        double shift = f.s.get("b.mod1.b2")[c];
        for (std::size_t k = 0; k < Cp; ++k) shift += double(j[k]) * f.s.get("b.mod1.w2")[k * C + c];
        for (std::size_t p = 0; p < 9; ++p) {
            EXPECT_NEAR(out1[c * 9 + p], shift, 1e-6);
            EXPECT_EQ(out1[c * 9 + p], out2[c * 9 + p]);
        }
    }
}

TEST(Modulate, RandomCaseMatchesBruteForce) {
    const std::size_t C = 5, Cp = 6;
    Fixture f(block_params(C, Cp, 1, 8));
    const auto a = random_tensor({C, 3, 4}, 9);
    const auto j = random_tensor({1, Cp}, 10);
    const auto out = modulate(f.b, "b.mod2.", f.g.leaf(a), f.g.leaf(j)).value();
    const auto ref = modulate_ref(to_vec(a), to_vec(j), f.s, "b.mod2.", C, 12);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-6);
}

TEST(Mta, AttentionRowsAreDistributions) {
    const std::size_t C = 8;
    Fixture f(block_params(C, 4, 2, 11));
    const auto a = random_tensor({C, 6, 6}, 12, 3.0f);
    std::vector<numeric::Var<float>> maps;
    mta(f.b, "b.", f.g.leaf(a), f.g.leaf(a), 2, &maps);
    ASSERT_EQ(maps.size(), 2u);
    for (const auto& m : maps) {
        EXPECT_EQ(m.shape(), (Shape{4, 4}));
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 4; ++c) {
                EXPECT_GE(m.value()[r * 4 + c], 0.0f);
                s += m.value()[r * 4 + c];
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Mta, MapIsChannelByChannelIndependentOfPixels) {
    const std::size_t C = 48;
    for (std::size_t side : {4, 8, 12}) {
        Fixture f(block_params(C, 4, 1, 13));
        const auto a = random_tensor({C, side, side}, 14);
        std::vector<numeric::Var<float>> maps;
        mta(f.b, "b.", f.g.leaf(a), f.g.leaf(a), 1, &maps);
        ASSERT_EQ(maps.size(), 1u);
        EXPECT_EQ(maps[0].shape(), (Shape{48, 48}));
    }
}

TEST(Mta, ZeroOutputProjectionIsResidualIdentity) {
    const std::size_t C = 8;
    Fixture f(block_params(C, 4, 4, 15));
    fill(f.s, "b.attn.out.w", 0.0f);
    const auto a = random_tensor({C, 5, 7}, 16);
    const auto am = random_tensor({C, 5, 7}, 17);
    const auto out = mta(f.b, "b.", f.g.leaf(am), f.g.leaf(a), 4).value();
    EXPECT_EQ(out.vec(), a.vec());
}

TEST(Mta, RandomCaseMatchesBruteForce) {
    const std::size_t C = 4, H = 3, W = 5, P = H * W, heads = 2, d = 2;
    Fixture f(block_params(C, 4, heads, 18));
    f.s.get("b.attn.temp")[1] = 0.7f;
    const auto a = random_tensor({C, H, W}, 19);
    const auto am = random_tensor({C, H, W}, 20);
    const auto out = mta(f.b, "b.", f.g.leaf(am), f.g.leaf(a), heads).value();
    auto proj = [&](const char* n) {
        const std::string base = std::string("b.attn.") + n + ".";
        return dwconv_ref(conv1x1_ref(to_vec(am), f.s.get(base + "w"), P), f.s.get(base + "dw"), C, H, W);
    };
    const Vec q = proj("q"), k = proj("k"), v = proj("v");
    Vec o(C * P, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        auto row_norm = [&](const Vec& m, std::size_t r) {
            double s = 0;
            for (std::size_t p = 0; p < P; ++p) s += m[r * P + p] * m[r * P + p];
            return std::sqrt(s);
        };
        const double gamma = f.s.get("b.attn.temp")[h];
        double logits[d][d], attn[d][d];
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t jx = 0; jx < d; ++jx) {
                const std::size_t ri = h * d + i, rj = h * d + jx;
                double dot = 0;
                for (std::size_t p = 0; p < P; ++p) dot += k[ri * P + p] * q[rj * P + p];
                logits[i][jx] = dot / (row_norm(k, ri) * row_norm(q, rj)) / gamma;
            }
        for (std::size_t i = 0; i < d; ++i) {
            double z = 0;
            for (std::size_t jx = 0; jx < d; ++jx) z += std::exp(logits[i][jx]);
            for (std::size_t jx = 0; jx < d; ++jx) attn[i][jx] = std::exp(logits[i][jx]) / z;
        }
        // out_h = attn^T . V_h
        for (std::size_t jx = 0; jx < d; ++jx)
            for (std::size_t p = 0; p < P; ++p) {
                double acc = 0;
                for (std::size_t i = 0; i < d; ++i) acc += attn[i][jx] * v[(h * d + i) * P + p];
                o[(h * d + jx) * P + p] = acc;
            }
    }
    const Vec proj_out = conv1x1_ref(o, f.s.get("b.attn.out.w"), P);
    for (std::size_t i = 0; i < C * P; ++i) EXPECT_NEAR(out[i], proj_out[i] + a[i], 1e-5);
}

TEST(Mta, IndivisibleHeadsRejected) {
    Fixture f(block_params(6, 4, 1, 21));
    const auto a = random_tensor({6, 4, 4}, 22);
    EXPECT_THROW(mta(f.b, "b.", f.g.leaf(a), f.g.leaf(a), 4), numeric::ShapeError);
    StageConfig bad;
    bad.heads = {1, 3, 4, 8};
    EXPECT_THROW(bad.validate(), numeric::NumericError);
}

TEST(Gffn, ZeroFirstBranchGatesOff) {
    const std::size_t C = 4;
    Fixture f(block_params(C, 4, 1, 23));
    fill(f.s, "b.ffn.in1.w", 0.0f);
    const auto a = random_tensor({C, 4, 4}, 24);
    const auto out = gffn(f.b, "b.", f.g.leaf(random_tensor({C, 4, 4}, 25)), f.g.leaf(a)).value();
    EXPECT_EQ(out.vec(), a.vec());
}

TEST(Gffn, ZeroInputThroughIdentityConvs) {
    const std::size_t C = 3;
    Fixture f(block_params(C, 4, 1, 26));
    for (const char* n : {"b.ffn.in1.w", "b.ffn.in2.w", "b.ffn.out.w"}) {
        auto& w = f.s.get(n);
        fill(f.s, n, 0.0f);
        for (std::size_t i = 0; i < std::min(w.dim(0), w.dim(1)); ++i) w[i * w.dim(1) + i] = 1.0f;
    }
    fill(f.s, "b.ffn.in1.dw", 0.0f);
    fill(f.s, "b.ffn.in2.dw", 0.0f);
    const auto a = random_tensor({C, 4, 4}, 27);
    const auto out = gffn(f.b, "b.", f.g.leaf(Tensor<float>({C, 4, 4}, 0.0f)), f.g.leaf(a)).value();
    EXPECT_EQ(out.vec(), a.vec());
}

TEST(Gffn, RandomCaseMatchesBruteForce) {
    const std::size_t C = 3, H = 4, W = 3, P = H * W, hidden = 6;
    Fixture f(block_params(C, 4, 1, 28));
    const auto a = random_tensor({C, H, W}, 29);
    const auto am = random_tensor({C, H, W}, 30);
    const auto out = gffn(f.b, "b.", f.g.leaf(am), f.g.leaf(a)).value();
    const Vec b1 = dwconv_ref(conv1x1_ref(to_vec(am), f.s.get("b.ffn.in1.w"), P), f.s.get("b.ffn.in1.dw"), hidden, H, W);
    const Vec b2 = dwconv_ref(conv1x1_ref(to_vec(am), f.s.get("b.ffn.in2.w"), P), f.s.get("b.ffn.in2.dw"), hidden, H, W);
    Vec gated(hidden * P);
    for (std::size_t i = 0; i < gated.size(); ++i) gated[i] = gelu_ref(b1[i]) * b2[i];
    const Vec o = conv1x1_ref(gated, f.s.get("b.ffn.out.w"), P);
    for (std::size_t i = 0; i < C * P; ++i) EXPECT_NEAR(out[i], o[i] + a[i], 1e-6);
}

TEST(Unet, ZeroHeadReturnsLowExactly) {
    const auto cfg = StageConfig::toy();
    const auto params = init_stage(cfg, 31);
    ImageGrid low(32, 32, 2.0);
    const auto t = random_tensor({1, 32, 32}, 32);
    for (std::size_t i = 0; i < low.size(); ++i) low[i] = std::abs(t[i]);
    jcp::CompactPrior j{random_tensor({64}, 33).vec()};
    const auto out = unet_forward(low, j, cfg, params);
    EXPECT_EQ(std::memcmp(out.values().data(), low.values().data(), low.size() * sizeof(float)), 0);
}

TEST(Unet, ToyConfigShapeAndRuntime) {
    const auto cfg = StageConfig::toy();
    auto params = init_stage(cfg, 34);
    for (auto& v : params.get("tf.head.w").mutable_data()) v = 0.1f;
    jcp::CompactPrior j{random_tensor({64}, 35).vec()};
    const ImageGrid low(32, 32, 2.0, 1.0f);
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = unet_forward(low, j, cfg, params);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EXPECT_EQ(out.height(), 32u);
    EXPECT_EQ(out.width(), 32u);
    EXPECT_LT(secs, 1.0);
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 8}, {16, 16}, {24, 40}}) {
        const auto o = unet_forward(ImageGrid(h, w, 2.0, 1.0f), j, cfg, params);
        EXPECT_EQ(o.height(), h);
        EXPECT_EQ(o.width(), w);
    }
    EXPECT_THROW(unet_forward(ImageGrid(20, 20, 2.0, 1.0f), j, cfg, params), numeric::ShapeError);
}

TEST(Unet, FullScaleConfigInstantiable) {
    const auto cfg = StageConfig::full_scale();
    const auto params = init_stage(cfg, 36);
    const auto shapes = trace_shapes(cfg, 256, 256);
    ASSERT_EQ(shapes.size(), 4u);
    EXPECT_EQ(shapes[0], (Shape{48, 256, 256}));
    EXPECT_EQ(shapes[3], (Shape{384, 32, 32}));
    // Parameter shapes agree with the traced channel counts.
    EXPECT_EQ(params.get("tf.down0.w").shape(), (Shape{96, 4 * 48}));
    EXPECT_EQ(params.get("tf.mid3.b5.attn.q.w").shape(), (Shape{384, 384}));
    EXPECT_EQ(params.get("tf.enc0.b2.attn.temp").shape(), (Shape{1}));
    EXPECT_EQ(params.get("tf.mid3.b0.attn.temp").shape(), (Shape{8}));
    EXPECT_FALSE(params.contains("tf.enc0.b3.attn.q.w"));
    std::cout << "[transformer] full-scale config parameters: " << params.element_count() << "\n";
    // A real forward pass at a reduced grid exercises every block.
    jcp::CompactPrior j{random_tensor({64}, 37).vec()};
    const auto out = unet_forward(ImageGrid(16, 16, 2.0, 1.0f), j, cfg, params);
    EXPECT_EQ(out.height(), 16u);
}

TEST(Unet, EndToEndLossGradientMatchesFiniteDifferences) {
    jcp::JcpConfig jc;
    jc.width = 16;
    const auto sc = StageConfig::toy();
    auto params = jcp::init_jcp(jc, 38);
    init_stage_into(params, sc, 39);
    for (auto& v : params.get("tf.head.w").mutable_data()) v = 0.2f;
    std::mt19937_64 rng(40);
    std::uniform_real_distribution<float> u(0.5f, 2.0f);
    PairedSample smp{ImageGrid(16, 16, 2.0), ImageGrid(16, 16, 2.0)};
    for (std::size_t i = 0; i < 256; ++i) {
        smp.normal[i] = u(rng);
        smp.low[i] = u(rng);
    }
    const std::vector<const PairedSample*> batch{&smp};
    const auto loss = [&](nn::Binder<double>& b) { return batch_loss(b, jc, sc, batch); };
    const auto probes = nn::sample_probes(params, 10, 41);
    const auto res = check_param_gradients(params, loss, probes, 1e-6, 1e-3);
    EXPECT_TRUE(res.passed) << res.max_relative_error << " at " << res.worst;
    EXPECT_EQ(res.checked, 10u);
}

TEST(Train, ZeroStepsReturnInitialization) {
    const jcp::JcpConfig jc;
    const auto sc = StageConfig::toy();
    auto params = jcp::init_jcp(jc, 42);
    init_stage_into(params, sc, 43);
    TrainConfig tc;
    tc.steps = 0;
    const auto res = train_transformer({}, jc, sc, params, tc);
    EXPECT_TRUE(res.params == params);
    EXPECT_TRUE(res.loss_curve.empty());
}

TEST(Train, AdamDefaultsMatchStage) {
    const TrainConfig tc;
    EXPECT_EQ(tc.adam.beta1, 0.9);
    EXPECT_EQ(tc.adam.beta2, 0.99);
}

TEST(Train, OverfitsOneSample) {
    phantom::PhantomSpec spec = phantom::PhantomSpec::nema_default();
    spec.height = spec.width = 32;
    spec.pixel_mm = 8.0;
    spec.spheres.erase(spec.spheres.begin(), spec.spheres.begin() + 2);
    const auto truth = phantom::generate_phantom(spec);
    const auto low = phantom::simulate_lowdose(truth, {0.25, 20.0, 1});
    const std::vector<PairedSample> data{{truth, low}};
    const jcp::JcpConfig jc;
    const auto sc = StageConfig::toy();
    auto params = jcp::init_jcp(jc, 44);
    init_stage_into(params, sc, 45);
    TrainConfig tc;
    tc.steps = 500;
    tc.batch = 1;
    tc.adam.lr = 5e-3;
    const auto res = train_transformer(data, jc, sc, params, tc);
    const double best = *std::min_element(res.loss_curve.begin(), res.loss_curve.end());
    std::cout << "[transformer] overfit loss " << res.loss_curve.front() << " -> " << res.loss_curve.back()
              << " (best " << best << ")\n";
    EXPECT_LT(res.loss_curve.back(), 0.01 * res.loss_curve.front());
}

// Transposed attention cost is linear in the pixel count at fixed channels.
TEST(Mta, WallTimeScalesLinearlyInPixels) {
    const std::size_t C = 16;
    Fixture f(block_params(C, 4, 2, 46));
    auto time_at = [&](std::size_t side) {
        const auto a = random_tensor({C, side, side}, 47);
        double best = 1e9;
        for (int rep = 0; rep < 5; ++rep) {
            numeric::Graph<float> g;
            nn::Binder<float> b(g, f.s, false);
            const auto t0 = std::chrono::steady_clock::now();
            mta(b, "b.", g.leaf(a), g.leaf(a), 2);
            best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        }
        return best;
    };
    const double t32 = time_at(32), t64 = time_at(64);
    std::cout << "[transformer] mta 32x32 " << t32 << " s, 64x64 " << t64 << " s, ratio " << t64 / t32 << "\n";
    EXPECT_LE(t64 / t32, 4.0 * 1.3);
}
