#include "ldpet/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>

namespace ldpet::transformer {

using numeric::NumericError;
using numeric::Shape;
using numeric::ShapeError;
using numeric::Tensor;
using numeric::Var;

StageConfig StageConfig::full_scale() {
    StageConfig c;
    c.channels = {48, 96, 192, 384};
    c.blocks = {3, 5, 6, 6};
    return c;
}

void StageConfig::validate() const {
    for (std::size_t l = 0; l < kLevels; ++l) {
        if (heads[l] == 0 || channels[l] == 0) throw NumericError("transformer: heads and channels must be positive");
        if (channels[l] % heads[l])
            throw NumericError("transformer: level " + std::to_string(l) + " channels " + std::to_string(channels[l]) +
                               " not divisible by heads " + std::to_string(heads[l]));
    }
    if (prior_length == 0 || ffn_expansion == 0) throw NumericError("transformer: prior length and expansion must be positive");
}

namespace {

std::string level_block(const char* part, std::size_t level, std::size_t k) {
    return "tf." + std::string(part) + std::to_string(level) + ".b" + std::to_string(k) + ".";
}

}  // namespace

void init_block_into(nn::ParamStore& s, const std::string& p, std::size_t C, std::size_t Cp, std::size_t expansion,
                     std::size_t heads, nn::Initializer& init) {
    for (const char* m : {"mod1.", "mod2."}) {
        s.add(p + m + "w1", init.fan_in({Cp, C}, Cp));
        s.add(p + m + "b1", nn::Initializer::constant({C}, 1.0f));
        s.add(p + m + "w2", init.fan_in({Cp, C}, Cp));
        s.add(p + m + "b2", nn::Initializer::constant({C}, 0.0f));
    }
    for (const char* q : {"attn.q.", "attn.k.", "attn.v."}) {
        s.add(p + q + "w", init.fan_in({C, C}, C));
        s.add(p + q + "dw", init.fan_in({C, 3, 3}, 9));
    }
    s.add(p + "attn.temp", nn::Initializer::constant({heads}, static_cast<float>(std::sqrt(double(C) / heads))));
    s.add(p + "attn.out.w", init.fan_in({C, C}, C));
    const std::size_t hidden = expansion * C;
    for (const char* b : {"ffn.in1.", "ffn.in2."}) {
        s.add(p + b + "w", init.fan_in({hidden, C}, C));
        s.add(p + b + "dw", init.fan_in({hidden, 3, 3}, 9));
    }
    s.add(p + "ffn.out.w", init.fan_in({C, hidden}, hidden));
}

void init_stage_into(nn::ParamStore& s, const StageConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    nn::Initializer init(seed);
    const auto& C = cfg.channels;
    const std::size_t Cp = cfg.prior_length, ex = cfg.ffn_expansion;
    s.add("tf.embed.w", init.fan_in({C[0], 1}, 1));
    s.add("tf.embed.b", nn::Initializer::constant({C[0]}, 0.0f));
    s.add("tf.embed.dw", init.fan_in({C[0], 3, 3}, 9));
    for (std::size_t l = 0; l + 1 < kLevels; ++l) {
        for (std::size_t k = 0; k < cfg.blocks[l]; ++k)
            init_block_into(s, level_block("enc", l, k), C[l], Cp, ex, cfg.heads[l], init);
        s.add("tf.down" + std::to_string(l) + ".w", init.fan_in({C[l + 1], 4 * C[l]}, 4 * C[l]));
    }
    for (std::size_t k = 0; k < cfg.blocks[3]; ++k) init_block_into(s, level_block("mid", 3, k), C[3], Cp, ex, cfg.heads[3], init);
    for (std::size_t l = kLevels - 1; l-- > 0;) {
        s.add("tf.up" + std::to_string(l) + ".w", init.fan_in({4 * C[l], C[l + 1]}, C[l + 1]));
        s.add("tf.fuse" + std::to_string(l) + ".w", init.fan_in({C[l], 2 * C[l]}, 2 * C[l]));
        for (std::size_t k = 0; k < cfg.blocks[l]; ++k)
            init_block_into(s, level_block("dec", l, k), C[l], Cp, ex, cfg.heads[l], init);
    }
    s.add("tf.head.w", nn::Initializer::constant({1, C[0]}, 0.0f));
    s.add("tf.head.b", nn::Initializer::constant({1}, 0.0f));
}

nn::ParamStore init_stage(const StageConfig& cfg, std::uint64_t seed) {
    nn::ParamStore s;
    init_stage_into(s, cfg, seed);
    return s;
}

template <typename T>
Var<T> modulate(nn::Binder<T>& p, const std::string& prefix, Var<T> a, Var<T> j) {
    using namespace numeric;
    auto& g = p.graph();
    const std::size_t C = a.shape()[0];
    if (j.shape().size() != 2 || j.shape()[0] != 1) throw ShapeError("modulate: J must be 1 x C'");
    auto s1 = reshape(add(matmul(j, p(prefix + "w1")), p(prefix + "b1")), {C, 1, 1});
    auto s2 = reshape(add(matmul(j, p(prefix + "w2")), p(prefix + "b2")), {C, 1, 1});
    auto ones = g.leaf(Tensor<T>(Shape{C}, T(1)));
    auto zeros = g.leaf(Tensor<T>(Shape{C}, T(0)));
    return add(mul(layernorm(a, ones, zeros), s1), s2);
}

template <typename T>
Var<T> mta(nn::Binder<T>& p, const std::string& prefix, Var<T> a_mod, Var<T> a, std::size_t heads,
           std::vector<Var<T>>* maps) {
    using namespace numeric;
    const Shape s = a_mod.shape();
    const std::size_t C = s[0], P = s[1] * s[2];
    if (heads == 0 || C % heads) throw ShapeError("mta: channels " + std::to_string(C) + " not divisible by heads");
    auto proj = [&](const char* n) {
        const std::string base = prefix + "attn." + n + ".";
        return reshape(dwconv3x3(conv1x1(a_mod, p(base + "w")), p(base + "dw")), {C, P});
    };
    auto q = proj("q"), k = proj("k"), v = proj("v");
    auto temp = p(prefix + "attn.temp");
    const std::size_t d = C / heads;
    std::vector<Var<T>> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        auto qh = heads == 1 ? q : slice(q, 0, h * d, (h + 1) * d);
        auto kh = heads == 1 ? k : slice(k, 0, h * d, (h + 1) * d);
        auto vh = heads == 1 ? v : slice(v, 0, h * d, (h + 1) * d);
        auto qn = l2_normalize(qh, 1), kn = l2_normalize(kh, 1);
        auto gamma = heads == 1 ? temp : slice(temp, 0, h, h + 1);
        auto attn = softmax(div(matmul(kn, qn, false, true), gamma, kMinTemperature), 1);
        if (maps) maps->push_back(attn);
        outs.push_back(matmul(attn, vh, true, false));
    }
    auto o = heads == 1 ? outs[0] : concat<T>(outs, 0);
    return add(conv1x1(reshape(o, s), p(prefix + "attn.out.w")), a);
}

template <typename T>
Var<T> gffn(nn::Binder<T>& p, const std::string& prefix, Var<T> a_mod, Var<T> a) {
    using namespace numeric;
    auto g1 = gelu(dwconv3x3(conv1x1(a_mod, p(prefix + "ffn.in1.w")), p(prefix + "ffn.in1.dw")));
    auto g2 = dwconv3x3(conv1x1(a_mod, p(prefix + "ffn.in2.w")), p(prefix + "ffn.in2.dw"));
    return add(conv1x1(mul(g1, g2), p(prefix + "ffn.out.w")), a);
}

template <typename T>
Var<T> block(nn::Binder<T>& p, const std::string& prefix, Var<T> a, Var<T> j, std::size_t heads) {
    auto a1 = mta(p, prefix, modulate(p, prefix + "mod1.", a, j), a, heads);
    return gffn(p, prefix, modulate(p, prefix + "mod2.", a1, j), a1);
}

template <typename T>
Var<T> unet_graph(nn::Binder<T>& p, const StageConfig& cfg, Var<T> low, Var<T> j) {
    using namespace numeric;
    const Shape s = low.shape();
    if (s.size() != 3 || s[0] != 1) throw ShapeError("unet: input must be 1 x H x W");
    if (s[1] % 8 || s[2] % 8) throw ShapeError("unet: H and W must be divisible by 8, got " + to_string(s));
    auto x = dwconv3x3(conv1x1(low, p("tf.embed.w"), p("tf.embed.b")), p("tf.embed.dw"));
    std::array<Var<T>, kLevels> skips;
    for (std::size_t l = 0; l + 1 < kLevels; ++l) {
        for (std::size_t k = 0; k < cfg.blocks[l]; ++k) x = block(p, level_block("enc", l, k), x, j, cfg.heads[l]);
        skips[l] = x;
        x = conv1x1(space_to_channel(x, 2), p("tf.down" + std::to_string(l) + ".w"));
    }
    for (std::size_t k = 0; k < cfg.blocks[3]; ++k) x = block(p, level_block("mid", 3, k), x, j, cfg.heads[3]);
    for (std::size_t l = kLevels - 1; l-- > 0;) {
        x = channel_to_space(conv1x1(x, p("tf.up" + std::to_string(l) + ".w")), 2);
        const Var<T> both[] = {x, skips[l]};
        x = conv1x1(concat<T>(both, 0), p("tf.fuse" + std::to_string(l) + ".w"));
        for (std::size_t k = 0; k < cfg.blocks[l]; ++k) x = block(p, level_block("dec", l, k), x, j, cfg.heads[l]);
    }
    return add(low, conv1x1(x, p("tf.head.w"), p("tf.head.b")));
}

std::vector<Shape> trace_shapes(const StageConfig& cfg, std::size_t height, std::size_t width) {
    cfg.validate();
    if (height % 8 || width % 8) throw ShapeError("unet: H and W must be divisible by 8");
    std::vector<Shape> out;
    for (std::size_t l = 0; l < kLevels; ++l) out.push_back({cfg.channels[l], height >> l, width >> l});
    return out;
}

ImageGrid unet_forward(const ImageGrid& low, const jcp::CompactPrior& j, const StageConfig& cfg,
                       const nn::ParamStore& params) {
    if (j.length() != cfg.prior_length) throw ShapeError("unet: prior length mismatch");
    numeric::Graph<float> g;
    nn::Binder<float> b(g, params, false);
    auto jv = g.leaf(Tensor<float>(Shape{1, j.length()}, j.values));
    auto out = unet_graph(b, cfg, g.leaf(low.to_tensor()), jv);
    return ImageGrid::from_tensor(out.value(), low.pixel_mm());
}

double intensity_scale(const ImageGrid& low) {
    double s = 0.0;
    std::size_t n = 0;
    for (float v : low.values())
        if (v > 0) {
            s += v;
            ++n;
        }
    return n ? s / n : 1.0;
}

namespace {

ImageGrid scaled(const ImageGrid& g, double k) {
    ImageGrid out = g;
    for (auto& v : out.values()) v = static_cast<float>(v * k);
    return out;
}

}  // namespace

jcp::CompactPrior normalized_prior(const ImageGrid& normal, const ImageGrid& low, const nn::ParamStore& params,
                                   const jcp::JcpConfig& cfg) {
    const double s = intensity_scale(low);
    return jcp::extract_jcp(scaled(normal, 1.0 / s), scaled(low, 1.0 / s), params, cfg);
}

jcp::CompactPrior normalized_condition(const ImageGrid& low, const nn::ParamStore& params, const jcp::JcpConfig& cfg) {
    return jcp::extract_condition(scaled(low, 1.0 / intensity_scale(low)), params, cfg);
}

ImageGrid restore(const ImageGrid& low, const jcp::CompactPrior& j, const StageConfig& cfg,
                  const nn::ParamStore& params) {
    const double s = intensity_scale(low);
    return scaled(unet_forward(scaled(low, 1.0 / s), j, cfg, params), s);
}

std::vector<PairedSample> pairs_from(const std::vector<phantom::Sample>& samples) {
    std::vector<PairedSample> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back({s.truth, s.low});
    return out;
}

template <typename T>
Var<T> batch_loss(nn::Binder<T>& p, const jcp::JcpConfig& jcfg, const StageConfig& scfg,
                  const std::vector<const PairedSample*>& batch) {
    using namespace numeric;
    if (batch.empty()) throw NumericError("transformer: empty batch");
    auto& g = p.graph();
    std::optional<Var<T>> total;
    for (const auto* smp : batch) {
        const double s = intensity_scale(smp->low);
        auto normal = g.leaf(scaled(smp->normal, 1.0 / s).to_tensor().template cast<T>());
        auto low = g.leaf(scaled(smp->low, 1.0 / s).to_tensor().template cast<T>());
        auto j = jcp::jcp_graph(p, jcfg, normal, low);
        auto l = mean(abs(sub(unet_graph(p, scfg, low, j), normal)));
        total = total ? add(*total, l) : l;
    }
    return scale(*total, 1.0 / static_cast<double>(batch.size()));
}

TrainResult train_transformer(const std::vector<PairedSample>& data, const jcp::JcpConfig& jcfg,
                              const StageConfig& scfg, nn::ParamStore params, const TrainConfig& tcfg,
                              const std::function<void(std::size_t, double)>& on_step) {
    TrainResult result;
    if (tcfg.steps > 0 && data.empty()) throw NumericError("train-transformer: empty training set");
    nn::Adam adam(tcfg.adam);
    std::mt19937_64 rng(tcfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    const std::size_t bsz = std::max<std::size_t>(1, std::min(tcfg.batch, data.size()));
    for (std::size_t step = 0; step < tcfg.steps; ++step) {
        std::vector<const PairedSample*> batch;
        while (batch.size() < bsz) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(&data[order[cursor++]]);
        }
        numeric::Graph<float> g;
        nn::Binder<float> b(g, params, true);
        auto loss = batch_loss(b, jcfg, scfg, batch);
        const double lv = loss.value()[0];
        if (!std::isfinite(lv))
            throw NumericError("train-transformer: loss became non-finite at step " + std::to_string(step));
        if (tcfg.cosine_decay) adam.set_lr(nn::cosine_lr(tcfg.adam.lr, step, tcfg.steps));
        adam.step(params, b.gradients(g.backward(loss)));
        result.loss_curve.push_back(lv);
        if (on_step) on_step(step, lv);
    }
    result.params = std::move(params);
    return result;
}

void to_json(nlohmann::json& j, const StageConfig& c) {
    j = {{"heads", c.heads},
         {"channels", c.channels},
         {"blocks", c.blocks},
         {"prior_length", c.prior_length},
         {"ffn_expansion", c.ffn_expansion}};
}

void from_json(const nlohmann::json& j, StageConfig& c) {
    c = StageConfig{};
    c.heads = j.value("heads", c.heads);
    c.channels = j.value("channels", c.channels);
    c.blocks = j.value("blocks", c.blocks);
    c.prior_length = j.value("prior_length", c.prior_length);
    c.ffn_expansion = j.value("ffn_expansion", c.ffn_expansion);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"steps", c.steps},
         {"batch", c.batch},
         {"lr", c.adam.lr},
         {"beta1", c.adam.beta1},
         {"beta2", c.adam.beta2},
         {"adam_eps", c.adam.eps},
         {"cosine_decay", c.cosine_decay},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("adam_eps", c.adam.eps);
    c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
    c.seed = j.value("seed", c.seed);
}

#define LDPET_INSTANTIATE(T)                                                                                       \
    template Var<T> modulate(nn::Binder<T>&, const std::string&, Var<T>, Var<T>);                                \
    template Var<T> mta(nn::Binder<T>&, const std::string&, Var<T>, Var<T>, std::size_t, std::vector<Var<T>>*);  \
    template Var<T> gffn(nn::Binder<T>&, const std::string&, Var<T>, Var<T>);                                    \
    template Var<T> block(nn::Binder<T>&, const std::string&, Var<T>, Var<T>, std::size_t);                      \
    template Var<T> unet_graph(nn::Binder<T>&, const StageConfig&, Var<T>, Var<T>);                              \
    template Var<T> batch_loss(nn::Binder<T>&, const jcp::JcpConfig&, const StageConfig&,                        \
                               const std::vector<const PairedSample*>&);

LDPET_INSTANTIATE(float)
LDPET_INSTANTIATE(double)

}  // namespace ldpet::transformer
