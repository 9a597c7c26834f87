#include "ldpet/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>

namespace ldpet::diffusion {

using numeric::Shape;
using numeric::Tensor;
using numeric::Var;

DiffusionSchedule make_schedule(const std::vector<double>& betas) {
    if (betas.empty()) throw DiffusionError("schedule: T must be >= 1");
    DiffusionSchedule s;
    s.T = betas.size();
    s.beta = {0.0};
    s.alpha = {1.0};
    s.alpha_bar = {1.0};
    for (double b : betas) {
        if (!(b > 0.0 && b < 1.0)) throw DiffusionError("schedule: every beta must lie in (0, 1)");
        s.beta.push_back(b);
        s.alpha.push_back(1.0 - b);
        s.alpha_bar.push_back(s.alpha_bar.back() * (1.0 - b));
    }
    return s;
}

DiffusionSchedule make_schedule(std::size_t T, BetaSpec spec) {
    if (T == 0) throw DiffusionError("schedule: T must be >= 1");
    if (!(spec.beta_min > 0.0 && spec.beta_min < 1.0 && spec.beta_max > 0.0 && spec.beta_max < 1.0))
        throw DiffusionError("schedule: beta range must lie in (0, 1)");
    if (spec.beta_max < spec.beta_min) throw DiffusionError("schedule: beta_max < beta_min");
    std::vector<double> betas(T);
    for (std::size_t t = 0; t < T; ++t)
        betas[t] = T == 1 ? spec.beta_min
                          : spec.beta_min + (spec.beta_max - spec.beta_min) * double(t) / double(T - 1);
    return make_schedule(betas);
}

namespace {

void check_step(const DiffusionSchedule& s, std::size_t t) {
    if (t < 1 || t > s.T) throw DiffusionError("diffusion: step " + std::to_string(t) + " outside 1.." + std::to_string(s.T));
}

}  // namespace

template <typename T>
std::vector<T> diffuse_forward(std::span<const T> j, const DiffusionSchedule& s, std::size_t t,
                               std::span<const T> noise) {
    check_step(s, t);
    if (noise.size() != j.size()) throw DiffusionError("diffuse_forward: noise length mismatch");
    const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
    std::vector<T> out(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) out[i] = static_cast<T>(a * j[i] + b * noise[i]);
    return out;
}

template <typename T>
std::vector<T> denoise_step(std::span<const T> jt, std::span<const T> eps, const DiffusionSchedule& s, std::size_t t) {
    check_step(s, t);
    if (eps.size() != jt.size()) throw DiffusionError("denoise_step: eps length mismatch");
    const double one_minus_bar = 1.0 - s.alpha_bar[t];
    const bool any_eps = std::any_of(eps.begin(), eps.end(), [](T v) { return v != T(0); });
    if (one_minus_bar <= 0.0 && any_eps) throw DiffusionError("denoise_step: alpha_bar_t = 1 with nonzero eps");
    const double c = one_minus_bar > 0.0 ? (1.0 - s.alpha[t]) / std::sqrt(one_minus_bar) : 0.0;
    const double inv = 1.0 / std::sqrt(s.alpha[t]);
    std::vector<T> out(jt.size());
    for (std::size_t i = 0; i < jt.size(); ++i) out[i] = static_cast<T>(inv * (jt[i] - c * eps[i]));
    return out;
}

std::vector<float> initial_noise(std::size_t length, std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0xd1ffu};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> n;
    std::vector<float> out(length);
    for (auto& v : out) v = static_cast<float>(n(rng));
    return out;
}

std::vector<double> sample_with(const NoisePredictor& predict, const DiffusionSchedule& s, std::vector<double> j) {
    for (std::size_t t = s.T; t >= 1; --t) {
        const auto eps = predict(j, t);
        j = denoise_step<double>(j, eps, s, t);
        for (double v : j)
            if (!std::isfinite(v)) throw DiffusionError("sample: non-finite intermediate at step " + std::to_string(t));
    }
    return j;
}

void DenoiserConfig::validate() const {
    if (prior_length == 0 || hidden == 0 || layers == 0) throw DiffusionError("denoiser: sizes must be positive");
    if (time_features == 0 || time_features % 2) throw DiffusionError("denoiser: time features must be even and positive");
}

void init_denoiser_into(nn::ParamStore& s, const DenoiserConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    nn::Initializer init(seed);
    const std::size_t in = 2 * cfg.prior_length + cfg.time_features, h = cfg.hidden;
    s.add("dn.in.w", init.fan_in({in, h}, in));
    s.add("dn.in.b", nn::Initializer::constant({h}, 0.0f));
    for (std::size_t l = 1; l < cfg.layers; ++l) {
        s.add("dn.res" + std::to_string(l) + ".w", init.fan_in({h, h}, h));
        s.add("dn.res" + std::to_string(l) + ".b", nn::Initializer::constant({h}, 0.0f));
    }
    s.add("dn.out.w", init.uniform({h, cfg.prior_length}, 0.1 / std::sqrt(double(h))));
    s.add("dn.out.b", nn::Initializer::constant({cfg.prior_length}, 0.0f));
}

nn::ParamStore init_denoiser(const DenoiserConfig& cfg, std::uint64_t seed) {
    nn::ParamStore s;
    init_denoiser_into(s, cfg, seed);
    return s;
}

std::vector<float> time_embedding(std::size_t t, std::size_t features) {
    std::vector<float> out(features);
    const std::size_t half = features / 2;
    for (std::size_t k = 0; k < half; ++k) {
        const double w = std::pow(10000.0, -double(k) / double(half));
        out[k] = static_cast<float>(std::sin(double(t) * w));
        out[half + k] = static_cast<float>(std::cos(double(t) * w));
    }
    return out;
}

template <typename T>
Var<T> denoiser_graph(nn::Binder<T>& p, const DenoiserConfig& cfg, Var<T> jt, Var<T> cond, std::size_t t) {
    using namespace numeric;
    const Shape row{1, cfg.prior_length};
    if (jt.shape() != row || cond.shape() != row) throw ShapeError("denoiser: J_t and condition must be 1 x C'");
    const auto te = time_embedding(t, cfg.time_features);
    auto temb = p.graph().leaf(Tensor<T>(Shape{1, cfg.time_features}, std::vector<T>(te.begin(), te.end())));
    const Var<T> parts[] = {jt, cond, temb};
    auto h = gelu(add(matmul(concat<T>(parts, 1), p("dn.in.w")), p("dn.in.b")));
    for (std::size_t l = 1; l < cfg.layers; ++l) {
        const std::string n = "dn.res" + std::to_string(l) + ".";
        h = add(h, gelu(add(matmul(h, p(n + "w")), p(n + "b"))));
    }
    return add(matmul(h, p("dn.out.w")), p("dn.out.b"));
}

template <typename T>
Var<T> sample_graph(nn::Binder<T>& p, const DenoiserConfig& cfg, const DiffusionSchedule& s, Var<T> cond, Var<T> init,
                    std::size_t* evaluations) {
    using namespace numeric;
    auto j = init;
    for (std::size_t t = s.T; t >= 1; --t) {
        auto eps = denoiser_graph(p, cfg, j, cond, t);
        if (evaluations) ++*evaluations;
        const double one_minus_bar = 1.0 - s.alpha_bar[t];
        if (one_minus_bar <= 0.0) throw DiffusionError("sample: alpha_bar_t = 1 leaves eps undefined");
        const double c = (1.0 - s.alpha[t]) / std::sqrt(one_minus_bar);
        j = scale(sub(j, scale(eps, c)), 1.0 / std::sqrt(s.alpha[t]));
    }
    return j;
}

jcp::CompactPrior sample_prior(const jcp::CompactPrior& condition, const nn::ParamStore& params,
                               const DenoiserConfig& cfg, const DiffusionSchedule& s, const std::vector<float>& init,
                               std::size_t* evaluations) {
    if (condition.length() != cfg.prior_length || init.size() != cfg.prior_length)
        throw DiffusionError("sample_prior: condition and start vector must have length C'");
    numeric::Graph<float> g;
    nn::Binder<float> b(g, params, false);
    auto c = g.leaf(Tensor<float>(Shape{1, cfg.prior_length}, condition.values));
    auto x = g.leaf(Tensor<float>(Shape{1, cfg.prior_length}, init));
    try {
        return {sample_graph(b, cfg, s, c, x, evaluations).value().vec()};
    } catch (const numeric::NumericError& e) {
        throw DiffusionError(std::string("sample_prior: ") + e.what());
    }
}

namespace {

template <typename T>
Var<T> chain_loss(nn::Binder<T>& p, const DenoiserConfig& cfg, const DiffusionSchedule& s, const PriorPair& pair,
                  const std::vector<float>& start) {
    using namespace numeric;
    auto& g = p.graph();
    const Shape row{1, cfg.prior_length};
    auto cond = g.leaf(Tensor<float>(row, pair.condition.values).template cast<T>());
    auto target = g.leaf(Tensor<float>(row, pair.target.values).template cast<T>());
    auto init = g.leaf(Tensor<float>(row, start).template cast<T>());
    return mean(abs(sub(sample_graph(p, cfg, s, cond, init), target)));
}

}  // namespace

TrainResult train_diffusion(const std::vector<PriorPair>& data, const DenoiserConfig& cfg,
                            const DiffusionSchedule& s, nn::ParamStore params, const TrainConfig& tcfg,
                            const std::function<void(std::size_t, double)>& on_step) {
    TrainResult result;
    if (tcfg.steps > 0 && data.empty()) throw DiffusionError("train-diffusion: empty training set");
    nn::Adam adam(tcfg.adam);
    std::mt19937_64 rng(tcfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    const std::size_t bsz = std::max<std::size_t>(1, tcfg.batch);
    std::uint64_t draw = 0;
    for (std::size_t step = 0; step < tcfg.steps; ++step) {
        numeric::Graph<float> g;
        nn::Binder<float> b(g, params, true);
        std::optional<Var<float>> total;
        for (std::size_t k = 0; k < bsz; ++k) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const auto& pair = data[order[cursor++]];
            auto l = chain_loss(b, cfg, s, pair, initial_noise(cfg.prior_length, tcfg.seed, draw++));
            total = total ? numeric::add(*total, l) : l;
        }
        auto loss = numeric::scale(*total, 1.0 / double(bsz));
        const double lv = loss.value()[0];
        if (!std::isfinite(lv))
            throw DiffusionError("train-diffusion: loss became non-finite at step " + std::to_string(step));
        if (tcfg.cosine_decay) adam.set_lr(nn::cosine_lr(tcfg.adam.lr, step, tcfg.steps));
        adam.step(params, b.gradients(g.backward(loss)));
        result.loss_curve.push_back(lv);
        if (on_step) on_step(step, lv);
    }
    result.params = std::move(params);
    return result;
}

double relative_prior_error(const std::vector<PriorPair>& data, const nn::ParamStore& params,
                            const DenoiserConfig& cfg, const DiffusionSchedule& s, std::uint64_t seed) {
    if (data.empty()) throw DiffusionError("relative_prior_error: no pairs");
    double acc = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto jh = sample_prior(data[i].condition, params, cfg, s, initial_noise(cfg.prior_length, seed, i));
        double num = 0.0;
        for (std::size_t k = 0; k < jh.length(); ++k) {
            const double d = double(jh.values[k]) - data[i].target.values[k];
            num += d * d;
        }
        acc += std::sqrt(num) / std::max(data[i].target.norm(), 1e-12);
    }
    return acc / double(data.size());
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
    j = {{"prior_length", c.prior_length}, {"hidden", c.hidden}, {"layers", c.layers}, {"time_features", c.time_features}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
    c = DenoiserConfig{};
    c.prior_length = j.value("prior_length", c.prior_length);
    c.hidden = j.value("hidden", c.hidden);
    c.layers = j.value("layers", c.layers);
    c.time_features = j.value("time_features", c.time_features);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"steps", c.steps},       {"batch", c.batch},     {"lr", c.adam.lr},
         {"beta1", c.adam.beta1},  {"beta2", c.adam.beta2}, {"adam_eps", c.adam.eps},
         {"cosine_decay", c.cosine_decay}, {"seed", c.seed}};
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

template std::vector<float> diffuse_forward(std::span<const float>, const DiffusionSchedule&, std::size_t,
                                            std::span<const float>);
template std::vector<double> diffuse_forward(std::span<const double>, const DiffusionSchedule&, std::size_t,
                                             std::span<const double>);
template std::vector<float> denoise_step(std::span<const float>, std::span<const float>, const DiffusionSchedule&,
                                         std::size_t);
template std::vector<double> denoise_step(std::span<const double>, std::span<const double>, const DiffusionSchedule&,
                                          std::size_t);
template Var<float> denoiser_graph(nn::Binder<float>&, const DenoiserConfig&, Var<float>, Var<float>, std::size_t);
template Var<double> denoiser_graph(nn::Binder<double>&, const DenoiserConfig&, Var<double>, Var<double>, std::size_t);
template Var<float> sample_graph(nn::Binder<float>&, const DenoiserConfig&, const DiffusionSchedule&, Var<float>,
                                 Var<float>, std::size_t*);
template Var<double> sample_graph(nn::Binder<double>&, const DenoiserConfig&, const DiffusionSchedule&, Var<double>,
                                  Var<double>, std::size_t*);

}  // namespace ldpet::diffusion
