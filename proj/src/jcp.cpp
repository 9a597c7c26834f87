#include "ldpet/jcp.hpp"

#include <cmath>

namespace ldpet::jcp {

using numeric::NumericError;
using numeric::Shape;
using numeric::ShapeError;
using numeric::Tensor;
using numeric::Var;

void JcpConfig::validate() const {
    if (downsample == 0 || width == 0 || prior_length == 0) throw NumericError("jcp: config values must be positive");
    if (prior_length % 2) throw NumericError("jcp: prior length must be even");
}

double CompactPrior::norm() const {
    double s = 0.0;
    for (float v : values) s += double(v) * v;
    return std::sqrt(s);
}

CompactPrior combine_priors(std::span<const float> h, std::span<const float> v) {
    if (h.size() != v.size() || h.empty()) throw ShapeError("combine_priors: halves must be non-empty and equal length");
    CompactPrior j;
    j.values.assign(h.begin(), h.end());
    j.values.insert(j.values.end(), v.begin(), v.end());
    return j;
}

std::pair<std::vector<float>, std::vector<float>> split_prior(const CompactPrior& j) {
    if (j.length() == 0 || j.length() % 2) throw ShapeError("split_prior: length must be even");
    const auto h = j.horizontal(), v = j.vertical();
    return {{h.begin(), h.end()}, {v.begin(), v.end()}};
}

void init_jcp_into(nn::ParamStore& s, const JcpConfig& cfg, std::uint64_t seed, bool zero_heads) {
    cfg.validate();
    nn::Initializer init(seed);
    const std::size_t cin = 2 * cfg.downsample * cfg.downsample, w = cfg.width, half = cfg.prior_length / 2;
    s.add("jcp.in.w", init.fan_in({w, cin}, cin));
    s.add("jcp.in.b", nn::Initializer::constant({w}, 0.0f));
    for (std::size_t k = 0; k < cfg.blocks; ++k) {
        const std::string p = "jcp.res" + std::to_string(k) + ".";
        s.add(p + "w1", init.fan_in({w, w}, w));
        s.add(p + "b1", nn::Initializer::constant({w}, 0.0f));
        s.add(p + "w2", init.fan_in({w, w}, w));
        s.add(p + "b2", nn::Initializer::constant({w}, 0.0f));
    }
    for (const char* head : {"jcp.head_h.", "jcp.head_v."}) {
        s.add(std::string(head) + "w", zero_heads ? nn::Initializer::constant({w, half}, 0.0f) : init.fan_in({w, half}, w));
        s.add(std::string(head) + "b", nn::Initializer::constant({half}, 0.0f));
    }
}

nn::ParamStore init_jcp(const JcpConfig& cfg, std::uint64_t seed, bool zero_heads) {
    nn::ParamStore s;
    init_jcp_into(s, cfg, seed, zero_heads);
    return s;
}

template <typename T>
Var<T> jcp_graph(nn::Binder<T>& p, const JcpConfig& cfg, Var<T> normal, Var<T> low) {
    using namespace numeric;
    if (normal.shape() != low.shape()) throw ShapeError("jcp: normal and low shapes differ");
    const Var<T> both[] = {normal, low};
    auto x = concat<T>(both, 0);
    x = space_to_channel(x, cfg.downsample);
    x = conv1x1(x, p("jcp.in.w"), p("jcp.in.b"));
    for (std::size_t k = 0; k < cfg.blocks; ++k) {
        const std::string n = "jcp.res" + std::to_string(k) + ".";
        auto h = gelu(conv1x1(x, p(n + "w1"), p(n + "b1")));
        x = add(x, conv1x1(h, p(n + "w2"), p(n + "b2")));
    }
    const std::size_t C = x.shape()[0], P = x.shape()[1] * x.shape()[2];
    auto pooled = reshape(mean(reshape(x, {C, P}), 1), {1, C});
    auto h = add(matmul(pooled, p("jcp.head_h.w")), p("jcp.head_h.b"));
    auto v = add(matmul(pooled, p("jcp.head_v.w")), p("jcp.head_v.b"));
    const Var<T> halves[] = {h, v};
    return concat<T>(halves, 1);
}

namespace {

CompactPrior run(const ImageGrid& normal, const ImageGrid& low, const nn::ParamStore& params, const JcpConfig& cfg) {
    if (!normal.same_shape(low)) throw ShapeError("jcp: normal and low shapes differ");
    numeric::Graph<float> g;
    nn::Binder<float> b(g, params, false);
    auto j = jcp_graph(b, cfg, g.leaf(normal.to_tensor()), g.leaf(low.to_tensor()));
    return CompactPrior{j.value().vec()};
}

}  // namespace

CompactPrior extract_jcp(const ImageGrid& normal, const ImageGrid& low, const nn::ParamStore& params,
                         const JcpConfig& cfg) {
    return run(normal, low, params, cfg);
}

CompactPrior extract_condition(const ImageGrid& low, const nn::ParamStore& params, const JcpConfig& cfg) {
    const ImageGrid zero(low.height(), low.width(), low.pixel_mm(), 0.0f);
    return run(zero, low, params, cfg);
}

void to_json(nlohmann::json& j, const JcpConfig& c) {
    j = {{"downsample", c.downsample}, {"width", c.width}, {"blocks", c.blocks}, {"prior_length", c.prior_length}};
}

void from_json(const nlohmann::json& j, JcpConfig& c) {
    c = JcpConfig{};
    c.downsample = j.value("downsample", c.downsample);
    c.width = j.value("width", c.width);
    c.blocks = j.value("blocks", c.blocks);
    c.prior_length = j.value("prior_length", c.prior_length);
}

template Var<float> jcp_graph(nn::Binder<float>&, const JcpConfig&, Var<float>, Var<float>);
template Var<double> jcp_graph(nn::Binder<double>&, const JcpConfig&, Var<double>, Var<double>);

}  // namespace ldpet::jcp
