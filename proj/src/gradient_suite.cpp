#include "ldpet/gradient_suite.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "ldpet/dcs.hpp"
#include "ldpet/diffusion.hpp"
#include "ldpet/numeric/gradcheck.hpp"
#include "ldpet/transformer.hpp"

namespace ldpet {

namespace {

constexpr double kOpTol = 1e-4;
constexpr double kEndToEndTol = 1e-3;

SuiteEntry transformer_entry(std::uint64_t seed) {
    jcp::JcpConfig jc;
    jc.width = 16;
    const auto sc = transformer::StageConfig::toy();
    auto params = jcp::init_jcp(jc, seed + 38);
    transformer::init_stage_into(params, sc, seed + 39);
    for (auto& v : params.get("tf.head.w").mutable_data()) v = 0.2f;
    std::mt19937_64 rng(seed + 40);
    std::uniform_real_distribution<float> u(0.5f, 2.0f);
    transformer::PairedSample smp{ImageGrid(16, 16, 2.0), ImageGrid(16, 16, 2.0)};
    for (std::size_t i = 0; i < 256; ++i) {
        smp.normal[i] = u(rng);
        smp.low[i] = u(rng);
    }
    const std::vector<const transformer::PairedSample*> batch{&smp};
    const auto loss = [&](nn::Binder<double>& b) { return transformer::batch_loss(b, jc, sc, batch); };
    const auto r = nn::check_param_gradients(params, loss, nn::sample_probes(params, 10, seed + 41), 1e-6, kEndToEndTol);
    return {"transformer.end_to_end", r.max_relative_error, kEndToEndTol, r.checked, r.passed};
}

SuiteEntry diffusion_entry(std::uint64_t seed) {
    diffusion::DenoiserConfig cfg;
    cfg.prior_length = 8;
    cfg.hidden = 16;
    const auto s = diffusion::make_schedule(4);
    const auto params = diffusion::init_denoiser(cfg, seed + 2);
    std::mt19937_64 rng(seed + 10);
    std::normal_distribution<double> n;
    const numeric::Shape row{1, 8};
    numeric::Tensor<double> cond(row), init(row), target(row);
    for (auto* t : {&cond, &init, &target})
        for (auto& v : t->mutable_data()) v = n(rng);
    const auto loss = [&](nn::Binder<double>& b) {
        auto& g = b.graph();
        return numeric::sum_sq(numeric::sub(diffusion::sample_graph(b, cfg, s, g.leaf(cond), g.leaf(init)), g.leaf(target)));
    };
    const auto r = nn::check_param_gradients(params, loss, nn::sample_probes(params, 40, seed + 3), 1e-6, kOpTol);
    return {"diffusion.chain", r.max_relative_error, kOpTol, r.checked, r.passed};
}

SuiteEntry dcs_entry(std::uint64_t seed) {
    std::mt19937_64 rng(seed + 9);
    std::uniform_real_distribution<double> u(0.5, 3.0), m(-1.0, 1.0);
    dcs::DcsConfig c;
    c.mu = 0.8;
    c.rho = 1.3;
    c.gamma = 0.9;
    c.eta = 0.7;
    dcs::DcsState s;
    s.height = s.width = 8;
    const std::size_t n = 64;
    s.M.assign(n, 0);
    s.v.assign(n, 0.0);
    for (auto* f : {&s.x, &s.u, &s.y, &s.f_hat, &s.w, &s.lambda1, &s.lambda2}) f->resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        s.x[i] = u(rng);
        s.u[i] = u(rng);
        s.y[i] = u(rng);
        s.f_hat[i] = u(rng);
        s.w[i] = 0.2 + 0.5 * u(rng);
        s.lambda1[i] = m(rng);
        s.lambda2[i] = m(rng);
        if (rng() % 4 == 0) {
            s.M[i] = 1;
            s.v[i] = u(rng);
        }
    }
    s.zeta = dcs::Degradation::unblend(s.v, c.eta);
    const auto gx = dcs::grad_x(s, c), gu = dcs::grad_u(s, c);
    double worst = 0.0;
    const double h = 1e-6;
    for (std::size_t i = 0; i < n; ++i)
        for (int which = 0; which < 2; ++which) {
            auto& z = which ? s.u : s.x;
            const double keep = z[i];
            z[i] = keep + h;
            const double up = dcs::lagrangian(s, c);
            z[i] = keep - h;
            const double dn = dcs::lagrangian(s, c);
            z[i] = keep;
            worst = std::max(worst, numeric::relative_error(which ? gu[i] : gx[i], (up - dn) / (2 * h)));
        }
    return {"dcs.lagrangian", worst, 1e-5, 2 * n, worst < 1e-5};
}

}  // namespace

std::vector<SuiteEntry> run_gradient_suite(std::uint64_t seed, std::size_t cases_per_op) {
    std::vector<SuiteEntry> out;
    for (numeric::OpId op : numeric::registered_ops()) {
        if (op == numeric::OpId::leaf) continue;
        SuiteEntry e{std::string("op.") + std::string(numeric::op_name(op)), 0.0, kOpTol, 0, true};
        for (std::size_t k = 0; k < cases_per_op; ++k) {
            const std::uint64_t s = seed + k;
            const auto c = numeric::random_case(op, 1000 * static_cast<std::uint64_t>(op) + s);
            const auto r = numeric::grad_check(c, 1e-5, kOpTol, s);
            e.max_relative_error = std::max(e.max_relative_error, r.max_relative_error);
            e.checked += r.checked;
            e.passed = e.passed && r.passed;
        }
        out.push_back(e);
    }
    out.push_back(transformer_entry(seed));
    out.push_back(diffusion_entry(seed));
    out.push_back(dcs_entry(seed));
    return out;
}

}  // namespace ldpet
