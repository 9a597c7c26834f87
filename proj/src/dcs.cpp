#include "ldpet/dcs.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ldpet::dcs {

std::size_t LesionMask::count() const { return std::count(M.begin(), M.end(), std::uint8_t{1}); }

LesionMask mask_above(const ImageGrid& x, double threshold, std::size_t min_component) {
    const std::size_t h = x.height(), w = x.width(), n = x.size();
    LesionMask out;
    out.threshold = threshold;
    out.M.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) out.M[i] = x[i] > threshold ? 1 : 0;

    // Drop 4-connected components smaller than min_component.
    std::vector<std::uint8_t> seen(n, 0);
    std::vector<std::size_t> comp, stack;
    for (std::size_t s = 0; s < n; ++s) {
        if (!out.M[s] || seen[s]) continue;
        comp.clear();
        stack = {s};
        seen[s] = 1;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            comp.push_back(p);
            const std::size_t r = p / w, c = p % w;
            const auto visit = [&](std::size_t q) {
                if (out.M[q] && !seen[q]) {
                    seen[q] = 1;
                    stack.push_back(q);
                }
            };
            if (r > 0) visit(p - w);
            if (r + 1 < h) visit(p + w);
            if (c > 0) visit(p - 1);
            if (c + 1 < w) visit(p + 1);
        }
        if (comp.size() < min_component)
            for (std::size_t p : comp) out.M[p] = 0;
    }

    out.v = ImageGrid(h, w, x.pixel_mm());
    for (std::size_t i = 0; i < n; ++i) out.v[i] = out.M[i] ? x[i] : 0.0f;
    return out;
}

LesionMask extract_lesion_mask(const ImageGrid& x, const MaskPolicy& policy) {
    std::vector<double> body;
    for (float v : x.values()) {
        if (v < 0.0f || !std::isfinite(v)) throw DcsError("lesion mask: image must be finite and non-negative");
        if (v > 0.0f) body.push_back(v);
    }
    if (body.empty()) throw DcsError("lesion mask: empty body region");
    std::sort(body.begin(), body.end());
    const auto quantile = [&](double q) {
        const double pos = q * double(body.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, body.size() - 1);
        return body[lo] + (pos - double(lo)) * (body[hi] - body[lo]);
    };
    double t = 0.0;
    switch (policy.kind) {
        case ThresholdKind::quantile:
            if (!(policy.q > 0.0 && policy.q < 1.0)) throw DcsError("lesion mask: quantile must lie in (0, 1)");
            t = quantile(policy.q);
            break;
        case ThresholdKind::background_multiple:
            if (!(policy.m > 0.0)) throw DcsError("lesion mask: background multiple must be positive");
            t = policy.m * quantile(0.5);
            break;
    }
    return mask_above(x, t, policy.min_component);
}

ImageGrid refine(const ImageGrid& x, const ImageGrid& v, double eta) {
    if (!x.same_shape(v)) throw DcsError("refine: shape mismatch");
    ImageGrid u(x.height(), x.width(), x.pixel_mm());
    for (std::size_t i = 0; i < x.size(); ++i) u[i] = static_cast<float>((double(x[i]) + eta * double(v[i])) / 2.0);
    return u;
}

Degradation Degradation::identity() {
    return {[](const Field& u) { return u; }, [](const Field&, const Field& g) { return g; }};
}

Degradation Degradation::unblend(Field v, double eta, Degradation inner) {
    auto lift = [v = std::move(v), eta](const Field& u) {
        if (u.size() != v.size()) throw DcsError("degradation: shape mismatch");
        Field z(u.size());
        for (std::size_t i = 0; i < u.size(); ++i) z[i] = 2.0 * u[i] - eta * v[i];
        return z;
    };
    Degradation d;
    d.apply = [lift, inner](const Field& u) { return inner.apply(lift(u)); };
    d.adjoint = [lift, inner](const Field& u, const Field& g) {
        Field a = inner.adjoint(lift(u), g);
        for (auto& e : a) e *= 2.0;
        return a;
    };
    return d;
}

Degradation network_degradation(const nn::ParamStore& params, const transformer::StageConfig& cfg,
                                const jcp::CompactPrior& prior, std::size_t height, std::size_t width, double scale) {
    if (!(scale > 0.0)) throw DcsError("network degradation: scale must be positive");
    const numeric::Shape img{1, height, width};
    const numeric::Shape row{1, prior.length()};
    // Forward and reverse share one tape.
    auto run = [=](const Field& u, const Field* seed) -> Field {
        if (u.size() != height * width) throw DcsError("network degradation: shape mismatch");
        numeric::Graph<float> g;
        nn::Binder<float> b(g, params, false);
        numeric::Tensor<float> in(img);
        for (std::size_t i = 0; i < u.size(); ++i) in.mutable_data()[i] = static_cast<float>(u[i] / scale);
        auto x = g.leaf(std::move(in), seed != nullptr);
        auto out = transformer::unet_graph(b, cfg, x, g.leaf(numeric::Tensor<float>(row, prior.values)));
        Field r(u.size());
        if (!seed) {
            for (std::size_t i = 0; i < r.size(); ++i) r[i] = scale * double(out.value()[i]);
            return r;
        }
        numeric::Tensor<float> sd(img);
        for (std::size_t i = 0; i < r.size(); ++i) sd.mutable_data()[i] = static_cast<float>((*seed)[i]);
        const auto grads = g.backward(out, sd);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = double(grads[x][i]);  // scale / scale cancels
        return r;
    };
    return {[run](const Field& u) { return run(u, nullptr); },
            [run](const Field& u, const Field& gr) { return run(u, &gr); }};
}

void DcsConfig::validate() const {
    for (double p : {mu, eta, rho, gamma})
        if (!(p >= 0.0) || !std::isfinite(p)) throw DcsError("dcs config: weights must be finite and non-negative");
    if (!(delta > 0.0) || !(kappa > 0.0)) throw DcsError("dcs config: delta and kappa must be positive");
    if (outer < 1) throw DcsError("dcs config: at least one outer iteration");
    if (!(weight_floor > 0.0)) throw DcsError("dcs config: weight floor must be positive");
}

void DcsState::validate() const {
    const std::size_t n = size();
    if (n == 0) throw DcsError("dcs state: empty grid");
    for (const Field* f : {&x, &u, &v, &y, &w, &f_hat, &lambda1, &lambda2})
        if (f->size() != n) throw DcsError("dcs state: grids differ in shape");
    if (M.size() != n) throw DcsError("dcs state: mask shape mismatch");
    for (double e : w)
        if (!(e > 0.0)) throw DcsError("dcs state: weights must be positive");
    if (!zeta.apply || !zeta.adjoint) throw DcsError("dcs state: missing degradation operator");
}

namespace {

double refine_gap(const DcsState& s, const DcsConfig& cfg, std::size_t i) {
    return s.u[i] - (s.x[i] + cfg.eta * s.v[i]) / 2.0;
}

template <typename Obj, typename Grad>
Field descend(Field z, const Obj& objective, const Grad& gradient, const DcsConfig& cfg, InnerTrace* trace,
              const char* tag) {
    double step = cfg.delta;
    double f = objective(z);
    if (!std::isfinite(f)) throw DcsError(std::string(tag) + ": non-finite objective");
    if (trace) trace->objective.push_back(f);
    std::size_t failures = 0;
    for (std::size_t k = 0; k < cfg.inner;) {
        const Field g = gradient(z);
        Field trial(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) trial[i] = z[i] - step * g[i];
        const double ft = objective(trial);
        if (std::isfinite(ft) && ft <= f) {
            z = std::move(trial);
            f = ft;
            failures = 0;
            ++k;
            if (trace) trace->objective.push_back(f);
        } else if (std::isfinite(ft) && ft - f <= 1e-12 * std::max(1.0, std::abs(f))) {
            break;  // converged to rounding
        } else {
            step *= 0.5;
            if (trace) ++trace->halvings;
            if (++failures >= 5) throw DcsError(std::string(tag) + ": objective increased on 5 consecutive steps");
        }
    }
    return z;
}

}  // namespace

double lagrangian(const DcsState& s, const DcsConfig& cfg) {
    const Field z = s.zeta.apply(s.u);
    double L = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double d = s.y[i] - z[i];
        const double cm = s.M[i] * s.x[i] - s.v[i];
        const double cr = refine_gap(s, cfg, i);
        const double p = s.x[i] - s.f_hat[i];
        L += s.w[i] * d * d + s.lambda1[i] * cm + s.lambda2[i] * cr + 0.5 * cfg.rho * cm * cm +
             0.5 * cfg.gamma * cr * cr + cfg.mu * p * p;
    }
    return L;
}

Field grad_x(const DcsState& s, const DcsConfig& cfg) {
    Field g(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double cm = s.M[i] * s.x[i] - s.v[i];
        g[i] = s.M[i] * (s.lambda1[i] + cfg.rho * cm) - 0.5 * (s.lambda2[i] + cfg.gamma * refine_gap(s, cfg, i)) +
               2.0 * cfg.mu * (s.x[i] - s.f_hat[i]);
    }
    return g;
}

Field grad_u(const DcsState& s, const DcsConfig& cfg) {
    const Field z = s.zeta.apply(s.u);
    Field r(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) r[i] = -2.0 * s.w[i] * (s.y[i] - z[i]);
    Field g = s.zeta.adjoint(s.u, r);
    for (std::size_t i = 0; i < s.size(); ++i) g[i] += s.lambda2[i] + cfg.gamma * refine_gap(s, cfg, i);
    return g;
}

double residual_mask(const DcsState& s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double c = s.M[i] * s.x[i] - s.v[i];
        acc += c * c;
    }
    return std::sqrt(acc);
}

double residual_refine(const DcsState& s, const DcsConfig& cfg) {
    double acc = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) acc += refine_gap(s, cfg, i) * refine_gap(s, cfg, i);
    return std::sqrt(acc);
}

Field update_x(const DcsState& s, const DcsConfig& cfg, InnerTrace* trace) {
    s.validate();
    DcsState work = s;
    const auto at = [&](const Field& x) -> DcsState& {
        work.x = x;
        return work;
    };
    return descend(
        s.x, [&](const Field& x) { return lagrangian(at(x), cfg); }, [&](const Field& x) { return grad_x(at(x), cfg); },
        cfg, trace, "dcs update_x");
}

Field update_u(const DcsState& s, const DcsConfig& cfg, InnerTrace* trace) {
    s.validate();
    DcsState work = s;
    const auto at = [&](const Field& u) -> DcsState& {
        work.u = u;
        return work;
    };
    return descend(
        s.u, [&](const Field& u) { return lagrangian(at(u), cfg); }, [&](const Field& u) { return grad_u(at(u), cfg); },
        cfg, trace, "dcs update_u");
}

Field pwls_weights(const ImageGrid& x0, double dose_fraction, double counts_scale, double floor) {
    if (!(dose_fraction > 0.0 && dose_fraction <= 1.0)) throw DcsError("dcs: dose fraction must lie in (0, 1]");
    if (!(counts_scale > 0.0)) throw DcsError("dcs: counts scale must be positive");
    Field w(x0.size());
    for (std::size_t i = 0; i < w.size(); ++i)
        w[i] = 1.0 / std::max(double(x0[i]) / (dose_fraction * counts_scale), floor);
    return w;
}

namespace {

Field to_field(const ImageGrid& g) { return Field(g.values().begin(), g.values().end()); }

}  // namespace

DcsState init_state(const ImageGrid& x0, const ImageGrid& f_hat, const DcsModel& model, const DcsConfig& cfg) {
    cfg.validate();
    if (!x0.same_shape(f_hat)) throw DcsError("dcs: x0 and f_hat differ in shape");
    if (model.y && !model.y->same_shape(x0)) throw DcsError("dcs: y differs in shape");
    const auto mask = extract_lesion_mask(x0, cfg.mask);
    DcsState s;
    s.height = x0.height();
    s.width = x0.width();
    s.x = to_field(x0);
    s.v = to_field(mask.v);
    s.M = mask.M;
    s.u = to_field(refine(x0, mask.v, cfg.eta));
    s.y = to_field(model.y ? *model.y : x0);
    s.f_hat = to_field(f_hat);
    s.w = pwls_weights(x0, model.dose_fraction, model.counts_scale, cfg.weight_floor);
    s.lambda1.assign(s.size(), 0.0);
    s.lambda2.assign(s.size(), 0.0);
    s.zeta = model.zeta.apply ? model.zeta : Degradation::unblend(s.v, cfg.eta);
    return s;
}

ImageGrid run_dcs(const ImageGrid& x0, const ImageGrid& f_hat, const DcsModel& model, const DcsConfig& cfg,
                  DcsReport* report) {
    DcsState s = init_state(x0, f_hat, model, cfg);
    DcsReport rep;
    rep.mask_pixels = std::count(s.M.begin(), s.M.end(), std::uint8_t{1});
    rep.threshold = extract_lesion_mask(x0, cfg.mask).threshold;
    for (std::size_t i = 0; i < cfg.outer; ++i) {
        const Field prev = s.x;
        s.x = update_x(s, cfg);
        s.u = update_u(s, cfg);

        // Extra descent step on grad_x L, halved until L does not increase.
        const Field g = grad_x(s, cfg);
        const double L0 = lagrangian(s, cfg);
        const Field base = s.x;
        for (double step = cfg.delta;; step *= 0.5) {
            for (std::size_t k = 0; k < s.size(); ++k) s.x[k] = base[k] - step * g[k];
            if (lagrangian(s, cfg) <= L0) break;
            if (step < cfg.delta / 16.0) {
                s.x = base;
                break;
            }
        }

        for (std::size_t k = 0; k < s.size(); ++k) {
            s.lambda1[k] += cfg.rho * (s.M[k] * s.x[k] - s.v[k]);
            s.lambda2[k] += cfg.gamma * refine_gap(s, cfg, k);
        }

        double d = 0.0;
        for (std::size_t k = 0; k < s.size(); ++k) d += (s.x[k] - prev[k]) * (s.x[k] - prev[k]);
        d = std::sqrt(d);
        for (double e : s.x)
            if (!std::isfinite(e)) throw DcsError("dcs: non-finite iterate");
        rep.residual_mask.push_back(residual_mask(s));
        rep.residual_refine.push_back(residual_refine(s, cfg));
        rep.step_norm.push_back(d);
        rep.iterations = i + 1;
        if (d < cfg.kappa) break;
    }
    if (report) *report = rep;
    ImageGrid out(x0.height(), x0.width(), x0.pixel_mm());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<float>(s.x[k]);
    return out;
}

namespace {

const char* kind_name(ThresholdKind k) { return k == ThresholdKind::quantile ? "quantile" : "background_multiple"; }

}  // namespace

void to_json(nlohmann::json& j, const DcsConfig& c) {
    j = {{"mu", c.mu},
         {"eta", c.eta},
         {"rho", c.rho},
         {"gamma", c.gamma},
         {"delta", c.delta},
         {"kappa", c.kappa},
         {"outer", c.outer},
         {"inner", c.inner},
         {"weight_floor", c.weight_floor},
         {"mask",
          {{"kind", kind_name(c.mask.kind)},
           {"q", c.mask.q},
           {"m", c.mask.m},
           {"min_component", c.mask.min_component}}},
         {"data", c.data == DataMode::low_dose ? "low_dose" : "network"}};
}

void from_json(const nlohmann::json& j, DcsConfig& c) {
    c = DcsConfig{};
    c.mu = j.value("mu", c.mu);
    c.eta = j.value("eta", c.eta);
    c.rho = j.value("rho", c.rho);
    c.gamma = j.value("gamma", c.gamma);
    c.delta = j.value("delta", c.delta);
    c.kappa = j.value("kappa", c.kappa);
    c.outer = j.value("outer", c.outer);
    c.inner = j.value("inner", c.inner);
    c.weight_floor = j.value("weight_floor", c.weight_floor);
    if (j.contains("mask")) {
        const auto& m = j.at("mask");
        const std::string kind = m.value("kind", std::string("quantile"));
        if (kind == "quantile")
            c.mask.kind = ThresholdKind::quantile;
        else if (kind == "background_multiple")
            c.mask.kind = ThresholdKind::background_multiple;
        else
            throw DcsError("dcs config: unknown mask kind '" + kind + "'");
        c.mask.q = m.value("q", c.mask.q);
        c.mask.m = m.value("m", c.mask.m);
        c.mask.min_component = m.value("min_component", c.mask.min_component);
    }
    const std::string data = j.value("data", std::string("low_dose"));
    if (data == "low_dose")
        c.data = DataMode::low_dose;
    else if (data == "network")
        c.data = DataMode::network;
    else
        throw DcsError("dcs config: unknown data mode '" + data + "'");
}

void to_json(nlohmann::json& j, const DcsReport& r) {
    j = {{"residual_mask", r.residual_mask}, {"residual_refine", r.residual_refine}, {"step_norm", r.step_norm},
         {"iterations", r.iterations},       {"mask_pixels", r.mask_pixels},        {"threshold", r.threshold}};
}

}  // namespace ldpet::dcs
