#include "ldpet/nn/params.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ldpet/numeric/gradcheck.hpp"

namespace ldpet::nn {

void ParamStore::add(const std::string& name, Tensor<float> value) {
    if (contains(name)) throw numeric::NumericError("params: duplicate parameter " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    values_.push_back(std::move(value));
}

const Tensor<float>& ParamStore::get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw numeric::NumericError("params: unknown parameter " + name);
    return values_[it->second];
}

Tensor<float>& ParamStore::get(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw numeric::NumericError("params: unknown parameter " + name);
    return values_[it->second];
}

std::size_t ParamStore::element_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& n : names_)
        if (n.compare(0, prefix.size(), prefix) == 0) out.push_back(n);
    return out;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.names() != b.names()) return false;
    for (const auto& n : a.names()) {
        const auto& x = a.get(n);
        const auto& y = b.get(n);
        if (x.shape() != y.shape() || x.vec() != y.vec()) return false;
    }
    return true;
}

Tensor<float> Initializer::uniform(Shape shape, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<float> t(std::move(shape));
    for (auto& v : t.mutable_data()) v = static_cast<float>(u(rng_));
    return t;
}

Tensor<float> Initializer::fan_in(Shape shape, std::size_t fan_in) {
    return uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

template <typename T>
Var<T> Binder<T>::operator()(const std::string& name) {
    const auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Tensor<T> value;
    if (shadow_ && shadow_->count(name))
        value = shadow_->at(name);
    else
        value = params_.get(name).template cast<T>();
    const Var<T> v = graph_.leaf(std::move(value), trainable_);
    bound_.emplace(name, v);
    return v;
}

template <typename T>
std::map<std::string, Tensor<float>> Binder<T>::gradients(const numeric::Gradients<T>& g) const {
    std::map<std::string, Tensor<float>> out;
    for (const auto& [name, v] : bound_)
        if (g.contains(v)) out.emplace(name, g[v].template cast<float>());
    return out;
}

void Adam::step(ParamStore& params, const std::map<std::string, Tensor<float>>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        auto& p = params.get(name);
        if (p.shape() != g.shape()) throw numeric::ShapeError("adam: gradient shape mismatch for " + name);
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.empty()) {
            m.assign(p.size(), 0.0);
            v.assign(p.size(), 0.0);
        }
        auto pv = p.mutable_data();
        auto gv = g.data();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double gi = gv[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mh = m[i] / bc1, vh = v[i] / bc2;
            pv[i] = static_cast<float>(pv[i] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
        }
    }
}

double cosine_lr(double base, std::size_t step, std::size_t total) {
    if (total == 0) return base;
    const double t = static_cast<double>(step) / static_cast<double>(total);
    return 0.5 * base * (1.0 + std::cos(std::numbers::pi * t));
}

std::vector<Probe> sample_probes(const ParamStore& params, std::size_t count, std::uint64_t seed,
                                 const std::vector<std::string>& names) {
    const auto& pool = names.empty() ? params.names() : names;
    std::vector<std::size_t> offsets;
    std::size_t total = 0;
    for (const auto& n : pool) {
        offsets.push_back(total);
        total += params.get(n).size();
    }
    if (total == 0) return {};
    std::mt19937_64 rng(seed);
    std::vector<Probe> out;
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t flat = std::uniform_int_distribution<std::size_t>(0, total - 1)(rng);
        const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat) - 1;
        const std::size_t i = static_cast<std::size_t>(it - offsets.begin());
        out.push_back({pool[i], flat - *it});
    }
    return out;
}

ParamCheckResult check_param_gradients(const ParamStore& params, const ParamLoss& loss,
                                       const std::vector<Probe>& probes, double eps, double tol) {
    std::map<std::string, Tensor<double>> shadow;
    for (const auto& n : params.names()) shadow.emplace(n, params.get(n).cast<double>());

    auto evaluate = [&]() {
        Graph<double> g;
        Binder<double> b(g, params, false, &shadow);
        return loss(b).value()[0];
    };

    Graph<double> g;
    Binder<double> b(g, params, true, &shadow);
    const auto out = loss(b);
    const auto grads = g.backward(out);
    ParamCheckResult r;
    for (const auto& pr : probes) {
        const Var<double> v = b(pr.name);
        const double analytic = grads.contains(v) ? grads[v][pr.index] : 0.0;
        auto& t = shadow.at(pr.name);
        const double orig = t[pr.index];
        t[pr.index] = orig + eps;
        const double up = evaluate();
        t[pr.index] = orig - eps;
        const double down = evaluate();
        t[pr.index] = orig;
        const double numeric = (up - down) / (2.0 * eps);
        const double err = numeric::relative_error(analytic, numeric);
        if (err >= r.max_relative_error) {
            r.max_relative_error = err;
            r.worst = pr.name + "[" + std::to_string(pr.index) + "]";
        }
        ++r.checked;
    }
    r.passed = r.max_relative_error < tol;
    return r;
}

template class Binder<float>;
template class Binder<double>;

}  // namespace ldpet::nn
