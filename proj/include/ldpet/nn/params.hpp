#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ldpet/numeric/graph.hpp"

namespace ldpet::nn {

using numeric::Graph;
using numeric::Shape;
using numeric::Tensor;
using numeric::Var;

/// Named 32-bit parameter tensors kept in insertion order.
class ParamStore {
   public:
    void add(const std::string& name, Tensor<float> value);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const Tensor<float>& get(const std::string& name) const;
    Tensor<float>& get(const std::string& name);

    const std::vector<std::string>& names() const noexcept { return names_; }
    std::size_t size() const noexcept { return names_.size(); }
    std::size_t element_count() const;

    /// Names with the given prefix, in insertion order.
    std::vector<std::string> names_with_prefix(const std::string& prefix) const;

   private:
    std::vector<std::string> names_;
    std::vector<Tensor<float>> values_;
    std::map<std::string, std::size_t> index_;
};

bool operator==(const ParamStore& a, const ParamStore& b);

/// Deterministic initializers. Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights.
class Initializer {
   public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}
    Tensor<float> uniform(Shape shape, double bound);
    Tensor<float> fan_in(Shape shape, std::size_t fan_in);
    static Tensor<float> constant(Shape shape, float value) { return Tensor<float>(std::move(shape), value); }

   private:
    std::mt19937_64 rng_;
};

/// Binds parameters into a graph on first use. Leaves are created lazily so
/// only parameters that feed the output become requires_grad leaves.
template <typename T>
class Binder {
   public:
    Binder(Graph<T>& graph, const ParamStore& params, bool trainable)
        : graph_(graph), params_(params), trainable_(trainable) {}
    /// Values in `shadow` take precedence over `params` (64-bit gradient checks).
    Binder(Graph<T>& graph, const ParamStore& params, bool trainable, const std::map<std::string, Tensor<T>>* shadow)
        : graph_(graph), params_(params), trainable_(trainable), shadow_(shadow) {}

    Var<T> operator()(const std::string& name);
    Graph<T>& graph() const noexcept { return graph_; }
    const ParamStore& params() const noexcept { return params_; }

    /// Float gradients for every bound parameter, by name.
    std::map<std::string, Tensor<float>> gradients(const numeric::Gradients<T>& g) const;

   private:
    Graph<T>& graph_;
    const ParamStore& params_;
    bool trainable_;
    const std::map<std::string, Tensor<T>>* shadow_ = nullptr;
    std::map<std::string, Var<T>> bound_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
};

class Adam {
   public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
    /// One update of every parameter that has a gradient. Moments are kept per name.
    void step(ParamStore& params, const std::map<std::string, Tensor<float>>& grads);
    std::size_t steps() const noexcept { return t_; }
    double lr() const noexcept { return cfg_.lr; }
    void set_lr(double lr) noexcept { cfg_.lr = lr; }

   private:
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

/// Cosine decay from `base` at step 0 towards 0 at `total`.
double cosine_lr(double base, std::size_t step, std::size_t total);

/// Constant (non-trainable) leaf.
template <typename T>
Var<T> constant(Graph<T>& g, const Tensor<float>& t) {
    return g.leaf(t.template cast<T>(), false);
}

/// One probed scalar: parameter name and flat element index.
struct Probe {
    std::string name;
    std::size_t index = 0;
};

/// `count` probes drawn uniformly over all elements of the named parameters
/// (all parameters when `names` is empty).
std::vector<Probe> sample_probes(const ParamStore& params, std::size_t count, std::uint64_t seed,
                                 const std::vector<std::string>& names = {});

struct ParamCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::string worst;
    bool passed = false;
};

using ParamLoss = std::function<Var<double>(Binder<double>&)>;

/// Central differences of a scalar loss w.r.t. the probed parameters, with the
/// whole graph evaluated in 64-bit.
ParamCheckResult check_param_gradients(const ParamStore& params, const ParamLoss& loss,
                                       const std::vector<Probe>& probes, double eps, double tol);

extern template class Binder<float>;
extern template class Binder<double>;

}  // namespace ldpet::nn
