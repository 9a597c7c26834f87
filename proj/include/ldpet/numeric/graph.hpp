#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "ldpet/numeric/tensor.hpp"

namespace ldpet::numeric {

/// Closed op vocabulary. Every entry has a forward kernel and a registered adjoint.
enum class OpId : std::uint8_t {
    leaf,
    matmul,
    conv1x1,
    dwconv3x3,
    add,
    sub,
    mul,
    scale,
    div,
    layernorm,
    softmax,
    gelu,
    space_to_channel,
    channel_to_space,
    reshape,
    concat,
    slice,
    mean,
    sum_sq,
    abs,
    l2_normalize,
};

std::string_view op_name(OpId op);

/// Every differentiable op, in declaration order.
std::span<const OpId> registered_ops();

struct OpAttrs {
    int axis = -1;            // softmax/concat/slice/l2_normalize axis; mean: -1 reduces everything
    std::size_t factor = 1;   // space_to_channel / channel_to_space block size
    double scalar = 1.0;      // scale factor; lower clamp for div
    bool trans_a = false;     // matmul
    bool trans_b = false;
    std::size_t begin = 0;    // slice [begin, end)
    std::size_t end = 0;
    Shape shape;              // reshape target
};

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its graph lives.
template <typename T>
struct Var {
    Graph<T>* graph = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Gradients {
   public:
    bool contains(Var<T> v) const;
    const Tensor<T>& operator[](Var<T> v) const;
    std::size_t size() const { return grads_.size(); }

   private:
    friend class Graph<T>;
    std::vector<std::pair<std::size_t, Tensor<T>>> grads_;
};

/// Append-only tape. Nodes are stored in creation order, which is a
/// topological order, so backward is a single reverse sweep.
template <typename T>
class Graph {
   public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<T> leaf(Tensor<T> value, bool requires_grad = false);
    Var<T> apply(OpId op, std::span<const Var<T>> inputs, const OpAttrs& attrs = {});
    Var<T> apply(OpId op, std::initializer_list<Var<T>> inputs, const OpAttrs& attrs = {}) {
        return apply(op, std::span<const Var<T>>(inputs.begin(), inputs.size()), attrs);
    }

    const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse sweep seeded with `seed` (same shape as `output`). Returns the
    /// gradient of sum(seed * output) for every requires_grad leaf created
    /// before `output`.
    Gradients<T> backward(Var<T> output, const Tensor<T>& seed) const;
    /// Seed of ones; intended for scalar losses.
    Gradients<T> backward(Var<T> output) const;

   private:
    struct Node {
        OpId op = OpId::leaf;
        std::vector<std::size_t> inputs;
        OpAttrs attrs;
        Tensor<T> value;
        std::vector<Tensor<T>> saved;
        bool requires_grad = false;
    };

    void adjoint(const Node& node, const Tensor<T>& grad, std::vector<std::optional<Tensor<T>>>& grads) const;

    std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return graph->value(*this);
}

// Op front-ends. All inputs of one call must live on the same graph.
template <typename T> Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false);
template <typename T> Var<T> conv1x1(Var<T> x, Var<T> w);
template <typename T> Var<T> conv1x1(Var<T> x, Var<T> w, Var<T> b);
template <typename T> Var<T> dwconv3x3(Var<T> x, Var<T> w);
template <typename T> Var<T> dwconv3x3(Var<T> x, Var<T> w, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> x, double factor);
template <typename T> Var<T> div(Var<T> x, Var<T> s, double floor);
template <typename T> Var<T> layernorm(Var<T> x, Var<T> w, Var<T> b);
template <typename T> Var<T> softmax(Var<T> x, int axis);
template <typename T> Var<T> gelu(Var<T> x);
template <typename T> Var<T> space_to_channel(Var<T> x, std::size_t r);
template <typename T> Var<T> channel_to_space(Var<T> x, std::size_t r);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);
template <typename T> Var<T> concat(std::span<const Var<T>> xs, int axis);
template <typename T> Var<T> slice(Var<T> x, int axis, std::size_t begin, std::size_t end);
template <typename T> Var<T> mean(Var<T> x);
template <typename T> Var<T> mean(Var<T> x, int axis);
template <typename T> Var<T> sum_sq(Var<T> x);
template <typename T> Var<T> abs(Var<T> x);
template <typename T> Var<T> l2_normalize(Var<T> x, int axis);

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kL2NormEps = 1e-12;

extern template class Graph<float>;
extern template class Graph<double>;
extern template class Gradients<float>;
extern template class Gradients<double>;

}  // namespace ldpet::numeric
