#include "ldpet/numeric/graph.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

namespace ldpet::numeric {

namespace {

constexpr std::array kRegisteredOps = {
    OpId::matmul,  OpId::conv1x1,          OpId::dwconv3x3,        OpId::add,     OpId::sub,
    OpId::mul,     OpId::scale,            OpId::div,              OpId::layernorm, OpId::softmax,
    OpId::gelu,    OpId::space_to_channel, OpId::channel_to_space, OpId::reshape, OpId::concat,
    OpId::slice,   OpId::mean,             OpId::sum_sq,           OpId::abs,     OpId::l2_normalize,
};

[[noreturn]] void shape_fail(OpId op, const std::string& what) {
    throw ShapeError(std::string(op_name(op)) + ": " + what);
}

std::size_t norm_axis(OpId op, int axis, std::size_t rank) {
    if (axis < 0 || static_cast<std::size_t>(axis) >= rank)
        shape_fail(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return static_cast<std::size_t>(axis);
}

// Splits a shape around `axis` into (outer, length, inner).
struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

// C (m x n) += op(A) * op(B); op(A) is m x k, op(B) is k x n.
template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* A, const T* B, T* C) {
    if (!ta && !tb) {
        for (std::size_t i = 0; i < m; ++i) {
            T* c = C + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T a = A[i * k + p];
                if (a == T{0}) continue;
                const T* b = B + p * n;
                for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
            }
        }
    } else if (ta && !tb) {
        for (std::size_t p = 0; p < k; ++p) {
            const T* b = B + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const T a = A[p * m + i];
                if (a == T{0}) continue;
                T* c = C + i * n;
                for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
            }
        }
    } else if (!ta && tb) {
        for (std::size_t i = 0; i < m; ++i) {
            const T* a = A + i * k;
            for (std::size_t j = 0; j < n; ++j) {
                const T* b = B + j * k;
                T acc{0};
                for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
                C[i * n + j] += acc;
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                T acc{0};
                for (std::size_t p = 0; p < k; ++p) acc += A[p * m + i] * B[j * k + p];
                C[i * n + j] += acc;
            }
    }
}

// Right-aligned broadcast of `b` into the shape of `a`, padded to rank 4.
struct Broadcast {
    std::array<std::size_t, 4> dims{1, 1, 1, 1};
    std::array<std::size_t, 4> bstride{0, 0, 0, 0};
    bool same = false;
    bool scalar = false;
};

Broadcast make_broadcast(OpId op, const Shape& a, const Shape& b) {
    Broadcast bc;
    if (a == b) {
        bc.same = true;
        return bc;
    }
    if (element_count(b) == 1) {
        bc.scalar = true;
        return bc;
    }
    if (b.size() > a.size()) shape_fail(op, "cannot broadcast " + to_string(b) + " into " + to_string(a));
    const std::size_t off = 4 - a.size();
    for (std::size_t i = 0; i < a.size(); ++i) bc.dims[off + i] = a[i];
    std::array<std::size_t, 4> bd{1, 1, 1, 1};
    const std::size_t boff = 4 - b.size();
    for (std::size_t i = 0; i < b.size(); ++i) bd[boff + i] = b[i];
    std::size_t stride = 1;
    for (int i = 3; i >= 0; --i) {
        if (bd[i] == bc.dims[i]) {
            bc.bstride[i] = bd[i] == 1 ? 0 : stride;
        } else if (bd[i] == 1) {
            bc.bstride[i] = 0;
        } else {
            shape_fail(op, "cannot broadcast " + to_string(b) + " into " + to_string(a));
        }
        stride *= bd[i];
    }
    return bc;
}

// Calls f(out_index, b_index) for every element of the broadcast.
template <typename F>
void for_each_broadcast(const Broadcast& bc, std::size_t n, F&& f) {
    if (bc.same) {
        for (std::size_t i = 0; i < n; ++i) f(i, i);
        return;
    }
    if (bc.scalar) {
        for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0});
        return;
    }
    std::size_t o = 0;
    for (std::size_t i0 = 0; i0 < bc.dims[0]; ++i0)
        for (std::size_t i1 = 0; i1 < bc.dims[1]; ++i1)
            for (std::size_t i2 = 0; i2 < bc.dims[2]; ++i2) {
                const std::size_t base = i0 * bc.bstride[0] + i1 * bc.bstride[1] + i2 * bc.bstride[2];
                for (std::size_t i3 = 0; i3 < bc.dims[3]; ++i3) f(o++, base + i3 * bc.bstride[3]);
            }
}

template <typename T>
T gelu_value(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_deriv(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    return cdf + x * pdf;
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
    auto d = dst.mutable_data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

struct S2CIndex {
    std::size_t C, H, W, r;
    // flat index in the (C*r*r) x (H/r) x (W/r) output for input element (c, y, x)
    std::size_t out(std::size_t c, std::size_t y, std::size_t x) const {
        const std::size_t Ho = H / r, Wo = W / r;
        const std::size_t oc = c * r * r + (y % r) * r + (x % r);
        return (oc * Ho + y / r) * Wo + x / r;
    }
};

}  // namespace

std::string_view op_name(OpId op) {
    switch (op) {
        case OpId::leaf: return "leaf";
        case OpId::matmul: return "matmul";
        case OpId::conv1x1: return "conv1x1";
        case OpId::dwconv3x3: return "dwconv3x3";
        case OpId::add: return "add";
        case OpId::sub: return "sub";
        case OpId::mul: return "mul";
        case OpId::scale: return "scale";
        case OpId::div: return "div";
        case OpId::layernorm: return "layernorm";
        case OpId::softmax: return "softmax";
        case OpId::gelu: return "gelu";
        case OpId::space_to_channel: return "space_to_channel";
        case OpId::channel_to_space: return "channel_to_space";
        case OpId::reshape: return "reshape";
        case OpId::concat: return "concat";
        case OpId::slice: return "slice";
        case OpId::mean: return "mean";
        case OpId::sum_sq: return "sum_sq";
        case OpId::abs: return "abs";
        case OpId::l2_normalize: return "l2_normalize";
    }
    return "unknown";
}

std::span<const OpId> registered_ops() { return kRegisteredOps; }

// ---------------------------------------------------------------------------
// Gradients

template <typename T>
bool Gradients<T>::contains(Var<T> v) const {
    return std::any_of(grads_.begin(), grads_.end(), [&](const auto& g) { return g.first == v.id; });
}

template <typename T>
const Tensor<T>& Gradients<T>::operator[](Var<T> v) const {
    for (const auto& g : grads_)
        if (g.first == v.id) return g.second;
    throw NumericError("no gradient recorded for node " + std::to_string(v.id));
}

// ---------------------------------------------------------------------------
// Forward

template <typename T>
Var<T> Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
    if (!value.all_finite()) throw NumericError("leaf: non-finite value");
    Node n;
    n.op = OpId::leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::apply(OpId op, std::span<const Var<T>> inputs, const OpAttrs& attrs) {
    if (op == OpId::leaf) throw NumericError("apply: leaf is not an op");
    for (const auto& v : inputs)
        if (v.graph != this) throw NumericError(std::string(op_name(op)) + ": input from a different graph");

    auto in = [&](std::size_t i) -> const Tensor<T>& {
        if (i >= inputs.size()) shape_fail(op, "missing input " + std::to_string(i));
        return nodes_[inputs[i].id].value;
    };
    auto need_inputs = [&](std::size_t lo, std::size_t hi) {
        if (inputs.size() < lo || inputs.size() > hi)
            shape_fail(op, "expected " + std::to_string(lo) + ".." + std::to_string(hi) + " inputs, got " +
                               std::to_string(inputs.size()));
    };

    Node node;
    node.op = op;
    node.attrs = attrs;
    for (const auto& v : inputs) {
        node.inputs.push_back(v.id);
        node.requires_grad = node.requires_grad || nodes_[v.id].requires_grad;
    }

    switch (op) {
        case OpId::matmul: {
            need_inputs(2, 2);
            const auto& a = in(0);
            const auto& b = in(1);
            if (a.rank() != 2 || b.rank() != 2) shape_fail(op, "operands must be rank 2");
            const std::size_t m = attrs.trans_a ? a.dim(1) : a.dim(0);
            const std::size_t k = attrs.trans_a ? a.dim(0) : a.dim(1);
            const std::size_t kb = attrs.trans_b ? b.dim(1) : b.dim(0);
            const std::size_t n = attrs.trans_b ? b.dim(0) : b.dim(1);
            if (k != kb) shape_fail(op, "inner dims differ: " + to_string(a.shape()) + " . " + to_string(b.shape()));
            Tensor<T> out(Shape{m, n});
            gemm(attrs.trans_a, attrs.trans_b, m, n, k, a.data().data(), b.data().data(),
                 out.mutable_data().data());
            node.value = std::move(out);
            break;
        }
        case OpId::conv1x1: {
            need_inputs(2, 3);
            const auto& x = in(0);
            const auto& w = in(1);
            if (x.rank() != 3 || w.rank() != 2 || w.dim(1) != x.dim(0))
                shape_fail(op, "expected x CxHxW and w CoutxC, got " + to_string(x.shape()) + ", " +
                                   to_string(w.shape()));
            const std::size_t cout = w.dim(0), cin = x.dim(0), P = x.dim(1) * x.dim(2);
            Tensor<T> out(Shape{cout, x.dim(1), x.dim(2)});
            auto o = out.mutable_data();
            if (inputs.size() == 3) {
                const auto& b = in(2);
                if (b.size() != cout) shape_fail(op, "bias length mismatch");
                for (std::size_t c = 0; c < cout; ++c) std::fill_n(o.data() + c * P, P, b[c]);
            }
            gemm(false, false, cout, P, cin, w.data().data(), x.data().data(), o.data());
            node.value = std::move(out);
            break;
        }
        case OpId::dwconv3x3: {
            need_inputs(2, 3);
            const auto& x = in(0);
            const auto& w = in(1);
            if (x.rank() != 3 || w.shape() != Shape{x.dim(0), 3, 3})
                shape_fail(op, "expected x CxHxW and w Cx3x3, got " + to_string(x.shape()) + ", " +
                                   to_string(w.shape()));
            const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
            Tensor<T> out(x.shape());
            auto o = out.mutable_data();
            auto xv = x.data();
            auto wv = w.data();
            if (inputs.size() == 3) {
                const auto& b = in(2);
                if (b.size() != C) shape_fail(op, "bias length mismatch");
                for (std::size_t c = 0; c < C; ++c) std::fill_n(o.data() + c * H * W, H * W, b[c]);
            }
            for (std::size_t c = 0; c < C; ++c) {
                const T* xc = xv.data() + c * H * W;
                T* oc = o.data() + c * H * W;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const T wt = wv[c * 9 + (dy + 1) * 3 + (dx + 1)];
                        const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? H - 1 : H;
                        const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? W - 1 : W;
                        for (std::size_t y = y0; y < y1; ++y) {
                            const T* src = xc + (y + dy) * W + dx;
                            T* dst = oc + y * W;
                            for (std::size_t xi = x0; xi < x1; ++xi) dst[xi] += wt * src[xi];
                        }
                    }
            }
            node.value = std::move(out);
            break;
        }
        case OpId::add:
        case OpId::sub:
        case OpId::mul: {
            need_inputs(2, 2);
            const auto& a = in(0);
            const auto& b = in(1);
            const auto bc = make_broadcast(op, a.shape(), b.shape());
            Tensor<T> out(a.shape());
            auto o = out.mutable_data();
            auto av = a.data();
            auto bv = b.data();
            if (op == OpId::add)
                for_each_broadcast(bc, o.size(), [&](std::size_t i, std::size_t j) { o[i] = av[i] + bv[j]; });
            else if (op == OpId::sub)
                for_each_broadcast(bc, o.size(), [&](std::size_t i, std::size_t j) { o[i] = av[i] - bv[j]; });
            else
                for_each_broadcast(bc, o.size(), [&](std::size_t i, std::size_t j) { o[i] = av[i] * bv[j]; });
            node.value = std::move(out);
            break;
        }
        case OpId::scale: {
            need_inputs(1, 1);
            Tensor<T> out(in(0).shape());
            auto o = out.mutable_data();
            auto xv = in(0).data();
            const T f = static_cast<T>(attrs.scalar);
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = f * xv[i];
            node.value = std::move(out);
            break;
        }
        case OpId::div: {
            need_inputs(2, 2);
            if (in(1).size() != 1) shape_fail(op, "divisor must be a single element");
            const T d = std::max(in(1)[0], static_cast<T>(attrs.scalar));
            Tensor<T> out(in(0).shape());
            auto o = out.mutable_data();
            auto xv = in(0).data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] / d;
            node.value = std::move(out);
            break;
        }
        case OpId::layernorm: {
            need_inputs(3, 3);
            const auto& x = in(0);
            const std::size_t C = x.dim(0);
            if (in(1).size() != C || in(2).size() != C) shape_fail(op, "affine length must equal channel count");
            const std::size_t P = x.size() / C;
            Tensor<T> out(x.shape());
            Tensor<T> xhat(x.shape());
            Tensor<T> rstd(Shape{P});
            auto xv = x.data();
            auto wv = in(1).data();
            auto bv = in(2).data();
            auto o = out.mutable_data();
            auto xh = xhat.mutable_data();
            for (std::size_t p = 0; p < P; ++p) {
                T mu{0};
                for (std::size_t c = 0; c < C; ++c) mu += xv[c * P + p];
                mu /= static_cast<T>(C);
                T var{0};
                for (std::size_t c = 0; c < C; ++c) {
                    const T d = xv[c * P + p] - mu;
                    var += d * d;
                }
                var /= static_cast<T>(C);
                const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
                rstd[p] = rs;
                for (std::size_t c = 0; c < C; ++c) {
                    const T h = (xv[c * P + p] - mu) * rs;
                    xh[c * P + p] = h;
                    o[c * P + p] = h * wv[c] + bv[c];
                }
            }
            node.value = std::move(out);
            node.saved.push_back(std::move(xhat));
            node.saved.push_back(std::move(rstd));
            break;
        }
        case OpId::softmax: {
            need_inputs(1, 1);
            const auto& x = in(0);
            const auto sp = split_at(x.shape(), norm_axis(op, attrs.axis, x.rank()));
            Tensor<T> out(x.shape());
            auto xv = x.data();
            auto o = out.mutable_data();
            for (std::size_t a = 0; a < sp.outer; ++a)
                for (std::size_t b = 0; b < sp.inner; ++b) {
                    const std::size_t base = a * sp.len * sp.inner + b;
                    T mx = xv[base];
                    for (std::size_t l = 1; l < sp.len; ++l) mx = std::max(mx, xv[base + l * sp.inner]);
                    T sum{0};
                    for (std::size_t l = 0; l < sp.len; ++l) {
                        const T e = std::exp(xv[base + l * sp.inner] - mx);
                        o[base + l * sp.inner] = e;
                        sum += e;
                    }
                    for (std::size_t l = 0; l < sp.len; ++l) o[base + l * sp.inner] /= sum;
                }
            node.value = std::move(out);
            break;
        }
        case OpId::gelu: {
            need_inputs(1, 1);
            Tensor<T> out(in(0).shape());
            auto xv = in(0).data();
            auto o = out.mutable_data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = gelu_value(xv[i]);
            node.value = std::move(out);
            break;
        }
        case OpId::space_to_channel: {
            need_inputs(1, 1);
            const auto& x = in(0);
            const std::size_t r = attrs.factor;
            if (x.rank() != 3) shape_fail(op, "expected CxHxW");
            if (r == 0 || x.dim(1) % r || x.dim(2) % r)
                shape_fail(op, "H and W must be divisible by " + std::to_string(r) + ", got " + to_string(x.shape()));
            const S2CIndex ix{x.dim(0), x.dim(1), x.dim(2), r};
            Tensor<T> out(Shape{ix.C * r * r, ix.H / r, ix.W / r});
            auto xv = x.data();
            auto o = out.mutable_data();
            for (std::size_t c = 0; c < ix.C; ++c)
                for (std::size_t y = 0; y < ix.H; ++y)
                    for (std::size_t xx = 0; xx < ix.W; ++xx) o[ix.out(c, y, xx)] = xv[(c * ix.H + y) * ix.W + xx];
            node.value = std::move(out);
            break;
        }
        case OpId::channel_to_space: {
            need_inputs(1, 1);
            const auto& x = in(0);
            const std::size_t r = attrs.factor;
            if (x.rank() != 3 || r == 0 || x.dim(0) % (r * r))
                shape_fail(op, "channel count must be divisible by r^2, got " + to_string(x.shape()));
            const S2CIndex ix{x.dim(0) / (r * r), x.dim(1) * r, x.dim(2) * r, r};
            Tensor<T> out(Shape{ix.C, ix.H, ix.W});
            auto xv = x.data();
            auto o = out.mutable_data();
            for (std::size_t c = 0; c < ix.C; ++c)
                for (std::size_t y = 0; y < ix.H; ++y)
                    for (std::size_t xx = 0; xx < ix.W; ++xx) o[(c * ix.H + y) * ix.W + xx] = xv[ix.out(c, y, xx)];
            node.value = std::move(out);
            break;
        }
        case OpId::reshape: {
            need_inputs(1, 1);
            node.value = in(0).reshaped(attrs.shape);
            break;
        }
        case OpId::concat: {
            if (inputs.empty()) shape_fail(op, "needs at least one input");
            const auto& first = in(0);
            const std::size_t axis = norm_axis(op, attrs.axis, first.rank());
            Shape os = first.shape();
            os[axis] = 0;
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                const auto& s = in(i).shape();
                if (s.size() != first.rank()) shape_fail(op, "rank mismatch");
                for (std::size_t d = 0; d < s.size(); ++d)
                    if (d != axis && s[d] != first.dim(d))
                        shape_fail(op, "shape mismatch " + to_string(s) + " vs " + to_string(first.shape()));
                os[axis] += s[axis];
            }
            Tensor<T> out(os);
            auto o = out.mutable_data();
            const auto osp = split_at(os, axis);
            std::size_t offset = 0;
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                const auto& t = in(i);
                const auto sp = split_at(t.shape(), axis);
                auto tv = t.data();
                for (std::size_t a = 0; a < sp.outer; ++a)
                    std::copy_n(tv.data() + a * sp.len * sp.inner, sp.len * sp.inner,
                                o.data() + a * osp.len * osp.inner + offset * osp.inner);
                offset += sp.len;
            }
            node.value = std::move(out);
            break;
        }
        case OpId::slice: {
            need_inputs(1, 1);
            const auto& x = in(0);
            const std::size_t axis = norm_axis(op, attrs.axis, x.rank());
            if (attrs.begin >= attrs.end || attrs.end > x.dim(axis)) shape_fail(op, "bad slice bounds");
            Shape os = x.shape();
            os[axis] = attrs.end - attrs.begin;
            Tensor<T> out(os);
            const auto sp = split_at(x.shape(), axis);
            auto xv = x.data();
            auto o = out.mutable_data();
            const std::size_t len = os[axis];
            for (std::size_t a = 0; a < sp.outer; ++a)
                std::copy_n(xv.data() + (a * sp.len + attrs.begin) * sp.inner, len * sp.inner,
                            o.data() + a * len * sp.inner);
            node.value = std::move(out);
            break;
        }
        case OpId::mean: {
            need_inputs(1, 1);
            const auto& x = in(0);
            auto xv = x.data();
            if (attrs.axis < 0) {
                T s{0};
                for (T v : xv) s += v;
                node.value = Tensor<T>::scalar(s / static_cast<T>(x.size()));
            } else {
                const std::size_t axis = norm_axis(op, attrs.axis, x.rank());
                const auto sp = split_at(x.shape(), axis);
                Shape os;
                for (std::size_t d = 0; d < x.rank(); ++d)
                    if (d != axis) os.push_back(x.dim(d));
                if (os.empty()) os.push_back(1);
                Tensor<T> out(os);
                auto o = out.mutable_data();
                for (std::size_t a = 0; a < sp.outer; ++a)
                    for (std::size_t b = 0; b < sp.inner; ++b) {
                        T s{0};
                        for (std::size_t l = 0; l < sp.len; ++l) s += xv[(a * sp.len + l) * sp.inner + b];
                        o[a * sp.inner + b] = s / static_cast<T>(sp.len);
                    }
                node.value = std::move(out);
            }
            break;
        }
        case OpId::sum_sq: {
            need_inputs(1, 1);
            T s{0};
            for (T v : in(0).data()) s += v * v;
            node.value = Tensor<T>::scalar(s);
            break;
        }
        case OpId::abs: {
            need_inputs(1, 1);
            Tensor<T> out(in(0).shape());
            auto xv = in(0).data();
            auto o = out.mutable_data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::abs(xv[i]);
            node.value = std::move(out);
            break;
        }
        case OpId::l2_normalize: {
            need_inputs(1, 1);
            const auto& x = in(0);
            const auto sp = split_at(x.shape(), norm_axis(op, attrs.axis, x.rank()));
            Tensor<T> out(x.shape());
            Tensor<T> norms(Shape{sp.outer * sp.inner});
            auto xv = x.data();
            auto o = out.mutable_data();
            for (std::size_t a = 0; a < sp.outer; ++a)
                for (std::size_t b = 0; b < sp.inner; ++b) {
                    const std::size_t base = a * sp.len * sp.inner + b;
                    T ss{0};
                    for (std::size_t l = 0; l < sp.len; ++l) ss += xv[base + l * sp.inner] * xv[base + l * sp.inner];
                    const T nrm = std::max(std::sqrt(ss), static_cast<T>(kL2NormEps));
                    norms[a * sp.inner + b] = nrm;
                    for (std::size_t l = 0; l < sp.len; ++l) o[base + l * sp.inner] = xv[base + l * sp.inner] / nrm;
                }
            node.value = std::move(out);
            node.saved.push_back(std::move(norms));
            break;
        }
        case OpId::leaf:
            break;
    }

    if (!node.value.all_finite()) throw NumericError(std::string(op_name(op)) + ": non-finite output");
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
}

// ---------------------------------------------------------------------------
// Backward

template <typename T>
Gradients<T> Graph<T>::backward(Var<T> output) const {
    return backward(output, Tensor<T>(nodes_.at(output.id).value.shape(), T(1)));
}

template <typename T>
Gradients<T> Graph<T>::backward(Var<T> output, const Tensor<T>& seed) const {
    if (output.graph != this) throw NumericError("backward: output from a different graph");
    const auto& out_node = nodes_.at(output.id);
    if (seed.shape() != out_node.value.shape())
        throw ShapeError("backward: seed shape " + to_string(seed.shape()) + " does not match output " +
                         to_string(out_node.value.shape()));

    std::vector<std::optional<Tensor<T>>> grads(output.id + 1);
    grads[output.id] = seed;
    for (std::size_t id = output.id + 1; id-- > 0;) {
        const Node& node = nodes_[id];
        if (!grads[id] || !node.requires_grad || node.op == OpId::leaf) continue;
        adjoint(node, *grads[id], grads);
        // intermediate adjoints are no longer needed once propagated
        grads[id].reset();
    }

    Gradients<T> result;
    for (std::size_t id = 0; id <= output.id; ++id) {
        const Node& node = nodes_[id];
        if (node.op != OpId::leaf || !node.requires_grad) continue;
        if (!grads[id])
            throw NumericError("backward: requires_grad leaf " + std::to_string(id) + " never reached from output");
        if (!grads[id]->all_finite()) throw NumericError("backward: non-finite gradient at leaf " + std::to_string(id));
        result.grads_.emplace_back(id, std::move(*grads[id]));
    }
    return result;
}

template <typename T>
void Graph<T>::adjoint(const Node& node, const Tensor<T>& g,
                       std::vector<std::optional<Tensor<T>>>& grads) const {
    auto input = [&](std::size_t i) -> const Tensor<T>& { return nodes_[node.inputs[i]].value; };
    auto wants = [&](std::size_t i) { return i < node.inputs.size() && nodes_[node.inputs[i]].requires_grad; };
    auto accumulate = [&](std::size_t i, Tensor<T> delta) {
        auto& slot = grads[node.inputs[i]];
        if (!slot)
            slot = std::move(delta);
        else
            add_into(*slot, delta);
    };
    const auto gv = g.data();
    const auto& at = node.attrs;

    switch (node.op) {
        case OpId::leaf:
            break;
        case OpId::matmul: {
            const auto& a = input(0);
            const auto& b = input(1);
            const std::size_t m = at.trans_a ? a.dim(1) : a.dim(0);
            const std::size_t k = at.trans_a ? a.dim(0) : a.dim(1);
            const std::size_t n = at.trans_b ? b.dim(0) : b.dim(1);
            if (wants(0)) {
                Tensor<T> da(a.shape());
                if (!at.trans_a)  // dA = dC op(B)^T
                    gemm(false, !at.trans_b, m, k, n, gv.data(), b.data().data(), da.mutable_data().data());
                else  // dA = op(B) dC^T
                    gemm(at.trans_b, true, k, m, n, b.data().data(), gv.data(), da.mutable_data().data());
                accumulate(0, std::move(da));
            }
            if (wants(1)) {
                Tensor<T> db(b.shape());
                if (!at.trans_b)  // dB = op(A)^T dC
                    gemm(!at.trans_a, false, k, n, m, a.data().data(), gv.data(), db.mutable_data().data());
                else  // dB = dC^T op(A)
                    gemm(true, at.trans_a, n, k, m, gv.data(), a.data().data(), db.mutable_data().data());
                accumulate(1, std::move(db));
            }
            break;
        }
        case OpId::conv1x1: {
            const auto& x = input(0);
            const auto& w = input(1);
            const std::size_t cout = w.dim(0), cin = x.dim(0), P = x.dim(1) * x.dim(2);
            if (wants(0)) {
                Tensor<T> dx(x.shape());
                gemm(true, false, cin, P, cout, w.data().data(), gv.data(), dx.mutable_data().data());
                accumulate(0, std::move(dx));
            }
            if (wants(1)) {
                Tensor<T> dw(w.shape());
                gemm(false, true, cout, cin, P, gv.data(), x.data().data(), dw.mutable_data().data());
                accumulate(1, std::move(dw));
            }
            if (wants(2)) {
                Tensor<T> db(input(2).shape());
                for (std::size_t c = 0; c < cout; ++c) {
                    T s{0};
                    for (std::size_t p = 0; p < P; ++p) s += gv[c * P + p];
                    db[c] = s;
                }
                accumulate(2, std::move(db));
            }
            break;
        }
        case OpId::dwconv3x3: {
            const auto& x = input(0);
            const auto& w = input(1);
            const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
            const bool want_x = wants(0), want_w = wants(1);
            Tensor<T> dx = want_x ? Tensor<T>(x.shape()) : Tensor<T>();
            Tensor<T> dw = want_w ? Tensor<T>(w.shape()) : Tensor<T>();
            auto xv = x.data();
            auto wv = w.data();
            for (std::size_t c = 0; c < C; ++c) {
                const T* xc = xv.data() + c * H * W;
                const T* gc = gv.data() + c * H * W;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dxo = -1; dxo <= 1; ++dxo) {
                        const std::size_t tap = c * 9 + (dy + 1) * 3 + (dxo + 1);
                        const T wt = wv[tap];
                        const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? H - 1 : H;
                        const std::size_t x0 = dxo < 0 ? 1 : 0, x1 = dxo > 0 ? W - 1 : W;
                        T acc{0};
                        for (std::size_t y = y0; y < y1; ++y) {
                            const std::size_t srow = (y + dy) * W + dxo;
                            const T* grow = gc + y * W;
                            if (want_x) {
                                T* drow = dx.mutable_data().data() + c * H * W + srow;
                                for (std::size_t xi = x0; xi < x1; ++xi) drow[xi] += wt * grow[xi];
                            }
                            if (want_w) {
                                const T* xrow = xc + srow;
                                for (std::size_t xi = x0; xi < x1; ++xi) acc += grow[xi] * xrow[xi];
                            }
                        }
                        if (want_w) dw[tap] += acc;
                    }
            }
            if (want_x) accumulate(0, std::move(dx));
            if (want_w) accumulate(1, std::move(dw));
            if (wants(2)) {
                Tensor<T> db(input(2).shape());
                for (std::size_t c = 0; c < C; ++c) {
                    T s{0};
                    for (std::size_t p = 0; p < H * W; ++p) s += gv[c * H * W + p];
                    db[c] = s;
                }
                accumulate(2, std::move(db));
            }
            break;
        }
        case OpId::add:
        case OpId::sub:
        case OpId::mul: {
            const auto& a = input(0);
            const auto& b = input(1);
            const auto bc = make_broadcast(node.op, a.shape(), b.shape());
            if (wants(0)) {
                Tensor<T> da(a.shape());
                auto d = da.mutable_data();
                if (node.op == OpId::mul) {
                    auto bv = b.data();
                    for_each_broadcast(bc, d.size(), [&](std::size_t i, std::size_t j) { d[i] = gv[i] * bv[j]; });
                } else {
                    std::copy(gv.begin(), gv.end(), d.begin());
                }
                accumulate(0, std::move(da));
            }
            if (wants(1)) {
                Tensor<T> db(b.shape());
                auto d = db.mutable_data();
                if (node.op == OpId::mul) {
                    auto av = a.data();
                    for_each_broadcast(bc, gv.size(), [&](std::size_t i, std::size_t j) { d[j] += gv[i] * av[i]; });
                } else if (node.op == OpId::add) {
                    for_each_broadcast(bc, gv.size(), [&](std::size_t i, std::size_t j) { d[j] += gv[i]; });
                } else {
                    for_each_broadcast(bc, gv.size(), [&](std::size_t i, std::size_t j) { d[j] -= gv[i]; });
                }
                accumulate(1, std::move(db));
            }
            break;
        }
        case OpId::scale: {
            Tensor<T> dx(g.shape());
            auto d = dx.mutable_data();
            const T f = static_cast<T>(at.scalar);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = f * gv[i];
            accumulate(0, std::move(dx));
            break;
        }
        case OpId::div: {
            const auto& x = input(0);
            const T s = input(1)[0];
            const T floor = static_cast<T>(at.scalar);
            const T d = std::max(s, floor);
            if (wants(0)) {
                Tensor<T> dx(x.shape());
                auto dd = dx.mutable_data();
                for (std::size_t i = 0; i < dd.size(); ++i) dd[i] = gv[i] / d;
                accumulate(0, std::move(dx));
            }
            if (wants(1)) {
                T acc{0};
                if (s > floor) {
                    auto xv = x.data();
                    for (std::size_t i = 0; i < xv.size(); ++i) acc -= gv[i] * xv[i];
                    acc /= d * d;
                }
                accumulate(1, Tensor<T>(input(1).shape(), acc));
            }
            break;
        }
        case OpId::layernorm: {
            const auto& x = input(0);
            const auto& w = input(1);
            const auto& xhat = node.saved[0];
            const auto& rstd = node.saved[1];
            const std::size_t C = x.dim(0), P = x.size() / C;
            auto xh = xhat.data();
            auto wv = w.data();
            if (wants(1)) {
                Tensor<T> dw(w.shape());
                for (std::size_t c = 0; c < C; ++c) {
                    T s{0};
                    for (std::size_t p = 0; p < P; ++p) s += gv[c * P + p] * xh[c * P + p];
                    dw[c] = s;
                }
                accumulate(1, std::move(dw));
            }
            if (wants(2)) {
                Tensor<T> db(input(2).shape());
                for (std::size_t c = 0; c < C; ++c) {
                    T s{0};
                    for (std::size_t p = 0; p < P; ++p) s += gv[c * P + p];
                    db[c] = s;
                }
                accumulate(2, std::move(db));
            }
            if (wants(0)) {
                Tensor<T> dx(x.shape());
                auto d = dx.mutable_data();
                const T invC = T(1) / static_cast<T>(C);
                for (std::size_t p = 0; p < P; ++p) {
                    T m1{0}, m2{0};
                    for (std::size_t c = 0; c < C; ++c) {
                        const T dh = gv[c * P + p] * wv[c];
                        m1 += dh;
                        m2 += dh * xh[c * P + p];
                    }
                    m1 *= invC;
                    m2 *= invC;
                    for (std::size_t c = 0; c < C; ++c) {
                        const T dh = gv[c * P + p] * wv[c];
                        d[c * P + p] = rstd[p] * (dh - m1 - xh[c * P + p] * m2);
                    }
                }
                accumulate(0, std::move(dx));
            }
            break;
        }
        case OpId::softmax: {
            const auto& y = node.value;
            const auto sp = split_at(y.shape(), static_cast<std::size_t>(at.axis));
            Tensor<T> dx(y.shape());
            auto yv = y.data();
            auto d = dx.mutable_data();
            for (std::size_t a = 0; a < sp.outer; ++a)
                for (std::size_t b = 0; b < sp.inner; ++b) {
                    const std::size_t base = a * sp.len * sp.inner + b;
                    T dot{0};
                    for (std::size_t l = 0; l < sp.len; ++l) dot += gv[base + l * sp.inner] * yv[base + l * sp.inner];
                    for (std::size_t l = 0; l < sp.len; ++l) {
                        const std::size_t i = base + l * sp.inner;
                        d[i] = yv[i] * (gv[i] - dot);
                    }
                }
            accumulate(0, std::move(dx));
            break;
        }
        case OpId::gelu: {
            const auto& x = input(0);
            Tensor<T> dx(x.shape());
            auto xv = x.data();
            auto d = dx.mutable_data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = gv[i] * gelu_deriv(xv[i]);
            accumulate(0, std::move(dx));
            break;
        }
        case OpId::space_to_channel: {
            const auto& x = input(0);
            const S2CIndex ix{x.dim(0), x.dim(1), x.dim(2), at.factor};
            Tensor<T> dx(x.shape());
            auto d = dx.mutable_data();
            for (std::size_t c = 0; c < ix.C; ++c)
                for (std::size_t y = 0; y < ix.H; ++y)
                    for (std::size_t xx = 0; xx < ix.W; ++xx) d[(c * ix.H + y) * ix.W + xx] = gv[ix.out(c, y, xx)];
            accumulate(0, std::move(dx));
            break;
        }
        case OpId::channel_to_space: {
            const auto& x = input(0);
            const std::size_t r = at.factor;
            const S2CIndex ix{x.dim(0) / (r * r), x.dim(1) * r, x.dim(2) * r, r};
            Tensor<T> dx(x.shape());
            auto d = dx.mutable_data();
            for (std::size_t c = 0; c < ix.C; ++c)
                for (std::size_t y = 0; y < ix.H; ++y)
                    for (std::size_t xx = 0; xx < ix.W; ++xx) d[ix.out(c, y, xx)] = gv[(c * ix.H + y) * ix.W + xx];
            accumulate(0, std::move(dx));
            break;
        }
        case OpId::reshape:
            accumulate(0, g.reshaped(input(0).shape()));
            break;
        case OpId::concat: {
            const std::size_t axis = static_cast<std::size_t>(at.axis);
            const auto osp = split_at(g.shape(), axis);
            std::size_t offset = 0;
            for (std::size_t i = 0; i < node.inputs.size(); ++i) {
                const auto& t = input(i);
                const auto sp = split_at(t.shape(), axis);
                if (wants(i)) {
                    Tensor<T> dt(t.shape());
                    auto d = dt.mutable_data();
                    for (std::size_t a = 0; a < sp.outer; ++a)
                        std::copy_n(gv.data() + a * osp.len * osp.inner + offset * osp.inner, sp.len * sp.inner,
                                    d.data() + a * sp.len * sp.inner);
                    accumulate(i, std::move(dt));
                }
                offset += sp.len;
            }
            break;
        }
        case OpId::slice: {
            const auto& x = input(0);
            const std::size_t axis = static_cast<std::size_t>(at.axis);
            const auto sp = split_at(x.shape(), axis);
            const std::size_t len = at.end - at.begin;
            Tensor<T> dx(x.shape());
            auto d = dx.mutable_data();
            for (std::size_t a = 0; a < sp.outer; ++a)
                std::copy_n(gv.data() + a * len * sp.inner, len * sp.inner,
                            d.data() + (a * sp.len + at.begin) * sp.inner);
            accumulate(0, std::move(dx));
            break;
        }
        case OpId::mean: {
            const auto& x = input(0);
            Tensor<T> dx(x.shape());
            auto d = dx.mutable_data();
            if (at.axis < 0) {
                const T v = gv[0] / static_cast<T>(x.size());
                std::fill(d.begin(), d.end(), v);
            } else {
                const auto sp = split_at(x.shape(), static_cast<std::size_t>(at.axis));
                const T inv = T(1) / static_cast<T>(sp.len);
                for (std::size_t a = 0; a < sp.outer; ++a)
                    for (std::size_t l = 0; l < sp.len; ++l)
                        for (std::size_t b = 0; b < sp.inner; ++b)
                            d[(a * sp.len + l) * sp.inner + b] = gv[a * sp.inner + b] * inv;
            }
            accumulate(0, std::move(dx));
            break;
        }
        case OpId::sum_sq: {
            const auto& x = input(0);
            Tensor<T> dx(x.shape());
            auto xv = x.data();
            auto d = dx.mutable_data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = T(2) * xv[i] * gv[0];
            accumulate(0, std::move(dx));
            break;
        }
        case OpId::abs: {
            const auto& x = input(0);
            Tensor<T> dx(x.shape());
            auto xv = x.data();
            auto d = dx.mutable_data();
            for (std::size_t i = 0; i < d.size(); ++i)
                d[i] = xv[i] > T(0) ? gv[i] : (xv[i] < T(0) ? -gv[i] : T(0));
            accumulate(0, std::move(dx));
            break;
        }
        case OpId::l2_normalize: {
            const auto& y = node.value;
            const auto& norms = node.saved[0];
            const auto sp = split_at(y.shape(), static_cast<std::size_t>(at.axis));
            Tensor<T> dx(y.shape());
            auto yv = y.data();
            auto d = dx.mutable_data();
            for (std::size_t a = 0; a < sp.outer; ++a)
                for (std::size_t b = 0; b < sp.inner; ++b) {
                    const std::size_t base = a * sp.len * sp.inner + b;
                    const T nrm = norms[a * sp.inner + b];
                    const bool clamped = nrm <= static_cast<T>(kL2NormEps);
                    T dot{0};
                    if (!clamped)
                        for (std::size_t l = 0; l < sp.len; ++l)
                            dot += gv[base + l * sp.inner] * yv[base + l * sp.inner];
                    for (std::size_t l = 0; l < sp.len; ++l) {
                        const std::size_t i = base + l * sp.inner;
                        d[i] = (gv[i] - yv[i] * dot) / nrm;
                    }
                }
            accumulate(0, std::move(dx));
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// Front-ends

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a, bool trans_b) {
    OpAttrs at;
    at.trans_a = trans_a;
    at.trans_b = trans_b;
    return a.graph->apply(OpId::matmul, {a, b}, at);
}
template <typename T>
Var<T> conv1x1(Var<T> x, Var<T> w) {
    return x.graph->apply(OpId::conv1x1, {x, w});
}
template <typename T>
Var<T> conv1x1(Var<T> x, Var<T> w, Var<T> b) {
    return x.graph->apply(OpId::conv1x1, {x, w, b});
}
template <typename T>
Var<T> dwconv3x3(Var<T> x, Var<T> w) {
    return x.graph->apply(OpId::dwconv3x3, {x, w});
}
template <typename T>
Var<T> dwconv3x3(Var<T> x, Var<T> w, Var<T> b) {
    return x.graph->apply(OpId::dwconv3x3, {x, w, b});
}
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    return a.graph->apply(OpId::add, {a, b});
}
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    return a.graph->apply(OpId::sub, {a, b});
}
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    return a.graph->apply(OpId::mul, {a, b});
}
template <typename T>
Var<T> scale(Var<T> x, double factor) {
    OpAttrs at;
    at.scalar = factor;
    return x.graph->apply(OpId::scale, {x}, at);
}
template <typename T>
Var<T> div(Var<T> x, Var<T> s, double floor) {
    OpAttrs at;
    at.scalar = floor;
    return x.graph->apply(OpId::div, {x, s}, at);
}
template <typename T>
Var<T> layernorm(Var<T> x, Var<T> w, Var<T> b) {
    return x.graph->apply(OpId::layernorm, {x, w, b});
}
template <typename T>
Var<T> softmax(Var<T> x, int axis) {
    OpAttrs at;
    at.axis = axis;
    return x.graph->apply(OpId::softmax, {x}, at);
}
template <typename T>
Var<T> gelu(Var<T> x) {
    return x.graph->apply(OpId::gelu, {x});
}
template <typename T>
Var<T> space_to_channel(Var<T> x, std::size_t r) {
    OpAttrs at;
    at.factor = r;
    return x.graph->apply(OpId::space_to_channel, {x}, at);
}
template <typename T>
Var<T> channel_to_space(Var<T> x, std::size_t r) {
    OpAttrs at;
    at.factor = r;
    return x.graph->apply(OpId::channel_to_space, {x}, at);
}
template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
    OpAttrs at;
    at.shape = std::move(shape);
    return x.graph->apply(OpId::reshape, {x}, at);
}
template <typename T>
Var<T> concat(std::span<const Var<T>> xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: needs at least one input");
    OpAttrs at;
    at.axis = axis;
    return xs.front().graph->apply(OpId::concat, xs, at);
}
template <typename T>
Var<T> slice(Var<T> x, int axis, std::size_t begin, std::size_t end) {
    OpAttrs at;
    at.axis = axis;
    at.begin = begin;
    at.end = end;
    return x.graph->apply(OpId::slice, {x}, at);
}
template <typename T>
Var<T> mean(Var<T> x) {
    return x.graph->apply(OpId::mean, {x});
}
template <typename T>
Var<T> mean(Var<T> x, int axis) {
    if (axis < 0) throw ShapeError("mean: axis must be non-negative");
    OpAttrs at;
    at.axis = axis;
    return x.graph->apply(OpId::mean, {x}, at);
}
template <typename T>
Var<T> sum_sq(Var<T> x) {
    return x.graph->apply(OpId::sum_sq, {x});
}
template <typename T>
Var<T> abs(Var<T> x) {
    return x.graph->apply(OpId::abs, {x});
}
template <typename T>
Var<T> l2_normalize(Var<T> x, int axis) {
    OpAttrs at;
    at.axis = axis;
    return x.graph->apply(OpId::l2_normalize, {x}, at);
}

#define LDPET_INSTANTIATE_OPS(T)                                                  \
    template Var<T> matmul(Var<T>, Var<T>, bool, bool);                           \
    template Var<T> conv1x1(Var<T>, Var<T>);                                      \
    template Var<T> conv1x1(Var<T>, Var<T>, Var<T>);                              \
    template Var<T> dwconv3x3(Var<T>, Var<T>);                                    \
    template Var<T> dwconv3x3(Var<T>, Var<T>, Var<T>);                            \
    template Var<T> add(Var<T>, Var<T>);                                          \
    template Var<T> sub(Var<T>, Var<T>);                                          \
    template Var<T> mul(Var<T>, Var<T>);                                          \
    template Var<T> scale(Var<T>, double);                                        \
    template Var<T> div(Var<T>, Var<T>, double);                                  \
    template Var<T> layernorm(Var<T>, Var<T>, Var<T>);                            \
    template Var<T> softmax(Var<T>, int);                                         \
    template Var<T> gelu(Var<T>);                                                 \
    template Var<T> space_to_channel(Var<T>, std::size_t);                        \
    template Var<T> channel_to_space(Var<T>, std::size_t);                        \
    template Var<T> reshape(Var<T>, Shape);                                       \
    template Var<T> concat(std::span<const Var<T>>, int);                         \
    template Var<T> slice(Var<T>, int, std::size_t, std::size_t);                 \
    template Var<T> mean(Var<T>);                                                 \
    template Var<T> mean(Var<T>, int);                                            \
    template Var<T> sum_sq(Var<T>);                                               \
    template Var<T> abs(Var<T>);                                                  \
    template Var<T> l2_normalize(Var<T>, int);

LDPET_INSTANTIATE_OPS(float)
LDPET_INSTANTIATE_OPS(double)

template class Graph<float>;
template class Graph<double>;
template class Gradients<float>;
template class Gradients<double>;
template struct Var<float>;
template struct Var<double>;

}  // namespace ldpet::numeric
