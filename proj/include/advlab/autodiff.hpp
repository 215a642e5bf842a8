#pragma once

// Tape-based reverse-mode automatic differentiation over dense tensors.
//
// A Graph is an append-only tape of nodes; parents always precede children,
// so the tape is acyclic by construction and a reverse index walk is a valid
// topological order. Backward rules are expressed in terms of the same tensor
// operations as the forward pass: when grad() is called with create_graph set,
// the backward computation is recorded onto the tape and the returned
// gradients are themselves differentiable (double backprop). Without
// create_graph the identical rules run detached and nothing is recorded.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "advlab/detail/kernels.hpp"

namespace advlab::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i)
        r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::invalid_argument("advlab: " + msg);
}

enum class Op : std::uint8_t {
    leaf,
    add, sub, mul, div_el, smul, scalar_mul, scalar_add,
    matmul, transpose, dot, sum, bcast_scalar,
    row_sum, col_sum, tile_rows, tile_cols,
    gather_rows, scatter_rows,
    relu, sign, clamp, sqrt_el, log_el, exp_el,
    reshape, pad_zero, crop,
    conv2d, conv2d_dgrad, conv2d_wgrad,
    maxpool2, pool_scatter, pool_gather,
    chan_sum, chan_bcast,
};

template <class Real>
using DataPtr = std::shared_ptr<const std::vector<Real>>;

using IntsPtr = std::shared_ptr<const std::vector<std::int64_t>>;

template <class Real>
struct Node {
    Op op = Op::leaf;
    bool requires_grad = false;  // meaningful on leaves only
    Shape shape;
    DataPtr<Real> value;
    std::vector<std::uint32_t> parents;
    Real s0 = 0, s1 = 0;  // scalar payload (scalar_mul factor, clamp bounds, ...)
    IntsPtr ints;         // index payload (labels, pool argmax, pad widths)
};

// Single-writer while recording; immutable and safe for concurrent reads once
// no further operations are appended. Deque storage keeps node references
// stable while backward rules append to the tape they are reading.
template <class Real>
class Graph {
public:
    std::size_t size() const { return nodes_.size(); }
    const Node<Real>& at(std::size_t i) const { return nodes_[i]; }
    std::uint32_t push(Node<Real>&& n) {
        nodes_.push_back(std::move(n));
        return static_cast<std::uint32_t>(nodes_.size() - 1);
    }

private:
    std::deque<Node<Real>> nodes_;
};

template <class Real>
using GraphPtr = std::shared_ptr<Graph<Real>>;

inline constexpr std::uint32_t kNoNode = 0xFFFFFFFFu;

// A shaped array of reals with an optional handle into a Graph. Tensors with
// graph == nullptr are constants; operations on them evaluate numerically and
// record nothing.
template <class Real>
struct Tensor {
    Shape shape;
    DataPtr<Real> data;
    GraphPtr<Real> graph;
    std::uint32_t node = kNoNode;

    bool defined() const { return static_cast<bool>(data); }
    bool tracked() const { return graph != nullptr; }
    std::size_t numel() const { return ad::numel(shape); }

    Real scalar() const {
        if (numel() != 1) fail("scalar() on tensor of shape " + shape_str(shape));
        return (*data)[0];
    }
    const std::vector<Real>& values() const { return *data; }

    Tensor detached() const { return Tensor{shape, data, nullptr, kNoNode}; }
};

template <class Real>
Tensor<Real> constant(Shape shape, std::vector<Real> values) {
    if (numel(shape) != values.size())
        fail("constant: " + std::to_string(values.size()) +
             " values for shape " + shape_str(shape));
    return Tensor<Real>{std::move(shape),
                        std::make_shared<const std::vector<Real>>(std::move(values)),
                        nullptr, kNoNode};
}

template <class Real>
Tensor<Real> scalar_const(Real v) {
    return constant<Real>({}, {v});
}

template <class Real>
Tensor<Real> zeros(Shape shape) {
    std::vector<Real> v(numel(shape), Real(0));
    return constant<Real>(std::move(shape), std::move(v));
}

template <class Real>
Tensor<Real> leaf(const GraphPtr<Real>& g, Shape shape, std::vector<Real> values,
                  bool requires_grad) {
    if (!g) fail("leaf: null graph");
    if (numel(shape) != values.size())
        fail("leaf: " + std::to_string(values.size()) + " values for shape " +
             shape_str(shape));
    Node<Real> n;
    n.op = Op::leaf;
    n.requires_grad = requires_grad;
    n.shape = shape;
    n.value = std::make_shared<const std::vector<Real>>(std::move(values));
    auto idx = g->push(std::move(n));
    return Tensor<Real>{std::move(shape), g->at(idx).value, g, idx};
}

namespace detail {

template <class Real>
struct Arg {
    const Shape* shape;
    const std::vector<Real>* v;
};

template <class Real>
void check_finite_payload(const Node<Real>&) {}

// Forward evaluation of one node from its parents' values. Used both when an
// operation is first built and when a graph is replayed, so recorded and
// replayed values are computed by the same code.
template <class Real>
std::vector<Real> eval_op(const Node<Real>& n, const std::vector<Arg<Real>>& in) {
    auto& shp = n.shape;
    std::vector<Real> out(numel(shp));
    switch (n.op) {
        case Op::leaf:
            fail("eval_op on leaf");
        case Op::add: {
            const auto &a = *in[0].v, &b = *in[1].v;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
            break;
        }
        case Op::sub: {
            const auto &a = *in[0].v, &b = *in[1].v;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
            break;
        }
        case Op::mul: {
            const auto &a = *in[0].v, &b = *in[1].v;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
            break;
        }
        case Op::div_el: {
            const auto &a = *in[0].v, &b = *in[1].v;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
            break;
        }
        case Op::smul: {  // scalar tensor * tensor
            const Real s = (*in[0].v)[0];
            const auto& t = *in[1].v;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * t[i];
            break;
        }
        case Op::scalar_mul: {
            const auto& a = *in[0].v;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = n.s0 * a[i];
            break;
        }
        case Op::scalar_add: {
            const auto& a = *in[0].v;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = n.s0 + a[i];
            break;
        }
        case Op::matmul: {
            const std::size_t M = (*in[0].shape)[0], K = (*in[0].shape)[1],
                              N = (*in[1].shape)[1];
            advlab::ad::detail::matmul(out.data(), in[0].v->data(), in[1].v->data(),
                                       M, K, N);
            break;
        }
        case Op::transpose: {
            const std::size_t M = (*in[0].shape)[0], N = (*in[0].shape)[1];
            const auto& a = *in[0].v;
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t j = 0; j < N; ++j) out[j * M + i] = a[i * N + j];
            break;
        }
        case Op::dot: {
            const auto &a = *in[0].v, &b = *in[1].v;
            Real acc = 0;
            for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
            out[0] = acc;
            break;
        }
        case Op::sum: {
            Real acc = 0;
            for (Real v : *in[0].v) acc += v;
            out[0] = acc;
            break;
        }
        case Op::bcast_scalar: {
            const Real s = (*in[0].v)[0];
            for (auto& o : out) o = s;
            break;
        }
        case Op::row_sum: {
            const std::size_t N = (*in[0].shape)[0], C = (*in[0].shape)[1];
            const auto& a = *in[0].v;
            for (std::size_t i = 0; i < N; ++i) {
                Real acc = 0;
                for (std::size_t j = 0; j < C; ++j) acc += a[i * C + j];
                out[i] = acc;
            }
            break;
        }
        case Op::col_sum: {
            const std::size_t N = (*in[0].shape)[0], C = (*in[0].shape)[1];
            const auto& a = *in[0].v;
            for (std::size_t j = 0; j < C; ++j) {
                Real acc = 0;
                for (std::size_t i = 0; i < N; ++i) acc += a[i * C + j];
                out[j] = acc;
            }
            break;
        }
        case Op::tile_rows: {  // [C] -> [N,C]
            const std::size_t N = shp[0], C = shp[1];
            const auto& a = *in[0].v;
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < C; ++j) out[i * C + j] = a[j];
            break;
        }
        case Op::tile_cols: {  // [N] -> [N,C]
            const std::size_t N = shp[0], C = shp[1];
            const auto& a = *in[0].v;
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < C; ++j) out[i * C + j] = a[i];
            break;
        }
        case Op::gather_rows: {  // [N,C],[idx N] -> [N]
            const std::size_t C = (*in[0].shape)[1];
            const auto& a = *in[0].v;
            const auto& idx = *n.ints;
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = a[i * C + static_cast<std::size_t>(idx[i])];
            break;
        }
        case Op::scatter_rows: {  // [N],[idx N] -> [N,C]
            const std::size_t C = shp[1];
            const auto& a = *in[0].v;
            const auto& idx = *n.ints;
            std::fill(out.begin(), out.end(), Real(0));
            for (std::size_t i = 0; i < a.size(); ++i)
                out[i * C + static_cast<std::size_t>(idx[i])] = a[i];
            break;
        }
        case Op::relu: {
            const auto& a = *in[0].v;
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = a[i] > Real(0) ? a[i] : Real(0);
            break;
        }
        case Op::sign: {
            const auto& a = *in[0].v;
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = a[i] > Real(0) ? Real(1) : (a[i] < Real(0) ? Real(-1) : Real(0));
            break;
        }
        case Op::clamp: {
            const auto& a = *in[0].v;
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = a[i] < n.s0 ? n.s0 : (a[i] > n.s1 ? n.s1 : a[i]);
            break;
        }
        case Op::sqrt_el: {
            const auto& a = *in[0].v;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a[i]);
            break;
        }
        case Op::log_el: {
            const auto& a = *in[0].v;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a[i]);
            break;
        }
        case Op::exp_el: {
            const auto& a = *in[0].v;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
            break;
        }
        case Op::reshape:
            out = *in[0].v;
            break;
        case Op::pad_zero: {  // ints: (before, after) per dim of the input
            const Shape& is = *in[0].shape;
            const auto& a = *in[0].v;
            const auto& pads = *n.ints;
            std::fill(out.begin(), out.end(), Real(0));
            const std::size_t rank = is.size();
            std::vector<std::size_t> idx(rank, 0);
            for (std::size_t flat = 0; flat < a.size(); ++flat) {
                std::size_t o = 0;
                for (std::size_t d = 0; d < rank; ++d)
                    o = o * shp[d] + idx[d] + static_cast<std::size_t>(pads[2 * d]);
                out[o] = a[flat];
                for (std::size_t d = rank; d-- > 0;) {
                    if (++idx[d] < is[d]) break;
                    idx[d] = 0;
                }
            }
            break;
        }
        case Op::crop: {  // ints: (before, after) per dim of the output's source
            const Shape& is = *in[0].shape;
            const auto& a = *in[0].v;
            const auto& pads = *n.ints;
            const std::size_t rank = is.size();
            std::vector<std::size_t> idx(rank, 0);
            for (std::size_t flat = 0; flat < out.size(); ++flat) {
                std::size_t src = 0;
                for (std::size_t d = 0; d < rank; ++d)
                    src = src * is[d] + idx[d] + static_cast<std::size_t>(pads[2 * d]);
                out[flat] = a[src];
                for (std::size_t d = rank; d-- > 0;) {
                    if (++idx[d] < shp[d]) break;
                    idx[d] = 0;
                }
            }
            break;
        }
        case Op::conv2d: {
            const Shape &xs = *in[0].shape, &ws = *in[1].shape;
            advlab::ad::detail::ConvDims d{xs[0], xs[1], xs[2], xs[3],
                                           ws[0], ws[2], shp[2], shp[3]};
            advlab::ad::detail::conv2d_forward(
                out.data(), in[0].v->data(), in[1].v->data(),
                in.size() > 2 ? in[2].v->data() : nullptr, d);
            break;
        }
        case Op::conv2d_dgrad: {  // (g, w) -> x-shaped
            const Shape &gs = *in[0].shape, &ws = *in[1].shape;
            advlab::ad::detail::ConvDims d{gs[0], ws[1], shp[2], shp[3],
                                           ws[0], ws[2], gs[2], gs[3]};
            advlab::ad::detail::conv2d_dgrad(out.data(), in[0].v->data(),
                                             in[1].v->data(), d);
            break;
        }
        case Op::conv2d_wgrad: {  // (x, g) -> w-shaped
            const Shape &xs = *in[0].shape, &gs = *in[1].shape;
            advlab::ad::detail::ConvDims d{xs[0], xs[1], xs[2], xs[3],
                                           gs[1], shp[2], gs[2], gs[3]};
            advlab::ad::detail::conv2d_wgrad(out.data(), in[0].v->data(),
                                             in[1].v->data(), d);
            break;
        }
        case Op::maxpool2: {
            const Shape& xs = *in[0].shape;
            std::vector<std::int64_t> amax(out.size());
            advlab::ad::detail::maxpool2_forward(out.data(), amax.data(),
                                                 in[0].v->data(), xs[0] * xs[1],
                                                 xs[2], xs[3]);
            break;  // argmax payload is fixed at recording time (see make_maxpool)
        }
        case Op::pool_scatter: {  // y-shaped values -> x-shaped at argmax slots
            const auto& a = *in[0].v;
            const auto& idx = *n.ints;
            std::fill(out.begin(), out.end(), Real(0));
            for (std::size_t i = 0; i < a.size(); ++i)
                out[static_cast<std::size_t>(idx[i])] += a[i];
            break;
        }
        case Op::pool_gather: {  // x-shaped -> y-shaped reads at argmax slots
            const auto& a = *in[0].v;
            const auto& idx = *n.ints;
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = a[static_cast<std::size_t>(idx[i])];
            break;
        }
        case Op::chan_sum: {  // [N,O,H,W] -> [O]
            const Shape& gs = *in[0].shape;
            const auto& a = *in[0].v;
            const std::size_t N = gs[0], O = gs[1], HW = gs[2] * gs[3];
            std::fill(out.begin(), out.end(), Real(0));
            for (std::size_t nn = 0; nn < N; ++nn)
                for (std::size_t o = 0; o < O; ++o) {
                    Real acc = 0;
                    const Real* p = a.data() + (nn * O + o) * HW;
                    for (std::size_t t = 0; t < HW; ++t) acc += p[t];
                    out[o] += acc;
                }
            break;
        }
        case Op::chan_bcast: {  // [O] -> [N,O,H,W]
            const auto& a = *in[0].v;
            const std::size_t N = shp[0], O = shp[1], HW = shp[2] * shp[3];
            for (std::size_t nn = 0; nn < N; ++nn)
                for (std::size_t o = 0; o < O; ++o) {
                    Real* p = out.data() + (nn * O + o) * HW;
                    for (std::size_t t = 0; t < HW; ++t) p[t] = a[o];
                }
            break;
        }
    }
    return out;
}

template <class Real>
GraphPtr<Real> common_graph(std::initializer_list<const Tensor<Real>*> ts) {
    GraphPtr<Real> g;
    for (const Tensor<Real>* t : ts) {
        if (!t->defined()) fail("operation on undefined tensor");
        if (t->graph) {
            if (g && g != t->graph) fail("operands belong to different graphs");
            g = t->graph;
        }
    }
    return g;
}

template <class Real>
std::uint32_t intern(const GraphPtr<Real>& g, const Tensor<Real>& t) {
    if (t.graph) return t.node;
    Node<Real> n;
    n.op = Op::leaf;
    n.requires_grad = false;
    n.shape = t.shape;
    n.value = t.data;
    return g->push(std::move(n));
}

// Build one op node: evaluate forward, and record iff any input is tracked.
template <class Real>
Tensor<Real> make(Op op, std::initializer_list<const Tensor<Real>*> inputs,
                  Shape out_shape, Real s0 = 0, Real s1 = 0, IntsPtr ints = nullptr) {
    GraphPtr<Real> g = common_graph<Real>(inputs);
    Node<Real> n;
    n.op = op;
    n.shape = std::move(out_shape);
    n.s0 = s0;
    n.s1 = s1;
    n.ints = std::move(ints);
    std::vector<Arg<Real>> args;
    args.reserve(inputs.size());
    for (const Tensor<Real>* t : inputs) args.push_back({&t->shape, t->data.get()});
    n.value = std::make_shared<const std::vector<Real>>(eval_op(n, args));
    if (!g) return Tensor<Real>{std::move(n.shape), n.value, nullptr, kNoNode};
    n.parents.reserve(inputs.size());
    for (const Tensor<Real>* t : inputs) n.parents.push_back(intern(g, *t));
    Shape shp = n.shape;
    DataPtr<Real> val = n.value;
    auto idx = g->push(std::move(n));
    return Tensor<Real>{std::move(shp), std::move(val), g, idx};
}

template <class Real>
void check_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape != b.shape)
        fail(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
             shape_str(b.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape("add", a, b);
    return detail::make<Real>(Op::add, {&a, &b}, a.shape);
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape("sub", a, b);
    return detail::make<Real>(Op::sub, {&a, &b}, a.shape);
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape("mul", a, b);
    return detail::make<Real>(Op::mul, {&a, &b}, a.shape);
}

template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape("div", a, b);
    return detail::make<Real>(Op::div_el, {&a, &b}, a.shape);
}

// scalar-tensor times tensor; differentiable in both arguments.
template <class Real>
Tensor<Real> smul(const Tensor<Real>& s, const Tensor<Real>& t) {
    if (s.numel() != 1) fail("smul: first argument must be scalar");
    return detail::make<Real>(Op::smul, {&s, &t}, t.shape);
}

template <class Real>
Tensor<Real> scalar_mul(const Tensor<Real>& a, Real c) {
    return detail::make<Real>(Op::scalar_mul, {&a}, a.shape, c);
}

template <class Real>
Tensor<Real> scalar_add(const Tensor<Real>& a, Real c) {
    return detail::make<Real>(Op::scalar_add, {&a}, a.shape, c);
}

template <class Real>
Tensor<Real> neg(const Tensor<Real>& a) {
    return scalar_mul(a, Real(-1));
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
    return detail::make<Real>(Op::relu, {&a}, a.shape);
}

template <class Real>
Tensor<Real> sign(const Tensor<Real>& a) {
    return detail::make<Real>(Op::sign, {&a}, a.shape);
}

template <class Real>
Tensor<Real> clamp(const Tensor<Real>& a, Real lo, Real hi) {
    if (!(lo <= hi)) fail("clamp: lo > hi");
    return detail::make<Real>(Op::clamp, {&a}, a.shape, lo, hi);
}

template <class Real>
Tensor<Real> sqrt(const Tensor<Real>& a) {
    return detail::make<Real>(Op::sqrt_el, {&a}, a.shape);
}

template <class Real>
Tensor<Real> log(const Tensor<Real>& a) {
    return detail::make<Real>(Op::log_el, {&a}, a.shape);
}

template <class Real>
Tensor<Real> exp(const Tensor<Real>& a) {
    return detail::make<Real>(Op::exp_el, {&a}, a.shape);
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        fail("matmul: incompatible shapes " + shape_str(a.shape) + " x " +
             shape_str(b.shape));
    return detail::make<Real>(Op::matmul, {&a, &b}, {a.shape[0], b.shape[1]});
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
    if (a.shape.size() != 2) fail("transpose: rank-2 tensor required");
    return detail::make<Real>(Op::transpose, {&a}, {a.shape[1], a.shape[0]});
}

template <class Real>
Tensor<Real> dot(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape("dot", a, b);
    return detail::make<Real>(Op::dot, {&a, &b}, Shape{});
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
    return detail::make<Real>(Op::sum, {&a}, Shape{});
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& a) {
    if (a.numel() == 0) fail("mean of empty tensor");
    return scalar_mul(sum(a), Real(1) / static_cast<Real>(a.numel()));
}

template <class Real>
Tensor<Real> bcast_scalar(const Tensor<Real>& s, Shape shape) {
    if (s.numel() != 1) fail("bcast_scalar: scalar required");
    return detail::make<Real>(Op::bcast_scalar, {&s}, std::move(shape));
}

template <class Real>
Tensor<Real> l2_norm(const Tensor<Real>& a) {
    return sqrt(dot(a, a));
}

template <class Real>
Tensor<Real> row_sum(const Tensor<Real>& a) {
    if (a.shape.size() != 2) fail("row_sum: rank-2 tensor required");
    return detail::make<Real>(Op::row_sum, {&a}, {a.shape[0]});
}

template <class Real>
Tensor<Real> col_sum(const Tensor<Real>& a) {
    if (a.shape.size() != 2) fail("col_sum: rank-2 tensor required");
    return detail::make<Real>(Op::col_sum, {&a}, {a.shape[1]});
}

template <class Real>
Tensor<Real> tile_rows(const Tensor<Real>& v, std::size_t n_rows) {
    if (v.shape.size() != 1) fail("tile_rows: rank-1 tensor required");
    return detail::make<Real>(Op::tile_rows, {&v}, {n_rows, v.shape[0]});
}

template <class Real>
Tensor<Real> tile_cols(const Tensor<Real>& v, std::size_t n_cols) {
    if (v.shape.size() != 1) fail("tile_cols: rank-1 tensor required");
    return detail::make<Real>(Op::tile_cols, {&v}, {v.shape[0], n_cols});
}

template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& a, const std::vector<std::int64_t>& idx) {
    if (a.shape.size() != 2 || idx.size() != a.shape[0])
        fail("gather_rows: index count must match row count");
    for (std::int64_t i : idx)
        if (i < 0 || static_cast<std::size_t>(i) >= a.shape[1])
            fail("gather_rows: index " + std::to_string(i) + " out of range for " +
                 shape_str(a.shape));
    auto p = std::make_shared<const std::vector<std::int64_t>>(idx);
    return detail::make<Real>(Op::gather_rows, {&a}, {a.shape[0]}, Real(0), Real(0), p);
}

template <class Real>
Tensor<Real> scatter_rows(const Tensor<Real>& v, IntsPtr idx, std::size_t n_cols) {
    if (v.shape.size() != 1 || !idx || idx->size() != v.shape[0])
        fail("scatter_rows: index count must match value count");
    return detail::make<Real>(Op::scatter_rows, {&v}, {v.shape[0], n_cols}, Real(0),
                              Real(0), std::move(idx));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
    if (numel(shape) != a.numel())
        fail("reshape: " + shape_str(a.shape) + " -> " + shape_str(shape) +
             " changes element count");
    return detail::make<Real>(Op::reshape, {&a}, std::move(shape));
}

// pads: (before, after) pair per dimension.
template <class Real>
Tensor<Real> pad_zero(const Tensor<Real>& a,
                      const std::vector<std::pair<std::size_t, std::size_t>>& pads) {
    if (pads.size() != a.shape.size()) fail("pad_zero: one pad pair per dimension");
    Shape out = a.shape;
    std::vector<std::int64_t> flat;
    for (std::size_t d = 0; d < pads.size(); ++d) {
        out[d] += pads[d].first + pads[d].second;
        flat.push_back(static_cast<std::int64_t>(pads[d].first));
        flat.push_back(static_cast<std::int64_t>(pads[d].second));
    }
    auto p = std::make_shared<const std::vector<std::int64_t>>(std::move(flat));
    return detail::make<Real>(Op::pad_zero, {&a}, std::move(out), Real(0), Real(0), p);
}

// Inverse of pad_zero with the same pad list.
template <class Real>
Tensor<Real> crop(const Tensor<Real>& a,
                  const std::vector<std::pair<std::size_t, std::size_t>>& pads) {
    if (pads.size() != a.shape.size()) fail("crop: one pad pair per dimension");
    Shape out = a.shape;
    std::vector<std::int64_t> flat;
    for (std::size_t d = 0; d < pads.size(); ++d) {
        if (pads[d].first + pads[d].second > a.shape[d]) fail("crop: pads exceed dim");
        out[d] -= pads[d].first + pads[d].second;
        flat.push_back(static_cast<std::int64_t>(pads[d].first));
        flat.push_back(static_cast<std::int64_t>(pads[d].second));
    }
    auto p = std::make_shared<const std::vector<std::int64_t>>(std::move(flat));
    return detail::make<Real>(Op::crop, {&a}, std::move(out), Real(0), Real(0), p);
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

// Valid cross-correlation, kernel k x k, stride 1. Bias optional.
template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>* b = nullptr) {
    if (x.shape.size() != 4 || w.shape.size() != 4)
        fail("conv2d: rank-4 input and kernel required");
    if (x.shape[1] != w.shape[1])
        fail("conv2d: channel mismatch " + shape_str(x.shape) + " vs " +
             shape_str(w.shape));
    if (w.shape[2] != w.shape[3]) fail("conv2d: square kernel required");
    const std::size_t k = w.shape[2];
    if (x.shape[2] < k || x.shape[3] < k)
        fail("conv2d: input " + shape_str(x.shape) + " smaller than kernel");
    Shape out{x.shape[0], w.shape[0], x.shape[2] - k + 1, x.shape[3] - k + 1};
    if (b) {
        if (b->shape != Shape{w.shape[0]}) fail("conv2d: bias shape mismatch");
        return detail::make<Real>(Op::conv2d, {&x, &w, b}, std::move(out));
    }
    return detail::make<Real>(Op::conv2d, {&x, &w}, std::move(out));
}

template <class Real>
Tensor<Real> conv2d_dgrad(const Tensor<Real>& g, const Tensor<Real>& w) {
    const std::size_t k = w.shape[2];
    Shape out{g.shape[0], w.shape[1], g.shape[2] + k - 1, g.shape[3] + k - 1};
    return detail::make<Real>(Op::conv2d_dgrad, {&g, &w}, std::move(out));
}

template <class Real>
Tensor<Real> conv2d_wgrad(const Tensor<Real>& x, const Tensor<Real>& g) {
    const std::size_t k = x.shape[2] - g.shape[2] + 1;
    Shape out{g.shape[1], x.shape[1], k, k};
    return detail::make<Real>(Op::conv2d_wgrad, {&x, &g}, std::move(out));
}

template <class Real>
Tensor<Real> chan_sum(const Tensor<Real>& g) {
    if (g.shape.size() != 4) fail("chan_sum: rank-4 tensor required");
    return detail::make<Real>(Op::chan_sum, {&g}, {g.shape[1]});
}

template <class Real>
Tensor<Real> chan_bcast(const Tensor<Real>& v, Shape target) {
    if (v.shape.size() != 1 || target.size() != 4 || target[1] != v.shape[0])
        fail("chan_bcast: target channel mismatch");
    return detail::make<Real>(Op::chan_bcast, {&v}, std::move(target));
}

// 2x2 max pooling, stride 2. Backward routes to the recorded argmax
// (first occurrence on ties).
template <class Real>
Tensor<Real> maxpool2(const Tensor<Real>& x) {
    if (x.shape.size() != 4) fail("maxpool2: rank-4 tensor required");
    if (x.shape[2] % 2 != 0 || x.shape[3] % 2 != 0)
        fail("maxpool2: odd spatial dims " + shape_str(x.shape));
    Shape out{x.shape[0], x.shape[1], x.shape[2] / 2, x.shape[3] / 2};
    // Evaluate here (not via make) so the argmax payload is captured on the node.
    std::vector<Real> val(numel(out));
    auto amax = std::make_shared<std::vector<std::int64_t>>(numel(out));
    detail::maxpool2_forward(val.data(), amax->data(), x.data->data(),
                             x.shape[0] * x.shape[1], x.shape[2], x.shape[3]);
    auto vp = std::make_shared<const std::vector<Real>>(std::move(val));
    IntsPtr ip = std::move(amax);
    if (!x.graph) return Tensor<Real>{std::move(out), vp, nullptr, kNoNode};
    Node<Real> n;
    n.op = Op::maxpool2;
    n.shape = out;
    n.value = vp;
    n.ints = ip;
    n.parents = {detail::intern(x.graph, x)};
    auto idx = x.graph->push(std::move(n));
    return Tensor<Real>{std::move(out), vp, x.graph, idx};
}

template <class Real>
Tensor<Real> pool_scatter(const Tensor<Real>& v, IntsPtr idx, Shape x_shape) {
    return detail::make<Real>(Op::pool_scatter, {&v}, std::move(x_shape), Real(0),
                              Real(0), std::move(idx));
}

template <class Real>
Tensor<Real> pool_gather(const Tensor<Real>& a, IntsPtr idx, Shape y_shape) {
    return detail::make<Real>(Op::pool_gather, {&a}, std::move(y_shape), Real(0),
                              Real(0), std::move(idx));
}

// ---------------------------------------------------------------------------
// grad
// ---------------------------------------------------------------------------

namespace detail {

// View of graph node `idx` either attached (recording mode) or detached.
template <class Real>
Tensor<Real> node_tensor(const GraphPtr<Real>& g, std::uint32_t idx, bool record) {
    const Node<Real>& n = g->at(idx);
    if (record) return Tensor<Real>{n.shape, n.value, g, idx};
    return Tensor<Real>{n.shape, n.value, nullptr, kNoNode};
}

template <class Real>
Tensor<Real> mask_where_positive(const std::vector<Real>& v, const Shape& shp) {
    std::vector<Real> m(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) m[i] = v[i] > Real(0) ? Real(1) : Real(0);
    return constant<Real>(shp, std::move(m));
}

// Propagate the adjoint gy of node `i` into its parents. `want(slot)` lets the
// caller skip parents whose gradient is not needed. Rules are written with the
// public tensor ops, so with record=true the backward pass lands on the tape.
template <class Real>
void backward_rule(const GraphPtr<Real>& g, std::uint32_t i, const Tensor<Real>& gy,
                   bool record, const std::function<bool(std::size_t)>& want,
                   const std::function<void(std::size_t, Tensor<Real>)>& sink) {
    const Node<Real>& n = g->at(i);
    auto parent = [&](std::size_t slot) {
        return node_tensor(g, n.parents[slot], record);
    };
    auto self = [&] { return node_tensor(g, i, record); };
    switch (n.op) {
        case Op::leaf:
            break;
        case Op::add:
            if (want(0)) sink(0, gy);
            if (want(1)) sink(1, gy);
            break;
        case Op::sub:
            if (want(0)) sink(0, gy);
            if (want(1)) sink(1, neg(gy));
            break;
        case Op::mul:
            if (want(0)) sink(0, mul(gy, parent(1)));
            if (want(1)) sink(1, mul(gy, parent(0)));
            break;
        case Op::div_el:
            if (want(0)) sink(0, div(gy, parent(1)));
            if (want(1)) sink(1, neg(mul(gy, div(self(), parent(1)))));
            break;
        case Op::smul:
            if (want(0)) sink(0, dot(gy, parent(1)));
            if (want(1)) sink(1, smul(parent(0), gy));
            break;
        case Op::scalar_mul:
            if (want(0)) sink(0, scalar_mul(gy, n.s0));
            break;
        case Op::scalar_add:
            if (want(0)) sink(0, gy);
            break;
        case Op::matmul:
            if (want(0)) sink(0, matmul(gy, transpose(parent(1))));
            if (want(1)) sink(1, matmul(transpose(parent(0)), gy));
            break;
        case Op::transpose:
            if (want(0)) sink(0, transpose(gy));
            break;
        case Op::dot:
            if (want(0)) sink(0, smul(gy, parent(1)));
            if (want(1)) sink(1, smul(gy, parent(0)));
            break;
        case Op::sum:
            if (want(0)) sink(0, bcast_scalar(gy, g->at(n.parents[0]).shape));
            break;
        case Op::bcast_scalar:
            if (want(0)) sink(0, sum(gy));
            break;
        case Op::row_sum:
            if (want(0)) sink(0, tile_cols(gy, g->at(n.parents[0]).shape[1]));
            break;
        case Op::col_sum:
            if (want(0)) sink(0, tile_rows(gy, g->at(n.parents[0]).shape[0]));
            break;
        case Op::tile_rows:
            if (want(0)) sink(0, col_sum(gy));
            break;
        case Op::tile_cols:
            if (want(0)) sink(0, row_sum(gy));
            break;
        case Op::gather_rows:
            if (want(0)) sink(0, scatter_rows(gy, n.ints, g->at(n.parents[0]).shape[1]));
            break;
        case Op::scatter_rows:
            if (want(0)) {
                std::vector<std::int64_t> idx(*n.ints);
                sink(0, gather_rows(gy, idx));
            }
            break;
        case Op::relu:
            if (want(0))
                sink(0, mul(gy, mask_where_positive<Real>(*g->at(n.parents[0]).value,
                                                          n.shape)));
            break;
        case Op::sign:
            break;  // derivative 0 everywhere it exists; contributes nothing
        case Op::clamp:
            if (want(0)) {
                const auto& xv = *g->at(n.parents[0]).value;
                std::vector<Real> m(xv.size());
                for (std::size_t t = 0; t < xv.size(); ++t)
                    m[t] = (xv[t] > n.s0 && xv[t] < n.s1) ? Real(1) : Real(0);
                sink(0, mul(gy, constant<Real>(n.shape, std::move(m))));
            }
            break;
        case Op::sqrt_el:
            if (want(0)) {
                // 0.5/sqrt(x) as a fixed coefficient, 0 at the kink. First-order
                // exact; sqrt never sits on a path that is differentiated twice.
                const auto& yv = *n.value;
                std::vector<Real> c(yv.size());
                for (std::size_t t = 0; t < yv.size(); ++t)
                    c[t] = yv[t] > Real(0) ? Real(0.5) / yv[t] : Real(0);
                sink(0, mul(gy, constant<Real>(n.shape, std::move(c))));
            }
            break;
        case Op::log_el:
            if (want(0)) sink(0, div(gy, parent(0)));
            break;
        case Op::exp_el:
            if (want(0)) sink(0, mul(gy, self()));
            break;
        case Op::reshape:
            if (want(0)) sink(0, reshape(gy, g->at(n.parents[0]).shape));
            break;
        case Op::pad_zero: {
            if (want(0)) {
                std::vector<std::pair<std::size_t, std::size_t>> pads;
                for (std::size_t d = 0; d < n.ints->size(); d += 2)
                    pads.push_back({static_cast<std::size_t>((*n.ints)[d]),
                                    static_cast<std::size_t>((*n.ints)[d + 1])});
                sink(0, crop(gy, pads));
            }
            break;
        }
        case Op::crop: {
            if (want(0)) {
                std::vector<std::pair<std::size_t, std::size_t>> pads;
                for (std::size_t d = 0; d < n.ints->size(); d += 2)
                    pads.push_back({static_cast<std::size_t>((*n.ints)[d]),
                                    static_cast<std::size_t>((*n.ints)[d + 1])});
                sink(0, pad_zero(gy, pads));
            }
            break;
        }
        case Op::conv2d:
            if (want(0)) sink(0, conv2d_dgrad(gy, parent(1)));
            if (want(1)) sink(1, conv2d_wgrad(parent(0), gy));
            if (n.parents.size() > 2 && want(2)) sink(2, chan_sum(gy));
            break;
        case Op::conv2d_dgrad:  // u(g, w)
            if (want(0)) sink(0, conv2d(gy, parent(1)));
            if (want(1)) sink(1, conv2d_wgrad(gy, parent(0)));
            break;
        case Op::conv2d_wgrad:  // v(x, g)
            if (want(0)) sink(0, conv2d_dgrad(parent(1), gy));
            if (want(1)) sink(1, conv2d(parent(0), gy));
            break;
        case Op::maxpool2:
            if (want(0)) sink(0, pool_scatter(gy, n.ints, g->at(n.parents[0]).shape));
            break;
        case Op::pool_scatter:
            if (want(0)) sink(0, pool_gather(gy, n.ints, g->at(n.parents[0]).shape));
            break;
        case Op::pool_gather:
            if (want(0)) sink(0, pool_scatter(gy, n.ints, g->at(n.parents[0]).shape));
            break;
        case Op::chan_sum:
            if (want(0)) sink(0, chan_bcast(gy, g->at(n.parents[0]).shape));
            break;
        case Op::chan_bcast:
            if (want(0)) sink(0, chan_sum(gy));
            break;
    }
}

}  // namespace detail

// Exact reverse-mode gradients of a scalar output with respect to
// requires_grad leaves. With create_graph the backward computation is itself
// recorded, so the returned tensors can be differentiated again.
template <class Real>
std::vector<Tensor<Real>> grad(const Tensor<Real>& output,
                               const std::vector<Tensor<Real>>& wrt,
                               bool create_graph = false) {
    if (!output.tracked()) fail("grad: output is not on a graph");
    if (output.numel() != 1)
        fail("grad: output must be scalar, got " + shape_str(output.shape));
    const GraphPtr<Real>& g = output.graph;
    const std::uint32_t root = output.node;

    std::vector<char> is_wrt(root + 1, 0);
    for (const Tensor<Real>& w : wrt) {
        if (w.graph != g) fail("grad: wrt tensor not on the output's graph");
        const Node<Real>& n = g->at(w.node);
        if (n.op != Op::leaf || !n.requires_grad)
            fail("grad: wrt tensor is not a requires_grad leaf");
        if (w.node <= root) is_wrt[w.node] = 1;
    }

    // desc[i]: node i depends on some wrt leaf.
    std::vector<char> desc(root + 1, 0);
    for (std::uint32_t i = 0; i <= root; ++i) {
        if (is_wrt[i]) desc[i] = 1;
        for (std::uint32_t p : g->at(i).parents)
            if (desc[p]) desc[i] = 1;
    }
    // anc[i]: output depends on node i.
    std::vector<char> anc(root + 1, 0);
    anc[root] = 1;
    for (std::uint32_t i = root + 1; i-- > 0;) {
        if (!anc[i]) continue;
        for (std::uint32_t p : g->at(i).parents) anc[p] = 1;
    }
    for (const Tensor<Real>& w : wrt)
        if (w.node > root || !anc[w.node])
            fail("grad: wrt tensor is not reachable from the output");

    std::vector<Tensor<Real>> adj(root + 1);
    adj[root] = scalar_const<Real>(1);
    for (std::uint32_t i = root + 1; i-- > 0;) {
        if (!adj[i].defined() || !desc[i]) continue;
        const Node<Real>& n = g->at(i);
        if (n.op == Op::leaf) continue;
        auto want = [&](std::size_t slot) { return desc[n.parents[slot]] != 0; };
        auto sink = [&](std::size_t slot, Tensor<Real> contrib) {
            const std::uint32_t p = n.parents[slot];
            adj[p] = adj[p].defined() ? add(adj[p], contrib) : std::move(contrib);
        };
        detail::backward_rule<Real>(g, i, adj[i], create_graph, want, sink);
    }

    std::vector<Tensor<Real>> out;
    out.reserve(wrt.size());
    for (const Tensor<Real>& w : wrt) {
        Tensor<Real> gi =
            adj[w.node].defined() ? adj[w.node] : zeros<Real>(g->at(w.node).shape);
        if (create_graph && !gi.tracked()) {
            // Constant gradient (e.g. through sum only): pin it to the graph so
            // the result is a node as promised.
            gi.node = detail::intern(g, gi);
            gi.graph = g;
        }
        out.push_back(std::move(gi));
    }
    return out;
}

// Central finite-difference gradient, (f(x+h e_i) - f(x-h e_i)) / 2h.
// Test oracle; f receives detached tensors.
template <class Real>
Tensor<Real> fd_grad(const std::function<Real(const Tensor<Real>&)>& f,
                     const Tensor<Real>& x, Real h) {
    if (!(h > Real(0))) fail("fd_grad: h must be positive");
    std::vector<Real> g(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        std::vector<Real> vp = *x.data, vm = *x.data;
        vp[i] += h;
        vm[i] -= h;
        const Real fp = f(constant<Real>(x.shape, std::move(vp)));
        const Real fm = f(constant<Real>(x.shape, std::move(vm)));
        g[i] = (fp - fm) / (2 * h);
    }
    return constant<Real>(x.shape, std::move(g));
}

// Recompute every node's forward value from leaves and operation kinds alone.
template <class Real>
std::vector<std::vector<Real>> replay(const Graph<Real>& g) {
    std::vector<std::vector<Real>> vals(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const Node<Real>& n = g.at(i);
        if (n.op == Op::leaf) {
            vals[i] = *n.value;
            continue;
        }
        std::vector<detail::Arg<Real>> args;
        args.reserve(n.parents.size());
        for (std::uint32_t p : n.parents)
            args.push_back({&g.at(p).shape, &vals[p]});
        vals[i] = detail::eval_op(n, args);
    }
    return vals;
}

template <class Real>
bool all_finite(const Tensor<Real>& t) {
    for (Real v : *t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace advlab::ad
