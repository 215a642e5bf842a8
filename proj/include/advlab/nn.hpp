#pragma once

// Layers, loss, and the 5-layer CNN:
// conv(3->6,5x5) -> relu -> pool -> conv(6->16,5x5) -> relu -> pool ->
// flatten(400) -> fc(400->120) -> relu -> fc(120->84) -> relu -> fc(84->10).
// Dimension chain on 32x32 inputs: 32 -> 28 -> 14 -> 10 -> 5.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "advlab/autodiff.hpp"
#include "advlab/rng.hpp"

namespace advlab::nn {

using ad::Shape;
using ad::Tensor;

// Subset of fully connected layers targeted by the orthogonality penalty.
struct OrthLayers {
    bool fc1 = true;
    bool fc2 = true;
    bool fc3 = true;
    bool any() const { return fc1 || fc2 || fc3; }
};

inline OrthLayers parse_orth_layers(const std::string& csv) {
    OrthLayers s{false, false, false};
    std::size_t pos = 0;
    while (pos < csv.size()) {
        std::size_t comma = csv.find(',', pos);
        if (comma == std::string::npos) comma = csv.size();
        std::string tok = csv.substr(pos, comma - pos);
        if (tok == "fc1") s.fc1 = true;
        else if (tok == "fc2") s.fc2 = true;
        else if (tok == "fc3") s.fc3 = true;
        else if (!tok.empty()) ad::fail("unknown fc layer '" + tok + "'");
        pos = comma + 1;
    }
    return s;
}

// x [N,in] * w^T [in,out] + b, w stored (out x in).
template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>& b) {
    if (x.shape.size() != 2 || w.shape.size() != 2 || x.shape[1] != w.shape[1])
        ad::fail("linear: shape mismatch " + ad::shape_str(x.shape) + " x " +
                 ad::shape_str(w.shape));
    if (b.shape != Shape{w.shape[0]}) ad::fail("linear: bias shape mismatch");
    return add(matmul(x, transpose(w)), tile_rows(b, x.shape[0]));
}

using ad::conv2d;
using ad::maxpool2;

// Mean over the batch of -log softmax(logits)[label], stabilized by
// row-max subtraction (the max is held constant; the value and all
// derivatives are unchanged by the shift).
template <class Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits,
                           const std::vector<std::int64_t>& labels) {
    if (logits.shape.size() != 2) ad::fail("cross_entropy: logits must be [N,C]");
    const std::size_t n = logits.shape[0], c = logits.shape[1];
    if (labels.size() != n) ad::fail("cross_entropy: label count mismatch");
    for (std::int64_t y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            ad::fail("cross_entropy: label " + std::to_string(y) +
                     " out of range 0.." + std::to_string(c - 1));
    std::vector<Real> mx(n);
    const auto& lv = *logits.data;
    for (std::size_t i = 0; i < n; ++i) {
        Real m = lv[i * c];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, lv[i * c + j]);
        mx[i] = m;
    }
    auto shifted = sub(logits, tile_cols(ad::constant<Real>({n}, std::move(mx)), c));
    auto lse = ad::log(row_sum(ad::exp(shifted)));        // log-sum-exp minus max
    auto picked = gather_rows(shifted, labels);           // logit[label] minus max
    return mean(sub(lse, picked));
}

// All weights and biases of the 5-layer CNN. Tensors may be plain values or
// leaves on a graph; forward works in either mode.
template <class Real>
struct Cnn5Params {
    Tensor<Real> conv1_w, conv1_b, conv2_w, conv2_b;
    Tensor<Real> fc1_w, fc1_b, fc2_w, fc2_b, fc3_w, fc3_b;

    static constexpr std::size_t kCount = 10;

    static const std::array<const char*, kCount>& names() {
        static const std::array<const char*, kCount> n = {
            "conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w",
            "fc1_b",   "fc2_w",   "fc2_b",   "fc3_w",   "fc3_b"};
        return n;
    }

    static const std::array<Shape, kCount>& shapes() {
        static const std::array<Shape, kCount> s = {
            Shape{6, 3, 5, 5}, Shape{6},        Shape{16, 6, 5, 5}, Shape{16},
            Shape{120, 400},   Shape{120},      Shape{84, 120},     Shape{84},
            Shape{10, 84},     Shape{10}};
        return s;
    }

    std::array<Tensor<Real>*, kCount> parameters() {
        return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc1_w,
                &fc1_b,   &fc2_w,   &fc2_b,   &fc3_w,   &fc3_b};
    }
    std::array<const Tensor<Real>*, kCount> parameters() const {
        return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc1_w,
                &fc1_b,   &fc2_w,   &fc2_b,   &fc3_w,   &fc3_b};
    }

    std::vector<const Tensor<Real>*> orth_weights(const OrthLayers& set) const {
        std::vector<const Tensor<Real>*> out;
        if (set.fc1) out.push_back(&fc1_w);
        if (set.fc2) out.push_back(&fc2_w);
        if (set.fc3) out.push_back(&fc3_w);
        return out;
    }

    Tensor<Real> forward(const Tensor<Real>& x) const {
        if (x.shape.size() != 4 || x.shape[1] != 3 || x.shape[2] != 32 ||
            x.shape[3] != 32)
            ad::fail("cnn5_forward: input must be [N,3,32,32], got " +
                     ad::shape_str(x.shape));
        const std::size_t n = x.shape[0];
        auto h = maxpool2(relu(conv2d(x, conv1_w, &conv1_b)));   // [N,6,14,14]
        h = maxpool2(relu(conv2d(h, conv2_w, &conv2_b)));        // [N,16,5,5]
        h = reshape(h, {n, std::size_t(400)});
        h = relu(linear(h, fc1_w, fc1_b));
        h = relu(linear(h, fc2_w, fc2_b));
        return linear(h, fc3_w, fc3_b);
    }
};

template <class Real>
void validate_shapes(const Cnn5Params<Real>& p) {
    auto ps = p.parameters();
    const auto& want = Cnn5Params<Real>::shapes();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (!ps[i]->defined() || ps[i]->shape != want[i])
            ad::fail(std::string("Cnn5Params: ") + Cnn5Params<Real>::names()[i] +
                     " must have shape " + ad::shape_str(want[i]));
    }
    // Architecture fidelity: the flatten width is the end of the 32->28->14->
    // 10->5 chain.
    static_assert(400 == 16 * 5 * 5);
}

template <class Real>
Tensor<Real> cnn5_forward(const Cnn5Params<Real>& p, const Tensor<Real>& x) {
    return p.forward(x);
}

// Deterministic seed-reproducible init, uniform in +-1/sqrt(fan_in) per layer.
template <class Real>
Cnn5Params<Real> init_params(std::uint64_t seed) {
    Rng root(seed);
    Cnn5Params<Real> p;
    auto ps = p.parameters();
    const auto& shapes = Cnn5Params<Real>::shapes();
    const auto& names = Cnn5Params<Real>::names();
    const double fan_in[Cnn5Params<Real>::kCount] = {
        3 * 25, 3 * 25, 6 * 25, 6 * 25, 400, 400, 120, 120, 84, 84};
    for (std::size_t i = 0; i < ps.size(); ++i) {
        Rng stream = root.fork("init").fork(names[i]);
        const double bound = 1.0 / std::sqrt(fan_in[i]);
        std::vector<Real> v(ad::numel(shapes[i]));
        for (auto& x : v) x = static_cast<Real>(stream.uniform(-bound, bound));
        *ps[i] = ad::constant<Real>(shapes[i], std::move(v));
    }
    validate_shapes(p);
    return p;
}

// Re-create every parameter as a leaf on g. With requires_grad the copy is a
// valid differentiation target; without, parameters are recorded constants.
template <class Real, class Model>
Model attach(const ad::GraphPtr<Real>& g, const Model& m, bool requires_grad) {
    Model c = m;
    for (Tensor<Real>* p : c.parameters())
        *p = ad::leaf(g, p->shape, std::vector<Real>(*p->data), requires_grad);
    return c;
}

}  // namespace advlab::nn
