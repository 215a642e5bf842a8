#pragma once

// Training penalties: gradient-alignment local linearity and fully connected
// orthogonality. The alignment penalty differentiates through input-gradients,
// which is where the tape's double-backprop support is exercised.

#include <cstdint>
#include <vector>

#include "advlab/attacks.hpp"
#include "advlab/autodiff.hpp"
#include "advlab/nn.hpp"
#include "advlab/rng.hpp"

namespace advlab::reg {

struct RegularizerSpec {
    double lambda_ga = 0.0;
    int ga_samples = 1;   // Monte Carlo draws of eta during training
    double tau = 1e-12;   // cosine denominator stabilizer
    double lambda_orth = 0.0;
    nn::OrthLayers orth_layers{};

    void validate() const {
        if (lambda_ga < 0 || lambda_orth < 0)
            ad::fail("RegularizerSpec: weights must be non-negative");
        if (ga_samples < 1) ad::fail("RegularizerSpec: ga_samples must be >= 1");
        if (!(tau > 0)) ad::fail("RegularizerSpec: tau must be > 0");
    }
};

// <g1,g2> / (|g1| |g2| + tau). The stabilizer makes the zero-vector case 0
// instead of undefined.
template <class Real>
ad::Tensor<Real> cosine_sim(const ad::Tensor<Real>& g1, const ad::Tensor<Real>& g2,
                            Real tau) {
    if (g1.shape != g2.shape)
        ad::fail("cosine_sim: length mismatch " + ad::shape_str(g1.shape) + " vs " +
                 ad::shape_str(g2.shape));
    auto denom = scalar_add(mul(l2_norm(g1), l2_norm(g2)), tau);
    return div(dot(g1, g2), denom);
}

// Row-wise cosine over [N,D]: one cosine per batch element.
template <class Real>
ad::Tensor<Real> row_cosine(const ad::Tensor<Real>& g1, const ad::Tensor<Real>& g2,
                            Real tau) {
    auto rdot = row_sum(mul(g1, g2));
    auto n1 = ad::sqrt(row_sum(mul(g1, g1)));
    auto n2 = ad::sqrt(row_sum(mul(g2, g2)));
    return div(rdot, scalar_add(mul(n1, n2), tau));
}

namespace detail {

template <class Real>
ad::Tensor<Real> as_matrix(const ad::Tensor<Real>& t) {
    const std::size_t n = t.shape.empty() ? 1 : t.shape[0];
    return reshape(t, {n, t.numel() / n});
}

}  // namespace detail

// Per-draw, per-batch-element alignment cosines between grad_x loss(x) and
// grad_x loss(x + eta_m), eta uniform on [-eps, eps]^d. Shared between the
// training penalty (create_graph) and the evaluation metric (detached), so a
// shared seed yields identical draws and bitwise-matching cosine values.
template <class Real>
std::vector<ad::Tensor<Real>> alignment_cosines(const attack::LossFn<Real>& loss,
                                                const ad::Tensor<Real>& x_leaf,
                                                double epsilon, int m_draws,
                                                Real tau, bool create_graph,
                                                Rng& eta_rng) {
    if (m_draws < 1) ad::fail("alignment_cosines: M must be >= 1");
    if (epsilon < 0) ad::fail("alignment_cosines: epsilon must be >= 0");
    auto g1 = detail::as_matrix(ad::grad(loss(x_leaf), {x_leaf}, create_graph)[0]);
    std::vector<ad::Tensor<Real>> out;
    out.reserve(static_cast<std::size_t>(m_draws));
    for (int m = 0; m < m_draws; ++m) {
        std::vector<Real> eta(x_leaf.numel());
        for (auto& e : eta)
            e = static_cast<Real>(eta_rng.uniform(-epsilon, epsilon));
        auto xp = add(x_leaf, ad::constant<Real>(x_leaf.shape, std::move(eta)));
        auto g2 = detail::as_matrix(ad::grad(loss(xp), {x_leaf}, create_graph)[0]);
        out.push_back(row_cosine(g1, g2, tau));
    }
    return out;
}

// E_eta[1 - cos(grad_x loss(x), grad_x loss(x + eta))], averaged over draws
// and batch elements; value in [0,2]. With create_graph the result is
// differentiable with respect to the model parameters.
template <class Real>
ad::Tensor<Real> gradalign_penalty(const attack::LossFn<Real>& loss,
                                   const ad::Tensor<Real>& x_leaf, double epsilon,
                                   int m_draws, Real tau, bool create_graph,
                                   Rng eta_rng) {
    auto cosines =
        alignment_cosines<Real>(loss, x_leaf, epsilon, m_draws, tau, create_graph, eta_rng);
    ad::Tensor<Real> total;
    for (auto& c : cosines) {
        auto s = sum(c);
        total = total.defined() ? add(total, s) : s;
    }
    const Real scale = Real(-1) / static_cast<Real>(x_leaf.shape[0] *
                                                    static_cast<std::size_t>(m_draws));
    return scalar_add(scalar_mul(total, scale), Real(1));
}

template <class Real, class Model>
ad::Tensor<Real> gradalign_penalty(const Model& model, const ad::Tensor<Real>& x_leaf,
                                   const std::vector<std::int64_t>& y, double epsilon,
                                   int m_draws, Real tau, bool create_graph,
                                   Rng eta_rng) {
    return gradalign_penalty<Real>(attack::classification_loss<Real>(model, y), x_leaf,
                                   epsilon, m_draws, tau, create_graph, eta_rng);
}

// Sum over the given (out x in) weights of |W W^T - I|_F^2. For wide matrices
// only the out-sized Gram can equal the identity (tight-frame condition),
// which is why the smaller Gram is penalized.
template <class Real>
ad::Tensor<Real> orth_penalty(const std::vector<const ad::Tensor<Real>*>& weights) {
    if (weights.empty()) ad::fail("orth_penalty: layer set must be non-empty");
    ad::Tensor<Real> total;
    for (const ad::Tensor<Real>* w : weights) {
        if (w->shape.size() != 2) ad::fail("orth_penalty: rank-2 weights required");
        const std::size_t out = w->shape[0];
        std::vector<Real> eye(out * out, Real(0));
        for (std::size_t i = 0; i < out; ++i) eye[i * out + i] = Real(1);
        auto gram = matmul(*w, transpose(*w));
        auto d = sub(gram, ad::constant<Real>({out, out}, std::move(eye)));
        auto term = dot(d, d);
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

template <class Real>
ad::Tensor<Real> orth_penalty(const nn::Cnn5Params<Real>& params,
                              const nn::OrthLayers& layers) {
    if (!layers.any()) ad::fail("orth_penalty: layer set must be non-empty");
    return orth_penalty<Real>(params.orth_weights(layers));
}

// Per-layer |W W^T - I|_F^2 / out for fc1, fc2, fc3; no graph recorded.
template <class Real>
std::vector<double> orthogonality_gap(const nn::Cnn5Params<Real>& params) {
    std::vector<double> out;
    for (const ad::Tensor<Real>* w :
         params.orth_weights(nn::OrthLayers{true, true, true})) {
        auto det = w->detached();
        const double p = static_cast<double>(orth_penalty<Real>({&det}).scalar());
        out.push_back(p / static_cast<double>(w->shape[0]));
    }
    return out;
}

}  // namespace advlab::reg
