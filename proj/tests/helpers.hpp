#pragma once

// Shared fixtures for the test suites: gradcheck utilities and shrunken
// models that exercise the same layer types as the full network.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "advlab/attacks.hpp"
#include "advlab/autodiff.hpp"
#include "advlab/nn.hpp"
#include "advlab/rng.hpp"

namespace advlab::testing {

inline double rel_err(double a, double b) {
    const double scale = std::max({1.0, std::fabs(a), std::fabs(b)});
    return std::fabs(a - b) / scale;
}

template <class Real>
double max_rel_err(const ad::Tensor<Real>& a, const ad::Tensor<Real>& b) {
    double worst = 0;
    for (std::size_t i = 0; i < a.data->size(); ++i)
        worst = std::max(worst, rel_err(static_cast<double>((*a.data)[i]),
                                        static_cast<double>((*b.data)[i])));
    return worst;
}

template <class Real>
std::vector<Real> random_values(Rng& rng, std::size_t n, double lo = -1.0,
                                double hi = 1.0) {
    std::vector<Real> v(n);
    for (auto& x : v) x = static_cast<Real>(rng.uniform(lo, hi));
    return v;
}

// Analytic gradient of f at x (built on a fresh tape) vs central differences.
template <class Real>
double gradcheck(const std::function<ad::Tensor<Real>(const ad::Tensor<Real>&)>& f,
                 const ad::Tensor<Real>& x, Real h) {
    auto g = std::make_shared<ad::Graph<Real>>();
    auto xl = ad::leaf<Real>(g, x.shape, std::vector<Real>(*x.data), true);
    auto analytic = ad::grad(f(xl), {xl})[0];
    auto numeric = ad::fd_grad<Real>(
        [&](const ad::Tensor<Real>& xc) { return f(xc).scalar(); }, x, h);
    return max_rel_err(analytic, numeric);
}

// Two-layer MLP with relu, matching the Cnn5Params surface used by the
// generic training step. 8 -> 6 -> n_classes, 85 parameters at 3 classes.
template <class Real>
struct TinyMlp {
    ad::Tensor<Real> w1, b1, w2, b2;

    static TinyMlp random(std::uint64_t seed, std::size_t in = 8, std::size_t hid = 6,
                          std::size_t classes = 3, double scale = 0.8) {
        Rng rng = Rng(seed).fork("tiny_mlp");
        TinyMlp m;
        m.w1 = ad::constant<Real>({hid, in}, random_values<Real>(rng, hid * in, -scale, scale));
        m.b1 = ad::constant<Real>({hid}, random_values<Real>(rng, hid, -scale, scale));
        m.w2 = ad::constant<Real>({classes, hid},
                                  random_values<Real>(rng, classes * hid, -scale, scale));
        m.b2 = ad::constant<Real>({classes}, random_values<Real>(rng, classes, -scale, scale));
        return m;
    }

    std::vector<ad::Tensor<Real>*> parameters() {
        return {&w1, &b1, &w2, &b2};
    }
    std::vector<const ad::Tensor<Real>*> parameters() const {
        return {&w1, &b1, &w2, &b2};
    }
    std::vector<const ad::Tensor<Real>*> orth_weights(const nn::OrthLayers&) const {
        return {&w1, &w2};
    }

    ad::Tensor<Real> forward(const ad::Tensor<Real>& x) const {
        auto h = relu(nn::linear(x, w1, b1));
        return nn::linear(h, w2, b2);
    }
};

// Shrunken conv net: conv(1->2,5x5) on [N,1,6,6] -> relu -> pool -> fc.
// 61 parameters; exercises the conv/pool/fc double-backprop path end to end.
template <class Real>
struct TinyConvNet {
    ad::Tensor<Real> conv_w, conv_b, fc_w, fc_b;

    static TinyConvNet random(std::uint64_t seed, double scale = 0.5) {
        Rng rng = Rng(seed).fork("tiny_conv");
        TinyConvNet m;
        m.conv_w = ad::constant<Real>({2, 1, 5, 5}, random_values<Real>(rng, 50, -scale, scale));
        m.conv_b = ad::constant<Real>({2}, random_values<Real>(rng, 2, -scale, scale));
        m.fc_w = ad::constant<Real>({3, 2}, random_values<Real>(rng, 6, -scale, scale));
        m.fc_b = ad::constant<Real>({3}, random_values<Real>(rng, 3, -scale, scale));
        return m;
    }

    std::vector<ad::Tensor<Real>*> parameters() { return {&conv_w, &conv_b, &fc_w, &fc_b}; }
    std::vector<const ad::Tensor<Real>*> parameters() const {
        return {&conv_w, &conv_b, &fc_w, &fc_b};
    }
    std::vector<const ad::Tensor<Real>*> orth_weights(const nn::OrthLayers&) const {
        return {&fc_w};
    }

    ad::Tensor<Real> forward(const ad::Tensor<Real>& x) const {
        const std::size_t n = x.shape[0];
        auto h = maxpool2(relu(conv2d(x, conv_w, &conv_b)));  // [N,2,1,1]
        return nn::linear(reshape(h, {n, std::size_t(2)}), fc_w, fc_b);
    }
};

// Loss linear in x: w . x summed over the batch rows.
template <class Real>
attack::LossFn<Real> linear_loss(std::vector<Real> w_row) {
    return [w = std::move(w_row)](const ad::Tensor<Real>& x) {
        const std::size_t n = x.shape.empty() ? 1 : x.shape[0];
        const std::size_t d = x.numel() / n;
        std::vector<Real> full(x.numel());
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) full[i * d + j] = w[j];
        return dot(x, ad::constant<Real>(x.shape, std::move(full)));
    };
}

}  // namespace advlab::testing
