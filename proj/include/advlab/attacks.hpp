#pragma once

// Inner-maximization solvers over the l-inf epsilon-ball: single-step FGSM and
// iterated PGD with projection. Both are shared between training and
// evaluation; the gradient is always taken on a fresh tape so the perturbation
// enters the training loss as a constant.

#include <cstdint>
#include <functional>
#include <vector>

#include "advlab/autodiff.hpp"
#include "advlab/nn.hpp"
#include "advlab/rng.hpp"

namespace advlab::attack {

enum class Kind { fgsm, pgd };

struct AttackSpec {
    Kind kind = Kind::fgsm;
    double epsilon = 16.0 / 255.0;  // l-inf radius in pixel units
    int steps = 10;                 // PGD only
    double alpha = 0.0;             // PGD step size; <= 0 means 2.5*eps/steps
    bool random_start = true;       // PGD only
    double clip_lo = 0.0;
    double clip_hi = 1.0;

    double step_size() const {
        return alpha > 0 ? alpha : 2.5 * epsilon / static_cast<double>(steps);
    }

    void validate() const {
        if (epsilon < 0) ad::fail("AttackSpec: epsilon must be >= 0");
        if (!(clip_lo < clip_hi)) ad::fail("AttackSpec: clip_lo must be < clip_hi");
        if (kind == Kind::pgd) {
            if (steps < 1) ad::fail("AttackSpec: PGD needs steps >= 1");
            // epsilon 0 is the degenerate identity attack; any alpha is moot
            if (epsilon > 0 && !(step_size() > 0))
                ad::fail("AttackSpec: PGD needs alpha > 0");
        }
    }
};

// Builds the scalar loss for a batch input that is already a graph leaf.
template <class Real>
using LossFn = std::function<ad::Tensor<Real>(const ad::Tensor<Real>&)>;

namespace detail {

// sign(grad of loss at x), computed on its own tape.
template <class Real>
std::vector<Real> loss_grad_sign(const LossFn<Real>& loss, const ad::Shape& shape,
                                 const std::vector<Real>& x) {
    auto g = std::make_shared<ad::Graph<Real>>();
    auto xl = ad::leaf<Real>(g, shape, std::vector<Real>(x), true);
    auto l = loss(xl);
    if (l.numel() != 1) ad::fail("attack: loss must be scalar");
    auto gx = ad::grad(l, {xl})[0];
    if (!ad::all_finite(gx)) throw std::runtime_error("attack: non-finite gradients");
    std::vector<Real> s(gx.data->size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        const Real v = (*gx.data)[i];
        s[i] = v > Real(0) ? Real(1) : (v < Real(0) ? Real(-1) : Real(0));
    }
    return s;
}

template <class Real>
Real clip(Real v, Real lo, Real hi) {
    return v < lo ? lo : (v > hi ? hi : v);
}

// x0 + delta can round half an ulp outside the ball; nudge back so the
// recomputed difference satisfies |v - x0| <= eps bit-for-bit.
template <class Real>
Real pull_into_ball(Real v, Real x0, Real eps) {
    while (v - x0 > eps) v = std::nextafter(v, x0);
    while (x0 - v > eps) v = std::nextafter(v, x0);
    return v;
}

}  // namespace detail

// x_adv = clamp(x + eps * sign(grad_x loss), clip_lo, clip_hi).
template <class Real>
ad::Tensor<Real> fgsm(const LossFn<Real>& loss, const ad::Tensor<Real>& x,
                      const AttackSpec& spec) {
    spec.validate();
    const Real eps = static_cast<Real>(spec.epsilon);
    const Real lo = static_cast<Real>(spec.clip_lo), hi = static_cast<Real>(spec.clip_hi);
    auto s = detail::loss_grad_sign(loss, x.shape, *x.data);
    std::vector<Real> out(x.data->size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Real x0 = (*x.data)[i];
        const Real v = detail::clip(x0 + eps * s[i], lo, hi);
        out[i] = detail::pull_into_ball(v, x0, eps);
    }
    return ad::constant<Real>(x.shape, std::move(out));
}

// K steps of projected sign-gradient ascent. Projection order per step:
// first onto the eps-ball around the original x, then onto the clip range.
template <class Real>
ad::Tensor<Real> pgd(const LossFn<Real>& loss, const ad::Tensor<Real>& x,
                     const AttackSpec& spec, Rng rng) {
    spec.validate();
    const Real eps = static_cast<Real>(spec.epsilon);
    const Real alpha = static_cast<Real>(spec.step_size());
    const Real lo = static_cast<Real>(spec.clip_lo), hi = static_cast<Real>(spec.clip_hi);
    const std::vector<Real>& x0 = *x.data;
    std::vector<Real> delta(x0.size(), Real(0));
    std::vector<Real> cur(x0);
    if (spec.random_start) {
        for (std::size_t i = 0; i < delta.size(); ++i) {
            delta[i] = detail::clip(
                static_cast<Real>(rng.uniform(-spec.epsilon, spec.epsilon)), -eps, eps);
            cur[i] = x0[i] + delta[i];
        }
    }
    for (int t = 0; t < spec.steps; ++t) {
        auto s = detail::loss_grad_sign(loss, x.shape, cur);
        for (std::size_t i = 0; i < cur.size(); ++i) {
            delta[i] = detail::clip(delta[i] + alpha * s[i], -eps, eps);
            Real v = detail::clip(x0[i] + delta[i], lo, hi);
            v = detail::pull_into_ball(v, x0[i], eps);
            cur[i] = v;
            delta[i] = v - x0[i];
        }
    }
    return ad::constant<Real>(x.shape, std::move(cur));
}

template <class Real, class Model>
LossFn<Real> classification_loss(const Model& model,
                                 const std::vector<std::int64_t>& labels) {
    return [&model, labels](const ad::Tensor<Real>& xin) {
        return nn::cross_entropy(model.forward(xin), labels);
    };
}

// Model-facing entry points; spec.kind selects the solver.
template <class Real, class Model>
ad::Tensor<Real> fgsm(const Model& model, const ad::Tensor<Real>& x,
                      const std::vector<std::int64_t>& y, const AttackSpec& spec) {
    if (spec.kind != Kind::fgsm) ad::fail("fgsm: spec.kind must be fgsm");
    return fgsm(classification_loss<Real>(model, y), x.detached(), spec);
}

template <class Real, class Model>
ad::Tensor<Real> pgd(const Model& model, const ad::Tensor<Real>& x,
                     const std::vector<std::int64_t>& y, const AttackSpec& spec,
                     Rng rng) {
    if (spec.kind != Kind::pgd) ad::fail("pgd: spec.kind must be pgd");
    return pgd(classification_loss<Real>(model, y), x.detached(), spec, rng);
}

template <class Real, class Model>
ad::Tensor<Real> run_attack(const Model& model, const ad::Tensor<Real>& x,
                            const std::vector<std::int64_t>& y,
                            const AttackSpec& spec, Rng rng) {
    if (spec.kind == Kind::fgsm) return fgsm<Real>(model, x, y, spec);
    return pgd<Real>(model, x, y, spec, rng);
}

}  // namespace advlab::attack
