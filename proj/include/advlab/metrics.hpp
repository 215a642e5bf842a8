#pragma once

// Evaluation instrumentation: clean/robust accuracy, the local-linearity
// metric, and the double-descent episode detector.

#include <cstdint>
#include <vector>

#include "advlab/attacks.hpp"
#include "advlab/data.hpp"
#include "advlab/nn.hpp"
#include "advlab/regularizers.hpp"

namespace advlab::metrics {

struct MetricsRecord {
    int epoch = 0;
    double train_loss = 0;
    double clean_acc = 0;
    double robust_acc = 0;
    double local_linearity = 0;
    double orth_gap = 0;
    double wall_seconds = 0;
};

// One overfit-and-recover excursion of a per-epoch series. Epochs count the
// series positions from 1.
struct DoubleDescentEpisode {
    std::size_t peak_epoch = 0;
    std::size_t trough_epoch = 0;
    std::size_t recovery_epoch = 0;
    double drop = 0;
    double recovered_fraction = 0;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> batched_indices(std::size_t n,
                                                             std::size_t batch) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(n, start + batch); ++i)
            idx.push_back(i);
        out.push_back(std::move(idx));
    }
    return out;
}

// argmax over a logits row; ties go to the smallest class index.
template <class Real>
std::size_t argmax_row(const Real* row, std::size_t c) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

template <class Real, class Model>
std::size_t count_correct(const Model& model, const ad::Tensor<Real>& x,
                          const std::vector<std::int64_t>& y) {
    auto logits = model.forward(x.detached());
    const std::size_t c = logits.shape[1];
    std::size_t hits = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
        if (argmax_row(logits.data->data() + i * c, c) ==
            static_cast<std::size_t>(y[i]))
            ++hits;
    return hits;
}

}  // namespace detail

inline constexpr std::size_t kEvalBatch = 200;

// Fraction of argmax(logits) == label over the dataset.
template <class Real, class Model>
double accuracy(const Model& model, const data::Dataset& ds) {
    if (ds.size() == 0) ad::fail("accuracy: empty dataset");
    std::size_t hits = 0;
    for (const auto& idx : detail::batched_indices(ds.size(), kEvalBatch))
        hits += detail::count_correct<Real>(model, data::batch_images<Real>(ds, idx),
                                            data::batch_labels(ds, idx));
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

// Accuracy on inputs attacked against the given parameters (white-box; the
// attack is regenerated for every call).
template <class Real, class Model>
double robust_accuracy(const Model& model, const data::Dataset& ds,
                       const attack::AttackSpec& spec, std::uint64_t seed) {
    if (ds.size() == 0) ad::fail("robust_accuracy: empty dataset");
    Rng root = Rng(seed).fork("robust_eval");
    std::size_t hits = 0, b = 0;
    for (const auto& idx : detail::batched_indices(ds.size(), kEvalBatch)) {
        auto x = data::batch_images<Real>(ds, idx);
        auto y = data::batch_labels(ds, idx);
        auto x_adv = attack::run_attack<Real>(model, x, y, spec, root.fork(b++));
        hits += detail::count_correct<Real>(model, x_adv, y);
    }
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

// Sum over a batch's rows and draws of cos(grad_x loss(x), grad_x loss(x+eta)),
// computed without recording a parameter graph.
template <class Real>
double alignment_cosine_sum(const attack::LossFn<Real>& loss,
                            const ad::Tensor<Real>& x, double epsilon, int m_draws,
                            Real tau, Rng& eta_rng) {
    auto g = std::make_shared<ad::Graph<Real>>();
    auto xl = ad::leaf<Real>(g, x.shape, std::vector<Real>(*x.data), true);
    auto cosines =
        reg::alignment_cosines<Real>(loss, xl, epsilon, m_draws, tau, false, eta_rng);
    double total = 0;
    for (const auto& c : cosines)
        total += static_cast<double>(ad::sum(c.detached()).scalar());
    return total;
}

// Mean over samples and draws of cos(grad_x loss(x), grad_x loss(x + eta)).
// No parameter graph is recorded. Shares its eta draws and cosine arithmetic
// with the gradalign penalty, so metric == 1 - penalty under a shared seed.
template <class Real, class Model>
double local_linearity(const Model& model, const data::Dataset& ds, double epsilon,
                       int m_draws, Real tau, std::uint64_t seed) {
    if (ds.size() == 0) ad::fail("local_linearity: empty sample");
    Rng root = Rng(seed).fork("local_linearity");
    double total = 0;
    std::size_t b = 0;
    for (const auto& idx : detail::batched_indices(ds.size(), kEvalBatch)) {
        auto y = data::batch_labels(ds, idx);
        Rng eta = root.fork(b++);
        total += alignment_cosine_sum<Real>(attack::classification_loss<Real>(model, y),
                                            data::batch_images<Real>(ds, idx), epsilon,
                                            m_draws, tau, eta);
    }
    return total / (static_cast<double>(ds.size()) * static_cast<double>(m_draws));
}

// Left-to-right scan over a per-epoch series. An episode opens when the value
// falls at least `drop_threshold` below the running max (peak = argmax so
// far, trough = running minimum of the fall) and closes at the first epoch
// where value - trough >= recovery_fraction * (peak - trough). Episodes do
// not overlap; the scan restarts after the recovery epoch.
inline std::vector<DoubleDescentEpisode> detect_double_descent(
    const std::vector<double>& series, double drop_threshold,
    double recovery_fraction) {
    if (series.size() < 3) ad::fail("detect_double_descent: series length must be >= 3");
    if (!(drop_threshold > 0)) ad::fail("detect_double_descent: drop threshold must be > 0");
    if (!(recovery_fraction > 0 && recovery_fraction <= 1))
        ad::fail("detect_double_descent: recovery fraction must be in (0,1]");
    std::vector<DoubleDescentEpisode> out;
    bool have_max = false, open = false;
    double peak_v = 0, trough_v = 0;
    std::size_t peak_i = 0, trough_i = 0;
    for (std::size_t i = 0; i < series.size(); ++i) {
        const double v = series[i];
        if (!open) {
            if (!have_max || v > peak_v) {
                peak_v = v;
                peak_i = i;
                have_max = true;
            }
            if (have_max && peak_v - v >= drop_threshold) {
                open = true;
                trough_v = v;
                trough_i = i;
            }
        } else {
            if (v < trough_v) {
                trough_v = v;
                trough_i = i;
            }
            const double drop = peak_v - trough_v;
            if (v - trough_v >= recovery_fraction * drop) {
                out.push_back({peak_i + 1, trough_i + 1, i + 1, drop,
                               (v - trough_v) / drop});
                open = false;
                have_max = false;
            }
        }
    }
    return out;
}

}  // namespace advlab::metrics
