#include <doctest.h>

#include <cmath>
#include <memory>

#include "advlab/nn.hpp"
#include "helpers.hpp"

using namespace advlab;
using ad::Tensor;
using testing::gradcheck;
using testing::random_values;
using testing::rel_err;

TEST_CASE("conv2d dimension chain and trivial kernels") {
    Rng rng(11);
    auto params = nn::init_params<double>(3);
    auto x = ad::constant<double>({1, 3, 32, 32}, random_values<double>(rng, 3072, 0, 1));
    auto y = ad::conv2d(x, params.conv1_w, &params.conv1_b);
    CHECK(y.shape == ad::Shape{1, 6, 28, 28});

    auto zw = ad::zeros<double>({6, 3, 5, 5});
    auto zb = ad::zeros<double>({6});
    auto y0 = ad::conv2d(x, zw, &zb);
    for (double v : *y0.data) CHECK(v == 0.0);

    auto ones_img = ad::constant<double>({1, 1, 5, 5}, std::vector<double>(25, 1.0));
    auto ones_k = ad::constant<double>({1, 1, 5, 5}, std::vector<double>(25, 1.0));
    auto zb1 = ad::zeros<double>({1});
    auto s = ad::conv2d(ones_img, ones_k, &zb1);
    CHECK(s.shape == ad::Shape{1, 1, 1, 1});
    CHECK(s.scalar() == 25.0);

    CHECK_THROWS_AS(ad::conv2d(ad::zeros<double>({1, 2, 8, 8}), zw, &zb),
                    std::invalid_argument);
}

TEST_CASE("maxpool2 values, tie-break, and shape") {
    auto x = ad::constant<double>({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = ad::maxpool2(x);
    CHECK(y.scalar() == 4.0);

    // constant input: same constant out, gradient routed to the first element
    auto g = std::make_shared<ad::Graph<double>>();
    auto xc = ad::leaf<double>(g, {1, 1, 2, 4}, std::vector<double>(8, 3.0), true);
    auto p = ad::maxpool2(xc);
    for (double v : *p.data) CHECK(v == 3.0);
    auto gx = ad::grad(ad::sum(p), {xc})[0];
    CHECK((*gx.data)[0] == 1.0);  // window 1: top-left
    CHECK((*gx.data)[1] == 0.0);
    CHECK((*gx.data)[2] == 1.0);  // window 2: top-left
    CHECK((*gx.data)[4] == 0.0);

    Rng rng(5);
    auto big = ad::constant<double>({1, 6, 28, 28}, random_values<double>(rng, 6 * 784));
    CHECK(ad::maxpool2(big).shape == ad::Shape{1, 6, 14, 14});

    CHECK_THROWS_AS(ad::maxpool2(ad::constant<double>({1, 1, 3, 4},
                                                      std::vector<double>(12, 0.0))),
                    std::invalid_argument);
}

TEST_CASE("linear layer") {
    auto x = ad::constant<double>({2, 3}, {1, 2, 3, 4, 5, 6});
    auto eye = ad::constant<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto zb = ad::zeros<double>({3});
    auto y = nn::linear(x, eye, zb);
    for (std::size_t i = 0; i < 6; ++i) CHECK((*y.data)[i] == (*x.data)[i]);

    auto w = ad::constant<double>({1, 2}, {3, 4});
    auto b = ad::constant<double>({1}, {5});
    auto x2 = ad::constant<double>({1, 2}, {1, 2});
    CHECK(nn::linear(x2, w, b).scalar() == 16.0);

    auto params = nn::init_params<double>(1);
    auto h = ad::constant<double>({4, 400}, std::vector<double>(1600, 0.1));
    CHECK(nn::linear(h, params.fc1_w, params.fc1_b).shape == ad::Shape{4, 120});

    CHECK_THROWS_AS(nn::linear(x2, eye, zb), std::invalid_argument);
}

TEST_CASE("cnn5_forward shape, zero params, input validation") {
    auto params = nn::init_params<float>(17);
    Rng rng(2);
    auto x = ad::constant<float>({4, 3, 32, 32}, random_values<float>(rng, 4 * 3072, 0, 1));
    auto logits = nn::cnn5_forward(params, x);
    CHECK(logits.shape == ad::Shape{4, 10});

    nn::Cnn5Params<float> zp;
    {
        auto ps = zp.parameters();
        const auto& shapes = nn::Cnn5Params<float>::shapes();
        for (std::size_t i = 0; i < ps.size(); ++i) *ps[i] = ad::zeros<float>(shapes[i]);
    }
    auto z = nn::cnn5_forward(zp, x);
    for (float v : *z.data) CHECK(v == 0.0f);

    CHECK_THROWS_AS(nn::cnn5_forward(
                        params, ad::constant<float>({1, 3, 16, 16},
                                                    std::vector<float>(768, 0.f))),
                    std::invalid_argument);
}

TEST_CASE("cross_entropy values") {
    auto uniform = ad::zeros<double>({3, 10});
    std::vector<std::int64_t> labels{0, 5, 9};
    CHECK(rel_err(nn::cross_entropy(uniform, labels).scalar(), std::log(10.0)) < 1e-12);

    // one-hot logit with gap 100: loss below 1e-40
    std::vector<double> hot(10, 0.0);
    hot[3] = 100.0;
    auto t = ad::constant<double>({1, 10}, std::move(hot));
    CHECK(nn::cross_entropy(t, {3}).scalar() < 1e-40);
    CHECK(nn::cross_entropy(t, {3}).scalar() >= 0.0);

    // random logits vs direct summation oracle
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng = Rng(seed).fork("ce");
        const std::size_t n = 4, c = 10;
        auto v = random_values<double>(rng, n * c, -3, 3);
        std::vector<std::int64_t> y;
        for (std::size_t i = 0; i < n; ++i)
            y.push_back(static_cast<std::int64_t>(rng.below(c)));
        double direct = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double denom = 0;
            for (std::size_t j = 0; j < c; ++j) denom += std::exp(v[i * c + j]);
            direct += -std::log(std::exp(v[i * c + y[i]]) / denom);
        }
        direct /= static_cast<double>(n);
        auto loss = nn::cross_entropy(ad::constant<double>({n, c}, std::move(v)), y);
        CHECK(std::fabs(loss.scalar() - direct) < 1e-12);
    }

    CHECK_THROWS_AS(nn::cross_entropy(uniform, {0, 10, 1}), std::invalid_argument);
}

TEST_CASE("init_params determinism and shapes") {
    auto a = nn::init_params<float>(42);
    auto b = nn::init_params<float>(42);
    auto c = nn::init_params<float>(43);
    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->shape == nn::Cnn5Params<float>::shapes()[i]);
        for (std::size_t j = 0; j < pa[i]->data->size(); ++j) {
            CHECK((*pa[i]->data)[j] == (*pb[i]->data)[j]);  // bit-identical
            if ((*pa[i]->data)[j] != (*pc[i]->data)[j]) any_diff = true;
        }
    }
    CHECK(any_diff);
    nn::validate_shapes(a);
}

TEST_CASE("layer gradchecks against finite differences") {
    const double h = 1e-6, tol = 1e-6;
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        Rng rng = Rng(seed).fork("nn_gradcheck");
        double worst = 0;
        auto run = [&](auto f, const Tensor<double>& x) {
            worst = std::max(worst, gradcheck<double>(f, x, h));
        };

        // conv2d w.r.t. input, weight, bias
        auto xc = ad::constant<double>({2, 2, 6, 6}, random_values<double>(rng, 144));
        auto wc = ad::constant<double>({3, 2, 5, 5}, random_values<double>(rng, 150));
        auto bc = ad::constant<double>({3}, random_values<double>(rng, 3));
        run([&](auto t) { return ad::mean(ad::conv2d(t, wc, &bc)); }, xc);
        run([&](auto t) { return ad::mean(ad::conv2d(xc.detached(), t, &bc)); }, wc);
        run([&](auto t) { return ad::mean(ad::conv2d(xc.detached(), wc.detached(), &t)); }, bc);

        // maxpool away from ties
        auto xp = ad::constant<double>({1, 2, 4, 4}, random_values<double>(rng, 32));
        run([&](auto t) { return ad::mean(ad::maxpool2(t)); }, xp);

        // linear w.r.t. all three arguments
        auto xl = ad::constant<double>({3, 5}, random_values<double>(rng, 15));
        auto wl = ad::constant<double>({4, 5}, random_values<double>(rng, 20));
        auto bl = ad::constant<double>({4}, random_values<double>(rng, 4));
        run([&](auto t) { return ad::mean(nn::linear(t, wl, bl)); }, xl);
        run([&](auto t) { return ad::mean(nn::linear(xl.detached(), t, bl)); }, wl);
        run([&](auto t) { return ad::mean(nn::linear(xl.detached(), wl.detached(), t)); }, bl);

        // cross_entropy w.r.t. logits
        auto lo = ad::constant<double>({3, 7}, random_values<double>(rng, 21, -2, 2));
        std::vector<std::int64_t> y{2, 0, 6};
        run([&](auto t) { return nn::cross_entropy(t, y); }, lo);

        CHECK_MESSAGE(worst < tol, "seed ", seed, " worst ", worst);
    }
}

TEST_CASE("fd_grad vs grad on a tiny conv net cross-entropy") {
    // the finite-difference oracle example on a full conv/pool/fc/loss path
    auto model = testing::TinyConvNet<double>::random(99);
    Rng rng(4);
    auto x0 = ad::constant<double>({2, 1, 6, 6}, random_values<double>(rng, 72, 0, 1));
    std::vector<std::int64_t> y{1, 2};

    auto g = std::make_shared<ad::Graph<double>>();
    auto xl = ad::leaf<double>(g, x0.shape, std::vector<double>(*x0.data), true);
    auto analytic = ad::grad(nn::cross_entropy(model.forward(xl), y), {xl})[0];
    auto numeric = ad::fd_grad<double>(
        [&](const Tensor<double>& t) {
            return nn::cross_entropy(model.forward(t), y).scalar();
        },
        x0, 1e-6);
    CHECK(testing::max_rel_err(analytic, numeric) < 1e-6);
}

TEST_CASE("cnn5 weight-slice gradcheck at 64-bit") {
    // gradcheck of cross_entropy(cnn5_forward) w.r.t. a slice of fc3_w
    auto params = nn::init_params<double>(123);
    Rng rng(8);
    auto x = ad::constant<double>({2, 3, 32, 32}, random_values<double>(rng, 2 * 3072, 0, 1));
    std::vector<std::int64_t> y{3, 7};

    auto g = std::make_shared<ad::Graph<double>>();
    auto attached = nn::attach<double>(g, params, true);
    auto loss = nn::cross_entropy(attached.forward(x), y);
    auto gw = ad::grad(loss, {attached.fc3_w})[0];

    const std::size_t slice = 40;  // first rows of fc3_w
    for (std::size_t k = 0; k < slice; ++k) {
        auto vp = *params.fc3_w.data, vm = *params.fc3_w.data;
        const double h = 1e-6;
        vp[k] += h;
        vm[k] -= h;
        auto pp = params, pm = params;
        pp.fc3_w = ad::constant<double>({10, 84}, std::move(vp));
        pm.fc3_w = ad::constant<double>({10, 84}, std::move(vm));
        const double fd = (nn::cross_entropy(pp.forward(x), y).scalar() -
                           nn::cross_entropy(pm.forward(x), y).scalar()) /
                          (2 * h);
        CHECK(rel_err((*gw.data)[k], fd) < 1e-6);
    }
}
