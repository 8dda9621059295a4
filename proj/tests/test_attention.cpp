#include <doctest.h>

#include "test_support.hpp"
#include "xseg/attention.hpp"

using namespace xseg;
using namespace xseg::testing;

TEST_CASE("zero-initialised CSA with C=3 scales by exactly 4/3") {
    Rng rng(1);
    auto x = random_tensor<double>({2, 3, 5, 4}, rng);
    auto m = CsaModule<double>::zeros(3);
    auto a = csa_attention(x, m.projection.weights, std::span<const double>(m.projection.bias));
    for (double v : a.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    auto y = csa_forward(x, m);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == (1.0 + 1.0 / 3.0) * x[i]);
}

TEST_CASE("CSA of zero input is zero") {
    Rng rng(2);
    Tensor4<double> x(Shape4{1, 4, 3, 3});
    auto w = random_tensor<double>({4, 4, 1, 1}, rng);
    std::vector<double> b{0.3, -0.1, 0.2, 0.5};
    const auto y = csa_forward(x, w, std::span<const double>(b));
    for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("single-channel CSA doubles the input") {
    Rng rng(3);
    auto x = random_tensor<double>({2, 1, 4, 4}, rng);
    Tensor4<double> w(Shape4{1, 1, 1, 1}, 3.7);
    std::vector<double> b{-1.2};
    auto y = csa_forward(x, w, std::span<const double>(b));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == 2 * x[i]);
}

TEST_CASE("CSA attention sums to 1 per pixel and the residual bound holds") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t c = 2 + rng.below(6);
        auto x = random_tensor<double>({2, c, 3, 3}, rng, -3, 3);
        auto w = random_tensor<double>({c, c, 1, 1}, rng, -2, 2);
        auto b = random_tensor<double>({c, 1, 1, 1}, rng).values();
        auto a = csa_attention(x, w, std::span<const double>(b));
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t p = 0; p < 9; ++p) {
                double s = 0;
                for (std::size_t k = 0; k < c; ++k) s += a.plane(n, k)[p];
                CHECK(std::abs(s - 1.0) <= 1e-12);
            }
        auto y = csa_forward(x, w, std::span<const double>(b));
        double diff = 0, xa = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            diff += (y[i] - x[i]) * (y[i] - x[i]);
            xa += (x[i] * a[i]) * (x[i] * a[i]);
        }
        CHECK(std::sqrt(diff) <= std::sqrt(xa) * (1 + 1e-12));
    }
}

TEST_CASE("CSA rejects a non-square projection") {
    Tensor4<double> x(Shape4{1, 3, 2, 2});
    Tensor4<double> w(Shape4{2, 3, 1, 1});
    std::vector<double> b(2);
    CHECK_THROWS_AS(csa_forward(x, w, std::span<const double>(b)), DimensionError);
}

TEST_CASE("zero AG gate halves the input; bias +20 passes it through") {
    Rng rng(5);
    auto x = random_tensor<double>({2, 3, 4, 4}, rng);
    auto g = random_tensor<double>({2, 5, 4, 4}, rng);
    auto blk = AgBlock<double>::zeros(3, 5);
    auto half = ag_forward(x, g, blk);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(half[i] == 0.5 * x[i]);
    blk.bias.assign(3, 20.0);
    auto pass = ag_forward(x, g, blk);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(pass[i] - x[i]) < 1e-8);
}

TEST_CASE("AG of zero input is zero and |AG(x)| < |x|") {
    Rng rng(6);
    auto g = random_tensor<double>({1, 2, 3, 3}, rng);
    AgBlock<double> blk{random_tensor<double>({4, 4, 1, 1}, rng), random_tensor<double>({4, 2, 1, 1}, rng),
                        std::vector<double>{0.1, 0.2, -0.3, 0.0}};
    const auto y0 = ag_forward(Tensor4<double>(Shape4{1, 4, 3, 3}), g, blk);
    for (double v : y0.values()) CHECK(v == 0.0);
    auto x = random_tensor<double>({1, 4, 3, 3}, rng, -5, 5);
    auto y = ag_forward(x, g, blk);
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] != 0) CHECK(std::abs(y[i]) < std::abs(x[i]));
}

TEST_CASE("AG requires matching spatial size") {
    Tensor4<double> x(Shape4{1, 2, 4, 4}), g(Shape4{1, 2, 2, 2});
    auto blk = AgBlock<double>::zeros(2, 2);
    CHECK_THROWS_AS(ag_forward(x, g, blk), DimensionError);
}

TEST_CASE("CSA backward matches finite differences") {
    Rng rng(7);
    auto x = random_tensor<double>({2, 4, 3, 3}, rng);
    auto w = random_tensor<double>({4, 4, 1, 1}, rng);
    std::vector<double> b{0.1, -0.2, 0.3, 0.05};
    auto probe = random_tensor<double>(x.shape(), rng);
    auto f = [&] { return dot(probe, csa_forward(x, w, std::span<const double>(b))); };
    CsaCache<double> cache;
    csa_forward(x, w, std::span<const double>(b), &cache);
    auto g = csa_backward(cache, w, std::span<const double>(b), probe);
    CHECK(max_relative_error(g.input.values(), numeric_gradient(x.values(), f)) < 1e-5);
    CHECK(max_relative_error(g.weights.values(), numeric_gradient(w.values(), f)) < 1e-5);
    CHECK(max_relative_error(g.bias, numeric_gradient(b, f)) < 1e-5);
}

TEST_CASE("AG backward matches finite differences") {
    Rng rng(8);
    auto x = random_tensor<double>({2, 3, 3, 3}, rng);
    auto gs = random_tensor<double>({2, 2, 3, 3}, rng);
    auto th = random_tensor<double>({3, 3, 1, 1}, rng);
    auto ph = random_tensor<double>({3, 2, 1, 1}, rng);
    std::vector<double> b{0.1, -0.2, 0.3};
    auto probe = random_tensor<double>(x.shape(), rng);
    auto f = [&] { return dot(probe, ag_forward(x, gs, th, ph, std::span<const double>(b))); };
    AgCache<double> cache;
    ag_forward(x, gs, th, ph, std::span<const double>(b), &cache);
    auto g = ag_backward(cache, th, ph, probe);
    CHECK(max_relative_error(g.x.values(), numeric_gradient(x.values(), f)) < 1e-5);
    CHECK(max_relative_error(g.g.values(), numeric_gradient(gs.values(), f)) < 1e-5);
    CHECK(max_relative_error(g.theta.values(), numeric_gradient(th.values(), f)) < 1e-5);
    CHECK(max_relative_error(g.phi.values(), numeric_gradient(ph.values(), f)) < 1e-5);
    CHECK(max_relative_error(g.bias, numeric_gradient(b, f)) < 1e-5);
}
