#include <doctest.h>

#include "test_support.hpp"
#include "xseg/losses.hpp"
#include "xseg/ops.hpp"

using namespace xseg;
using namespace xseg::testing;

namespace {

Tensor4<double> binary_tensor(const BinaryMask& m) {
    Tensor4<double> t(Shape4{1, 1, m.height, m.width});
    for (std::size_t i = 0; i < m.bits.size(); ++i) t[i] = m.bits[i];
    return t;
}

// Sobel magnitude written out per pixel with clamped borders.
double reference_sobel_mean_abs_diff(const Tensor4<double>& a, const Tensor4<double>& b) {
    const long h = long(a.h()), w = long(a.w());
    auto px = [&](const Tensor4<double>& t, long y, long x) {
        y = std::clamp(y, 0L, h - 1);
        x = std::clamp(x, 0L, w - 1);
        return t(0, 0, y, x);
    };
    auto mag = [&](const Tensor4<double>& t, long y, long x) {
        const double gx = (px(t, y - 1, x + 1) + 2 * px(t, y, x + 1) + px(t, y + 1, x + 1)) -
                          (px(t, y - 1, x - 1) + 2 * px(t, y, x - 1) + px(t, y + 1, x - 1));
        const double gy = (px(t, y + 1, x - 1) + 2 * px(t, y + 1, x) + px(t, y + 1, x + 1)) -
                          (px(t, y - 1, x - 1) + 2 * px(t, y - 1, x) + px(t, y - 1, x + 1));
        return std::sqrt(gx * gx + gy * gy);
    };
    double s = 0;
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) s += std::abs(mag(a, y, x) - mag(b, y, x));
    return s / double(h * w);
}

}  // namespace

TEST_CASE("dice score hand cases") {
    Tensor4<double> zero(Shape4{1, 1, 4, 4});
    CHECK(dice_score(zero, zero) == 1.0);

    BinaryMask a(4, 4), b(4, 4);
    for (std::size_t x = 0; x < 4; ++x) a.set(0, x);
    b.set(0, 0);
    b.set(0, 1);
    b.set(1, 0);
    b.set(1, 1);
    CHECK(dice_score(binary_tensor(a), binary_tensor(b)) == doctest::Approx(5.0 / 9.0).epsilon(1e-15));

    auto sq = binary_tensor(rect_mask(20, 20, 5, 5, 10, 10));
    CHECK(dice_score(sq, sq) == 1.0);
}

TEST_CASE("dice loss closed forms") {
    auto t = binary_tensor(rect_mask(8, 8, 2, 2, 3, 4));
    CHECK(dice_loss(t, t) == 0.0);
    Tensor4<double> zero(t.shape());
    CHECK(dice_loss(t, zero) == doctest::Approx(1.0 - 1.0 / 13.0).epsilon(1e-15));
}

TEST_CASE("dimension mismatches are rejected") {
    Tensor4<double> a(Shape4{1, 1, 4, 4}), b(Shape4{1, 1, 4, 5});
    CHECK_THROWS_AS(dice_score(a, b), DimensionError);
    CHECK_THROWS_AS(boundary_loss(a, b), DimensionError);
    CHECK_THROWS_AS(combined_loss(a, b), DimensionError);
}

TEST_CASE("boundary loss cases") {
    Rng rng(1);
    auto p = random_tensor<double>({1, 1, 8, 8}, rng, 0, 1);
    CHECK(boundary_loss(p, p) == 0.0);
    Tensor4<double> c1(Shape4{1, 1, 8, 8}, 0.2), c2(Shape4{1, 1, 8, 8}, 0.9);
    CHECK(boundary_loss(c1, c2) == doctest::Approx(0.0).epsilon(1e-5));

    auto sq = binary_tensor(rect_mask(12, 12, 4, 4, 4, 4));
    Tensor4<double> empty(sq.shape());
    const double expect = reference_sobel_mean_abs_diff(sq, empty);
    CHECK(boundary_loss(sq, empty) == doctest::Approx(expect).epsilon(1e-9));
    CHECK(expect > 0.5);
}

TEST_CASE("boundary loss matches a direct evaluation on random maps") {
    Rng rng(2);
    for (int i = 0; i < 10; ++i) {
        auto a = random_tensor<double>({1, 1, 9, 7}, rng, 0, 1);
        auto b = random_tensor<double>({1, 1, 9, 7}, rng, 0, 1);
        CHECK(boundary_loss(a, b) == doctest::Approx(reference_sobel_mean_abs_diff(a, b)).epsilon(1e-9));
    }
}

TEST_CASE("combined loss is the weighted sum") {
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        auto t = binary_tensor(random_mask(8, 8, rng, 0.4));
        auto p = random_tensor<double>(t.shape(), rng, 0, 1);
        const double expect = 0.9 * dice_loss(t, p) + 0.1 * boundary_loss(t, p);
        CHECK(std::abs(combined_loss(t, p) - expect) <= 1e-12);
        LossWeights w{0.3, 0.7};
        CHECK(std::abs(combined_loss(t, p, w) - (0.3 * dice_loss(t, p) + 0.7 * boundary_loss(t, p))) <= 1e-12);
    }
    // 0.9 * 0.5 + 0.1 * 0.2
    CHECK(0.9 * 0.5 + 0.1 * 0.2 == doctest::Approx(0.47));
}

TEST_CASE("combined loss is zero exactly on a perfect binary prediction and positive otherwise") {
    Rng rng(4);
    for (int i = 0; i < 20; ++i) {
        auto t = binary_tensor(random_mask(8, 8, rng, 0.5));
        CHECK(combined_loss(t, t) == 0.0);
        auto p = t;
        p[rng.below(p.size())] = 0.5;
        CHECK(combined_loss(t, p) > 0.0);
    }
}

TEST_CASE("loss gradients match finite differences") {
    Rng rng(5);
    for (int i = 0; i < 5; ++i) {
        auto t = binary_tensor(random_mask(8, 8, rng, 0.5));
        auto p = random_tensor<double>(t.shape(), rng, 0.05, 0.95);
        auto check = [&](auto value_fn, auto grad_fn) {
            auto f = [&] { return value_fn(t, p); };
            return max_relative_error(grad_fn(t, p).grad.values(), numeric_gradient(p.values(), f));
        };
        CHECK(check([](auto& a, auto& b) { return dice_loss(a, b); },
                    [](auto& a, auto& b) { return dice_loss_with_grad(a, b); }) <= 1e-6);
        CHECK(check([](auto& a, auto& b) { return boundary_loss(a, b); },
                    [](auto& a, auto& b) { return boundary_loss_with_grad(a, b); }) <= 1e-6);
        CHECK(check([](auto& a, auto& b) { return combined_loss(a, b); },
                    [](auto& a, auto& b) { return combined_loss_with_grad(a, b); }) <= 1e-6);

        auto c = combined_loss_with_grad(t, p);
        auto d = dice_loss_with_grad(t, p);
        auto b = boundary_loss_with_grad(t, p);
        CHECK(c.value == doctest::Approx(combined_loss(t, p)).epsilon(1e-14));
        for (std::size_t k = 0; k < p.size(); ++k)
            CHECK(c.grad[k] == doctest::Approx(0.9 * d.grad[k] + 0.1 * b.grad[k]).epsilon(1e-12));
    }
}

TEST_CASE("batch losses score the batch as one pixel volume") {
    Rng rng(6);
    auto t = binary_tensor(random_mask(6, 6, rng, 0.5));
    auto p = random_tensor<double>(t.shape(), rng, 0, 1);
    const Tensor4<double>* parts[] = {&t, &t};
    const Tensor4<double>* pparts[] = {&p, &p};
    auto tt = stack_batch<double>(parts), pp = stack_batch<double>(pparts);
    // Duplicating a sample leaves Dice unchanged only through the smoothing term.
    double inter = 0, st = 0, sp = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        inter += t[i] * p[i];
        st += t[i];
        sp += p[i];
    }
    CHECK(dice_score(tt, pp) == doctest::Approx((4 * inter + 1) / (2 * st + 2 * sp + 1)).epsilon(1e-14));
    CHECK(boundary_loss(tt, pp) == doctest::Approx(boundary_loss(t, p)).epsilon(1e-14));
}
