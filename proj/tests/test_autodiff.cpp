#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flowcast/errors.hpp"
#include "flowcast/gradcheck.hpp"
#include "flowcast/tensor.hpp"

#include <cmath>
#include <random>

using namespace flowcast;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, bool requires_grad = true,
                     double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> v(n);
    for (double& x : v) x = dist(rng);
    return Tensor::from_vector(std::move(shape), std::move(v), requires_grad);
}

/// Random values bounded away from zero, for kinked ops like relu where
/// finite differences straddling the kink are meaningless.
Tensor random_away_from_zero(std::mt19937_64& rng, Shape shape) {
    Tensor t = random_tensor(rng, std::move(shape));
    for (double& x : t.values()) x += (x >= 0.0 ? 0.25 : -0.25);
    return t;
}

} // namespace

TEST_CASE("matmul oracles") {
    Tensor eye = Tensor::from_vector({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor m = Tensor::from_vector({3, 3}, {2, -1, 3, 0, 5, 1, 7, 2, -4});
    CHECK(matmul(eye, m).values() == m.values());

    Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
    Tensor ones = Tensor::from_vector({2, 1}, {1, 1});
    Tensor p = matmul(a, ones);
    CHECK(p.shape() == Shape{2, 1});
    CHECK(p.values()[0] == 3.0);
    CHECK(p.values()[1] == 7.0);

    Tensor bad = Tensor::from_vector({3, 1}, {1, 1, 1});
    CHECK_THROWS_AS(matmul(a, bad), ShapeError);
}

TEST_CASE("matmul, matmul_transposed, linear gradients vs finite differences") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        Tensor a = random_tensor(rng, {4, 3});
        Tensor b = random_tensor(rng, {3, 5});
        double err = grad_check([&] { return sum(matmul(a, b)); }, {a, b});
        CHECK(err < 1e-6);

        Tensor q = random_tensor(rng, {3, 4});
        Tensor k = random_tensor(rng, {3, 4});
        err = grad_check([&] { return sum(matmul_transposed(q, k)); }, {q, k});
        CHECK(err < 1e-6);

        Tensor x = random_tensor(rng, {2, 3});
        Tensor w = random_tensor(rng, {3, 4});
        Tensor bias = random_tensor(rng, {4});
        err = grad_check([&] { return sum(mul(linear(x, w, bias), linear(x, w, bias))); },
                         {x, w, bias});
        CHECK(err < 1e-6);
    }
}

TEST_CASE("conv2d oracles") {
    Tensor x = Tensor::full({1, 3, 3}, 1.0);
    Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor out = conv2d(x, k, Tensor(), 1, 1);
    CHECK(out.shape() == Shape{1, 3, 3});
    std::vector<double> expected = {4, 6, 4, 6, 9, 6, 4, 6, 4};
    CHECK(out.values() == expected);

    Tensor zk = Tensor::zeros({2, 1, 3, 3});
    Tensor zout = conv2d(x, zk, Tensor(), 1, 1);
    CHECK(zout.shape() == Shape{2, 3, 3});
    for (double v : zout.values()) CHECK(v == 0.0);

    // 1x1 unit kernel, stride 1, pad 0: identity
    std::mt19937_64 rng(5);
    Tensor img = random_tensor(rng, {1, 4, 6}, false);
    Tensor unit = Tensor::full({1, 1, 1, 1}, 1.0);
    CHECK(conv2d(img, unit, Tensor(), 1, 0).values() == img.values());

    // non-integer output extent rejected: (4 - 3) is not divisible by stride 2
    Tensor wide = Tensor::zeros({1, 4, 4});
    Tensor k33 = Tensor::zeros({1, 1, 3, 3});
    CHECK_THROWS_AS(conv2d(wide, k33, Tensor(), 2, 0), ConfigError);
}

TEST_CASE("conv2d strided forward matches a literal sliding-window loop") {
    std::mt19937_64 rng(77);
    const std::size_t C = 2, H = 5, W = 7, OC = 3, KH = 3, KW = 3;
    for (std::size_t stride : {1u, 2u}) {
        Tensor x = random_tensor(rng, {C, H, W}, false);
        Tensor k = random_tensor(rng, {OC, C, KH, KW}, false);
        Tensor b = random_tensor(rng, {OC}, false);
        const std::size_t pad = 1;
        const std::size_t OH = (H + 2 * pad - KH) / stride + 1;
        const std::size_t OW = (W + 2 * pad - KW) / stride + 1;
        Tensor out = conv2d(x, k, b, stride, pad);
        REQUIRE(out.shape() == Shape{OC, OH, OW});
        for (std::size_t oc = 0; oc < OC; ++oc)
            for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    double acc = b.values()[oc];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t kh = 0; kh < KH; ++kh)
                            for (std::size_t kw = 0; kw < KW; ++kw) {
                                long ih = static_cast<long>(oh * stride + kh) - static_cast<long>(pad);
                                long iw = static_cast<long>(ow * stride + kw) - static_cast<long>(pad);
                                if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W))
                                    continue;
                                acc += x.values()[(c * H + static_cast<std::size_t>(ih)) * W +
                                                  static_cast<std::size_t>(iw)] *
                                       k.values()[((oc * C + c) * KH + kh) * KW + kw];
                            }
                    CHECK(out.values()[(oc * OH + oh) * OW + ow] == doctest::Approx(acc).epsilon(1e-12));
                }
    }
}

TEST_CASE("conv2d gradients vs finite differences, symmetric and asymmetric") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        Tensor x = random_tensor(rng, {2, 4, 5});
        Tensor k = random_tensor(rng, {3, 2, 3, 3});
        Tensor b = random_tensor(rng, {3});
        double err = grad_check([&] { return sum(mul(conv2d(x, k, b, 1, 1), conv2d(x, k, b, 1, 1))); },
                                {x, k, b});
        CHECK(err < 1e-6);

        // stride 2 exercises the generic (non-fast-path) loops
        Tensor x2 = random_tensor(rng, {1, 5, 5});
        Tensor k2 = random_tensor(rng, {2, 1, 3, 3});
        err = grad_check([&] { return sum(conv2d(x2, k2, Tensor(), 2, 1)); }, {x2, k2});
        CHECK(err < 1e-6);

        // 1-d convolution expressed as H=1 with asymmetric padding
        Tensor row = random_tensor(rng, {3, 1, 8});
        Tensor k1 = random_tensor(rng, {4, 3, 1, 3});
        Tensor b1 = random_tensor(rng, {4});
        err = grad_check([&] { return sum(mul(conv2d(row, k1, b1, 1, 1, 0, 1), conv2d(row, k1, b1, 1, 1, 0, 1))); },
                         {row, k1, b1});
        CHECK(err < 1e-6);
    }
}

TEST_CASE("softmax oracles and gradient") {
    Tensor z = Tensor::zeros({3});
    Tensor s = softmax(z);
    for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    std::mt19937_64 rng(3);
    Tensor x = random_tensor(rng, {4, 6}, false, -30.0, 30.0);
    Tensor rows = softmax(x, -1);
    for (std::size_t r = 0; r < 4; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < 6; ++c) {
            double v = rows.values()[r * 6 + c];
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            total += v;
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
    }

    // column softmax: each column sums to 1
    Tensor cols = softmax(x, 0);
    for (std::size_t c = 0; c < 6; ++c) {
        double total = 0.0;
        for (std::size_t r = 0; r < 4; ++r) total += cols.values()[r * 6 + c];
        CHECK(std::abs(total - 1.0) <= 1e-12);
    }

    // stability: huge logits stay finite
    Tensor big = Tensor::from_vector({3}, {1e9, 1e9 + 1, -1e9});
    for (double v : softmax(big).values()) CHECK(std::isfinite(v));

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 r2(seed);
        Tensor g = random_tensor(r2, {3, 5});
        Tensor wsum = random_tensor(r2, {3, 5}, false);
        double err = grad_check([&] { return sum(mul(softmax(g, -1), wsum)); }, {g});
        CHECK(err < 1e-6);
        err = grad_check([&] { return sum(mul(softmax(g, 0), wsum)); }, {g});
        CHECK(err < 1e-6);
    }

    CHECK_THROWS_AS(softmax(Tensor::zeros({2, 2}), 2), ShapeError);
}

TEST_CASE("elementwise ops: oracles") {
    std::mt19937_64 rng(11);
    Tensor x = random_tensor(rng, {3, 4}, false);
    Tensor zeros = Tensor::zeros({3, 4});
    CHECK(add(x, zeros).values() == x.values());

    Tensor r = relu(Tensor::from_vector({3}, {-1, 0, 2}));
    CHECK(r.values() == std::vector<double>{0, 0, 2});

    Tensor a = Tensor::from_vector({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_vector({3, 2}, {7, 8, 9, 10, 11, 12});
    Tensor cat1 = concat({a, b}, 1);
    CHECK(cat1.shape() == Shape{3, 4});
    CHECK(cat1.values() == std::vector<double>{1, 2, 7, 8, 3, 4, 9, 10, 5, 6, 11, 12});
    Tensor cat0 = concat({a, b}, 0);
    CHECK(cat0.shape() == Shape{6, 2});
    CHECK(cat0.values() == std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    Tensor odd = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(concat({a, odd}, 1), ShapeError);

    CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
    CHECK(reshape(a, {2, 3}).values() == a.values());

    CHECK(sigmoid(Tensor::zeros({1})).values()[0] == 0.5);
    CHECK(flowcast::tanh(Tensor::zeros({1})).values()[0] == 0.0);

    CHECK_THROWS_AS(add(a, odd), ShapeError);
}

TEST_CASE("elementwise gradients vs finite differences") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        Tensor a = random_tensor(rng, {3, 4});
        Tensor b = random_tensor(rng, {3, 4});
        CHECK(grad_check([&] { return sum(mul(add(a, b), sub(a, b))); }, {a, b}) < 1e-6);
        CHECK(grad_check([&] { return sum(mul_scalar(mul(a, b), -1.7)); }, {a, b}) < 1e-6);

        Tensor c = random_away_from_zero(rng, {4, 4});
        CHECK(grad_check([&] { return sum(relu(c)); }, {c}) < 1e-6);
        CHECK(grad_check([&] { return sum(mul(sigmoid(a), flowcast::tanh(b))); }, {a, b}) < 1e-6);

        Tensor d = random_tensor(rng, {2, 3});
        Tensor e = random_tensor(rng, {2, 3});
        Tensor w = random_tensor(rng, {2, 6}, false);
        CHECK(grad_check([&] { return sum(mul(concat({d, e}, 1), w)); }, {d, e}) < 1e-6);
        Tensor w0 = random_tensor(rng, {4, 3}, false);
        CHECK(grad_check([&] { return sum(mul(concat({d, e}, 0), w0)); }, {d, e}) < 1e-6);
        CHECK(grad_check([&] { return sum(mul(reshape(d, {3, 2}), reshape(e, {3, 2}))); }, {d, e}) < 1e-6);
    }
}

TEST_CASE("relu subgradient at zero is zero") {
    Tensor x = Tensor::from_vector({3}, {-1, 0, 2}, true);
    Tensor loss = sum(relu(x));
    loss.backward();
    CHECK(x.grad() == std::vector<double>{0, 0, 1});
}

TEST_CASE("mse oracles and gradient") {
    Tensor p = Tensor::from_vector({2}, {3, 4});
    Tensor t = Tensor::zeros({2});
    CHECK(mse(p, t).item() == 12.5);
    CHECK(mse(t, t).item() == 0.0);
    CHECK_THROWS_AS(mse(p, Tensor::zeros({3})), ShapeError);

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        Tensor pred = random_tensor(rng, {4, 3});
        Tensor target = random_tensor(rng, {4, 3}, false);
        CHECK(grad_check([&] { return mse(pred, target); }, {pred}) < 1e-6);

        // analytic gradient 2(p-t)/m
        pred.zero_grad();
        mse(pred, target).backward();
        for (std::size_t i = 0; i < 12; ++i) {
            double expect = 2.0 * (pred.values()[i] - target.values()[i]) / 12.0;
            CHECK(pred.grad()[i] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("backward mechanics") {
    SUBCASE("sum gradient is all ones") {
        Tensor x = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6}, true);
        sum(x).backward();
        CHECK(x.grad() == std::vector<double>(6, 1.0));
    }
    SUBCASE("disconnected parameter keeps a zero gradient") {
        Tensor x = Tensor::from_vector({2}, {1, 2}, true);
        Tensor unused = Tensor::from_vector({2}, {5, 5}, true);
        sum(mul(x, x)).backward();
        CHECK(unused.grad() == std::vector<double>{0, 0});
        CHECK(x.grad() == std::vector<double>{2, 4});
    }
    SUBCASE("repeated backward accumulates") {
        Tensor x = Tensor::from_vector({2}, {3, 5}, true);
        Tensor loss = sum(x);
        loss.backward();
        loss.backward();
        CHECK(x.grad() == std::vector<double>{2, 2});
        x.zero_grad();
        loss.backward();
        CHECK(x.grad() == std::vector<double>{1, 1});
    }
    SUBCASE("diamond-shaped graph accumulates both paths") {
        Tensor x = Tensor::from_vector({1}, {3}, true);
        Tensor y = add(mul(x, x), x); // d/dx = 2x + 1 = 7
        sum(y).backward();
        CHECK(x.grad()[0] == 7.0);
    }
    SUBCASE("non-scalar backward is a usage error") {
        Tensor x = Tensor::from_vector({2}, {1, 2}, true);
        CHECK_THROWS_AS(mul(x, x).backward(), Error);
    }
    SUBCASE("grad of a non-requires-grad tensor is an error") {
        Tensor x = Tensor::from_vector({2}, {1, 2}, false);
        CHECK_THROWS_AS((void)x.grad(), Error);
    }
}

TEST_CASE("no-grad mode skips the tape") {
    Tensor x = Tensor::from_vector({2}, {1, 2}, true);
    {
        grad_mode::NoGradGuard guard;
        Tensor loss = sum(mul(x, x));
        CHECK(loss.item() == 5.0);
        // no tape was recorded, so the result is detached from x
        CHECK_THROWS_AS(loss.backward(), Error);
    }
    CHECK(x.grad() == std::vector<double>{0, 0});
    // outside the guard the same expression is differentiable again
    sum(mul(x, x)).backward();
    CHECK(x.grad() == std::vector<double>{2, 4});
}

TEST_CASE("forward determinism: identical inputs give identical bits") {
    std::mt19937_64 rng(21);
    Tensor a = random_tensor(rng, {5, 5}, false);
    Tensor b = random_tensor(rng, {5, 5}, false);
    Tensor r1 = matmul(softmax(a, -1), sigmoid(b));
    Tensor r2 = matmul(softmax(a, -1), sigmoid(b));
    CHECK(r1.values() == r2.values());
}

TEST_CASE("grad_check harness behavior") {
    Tensor theta = Tensor::from_vector({4}, {0.3, -0.7, 1.1, 0.05}, true);
    double err = grad_check([&] { return sum(mul(theta, theta)); }, {theta});
    CHECK(err < 1e-8); // central differences are exact on quadratics up to roundoff

    CHECK_THROWS_AS(grad_check([&] { return sum(theta); }, {theta}, 0.0), ConfigError);
    CHECK_THROWS_AS(grad_check([&] { return sum(theta); }, {theta}, -1e-5), ConfigError);

    Tensor bad = Tensor::from_vector({1}, {0.0}, true);
    CHECK_THROWS_AS(grad_check(
                        [&] {
                            Tensor inv = Tensor::from_vector({1}, {1.0 / bad.values()[0]}, false);
                            return sum(mul(bad, inv));
                        },
                        {bad}),
                    Error);

    // sampled variant agrees with the exhaustive one on a smooth function
    std::mt19937_64 rng(8);
    Tensor p = random_tensor(rng, {6, 6});
    auto f = [&] { return sum(mul(sigmoid(p), p)); };
    CHECK(grad_check_sampled(f, {p}, 1e-5, 10, 42) < 1e-6);
    CHECK_THROWS_AS(grad_check_sampled(f, {p}, 1e-5, 0, 42), ConfigError);
}
