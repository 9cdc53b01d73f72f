#include <doctest.h>

#include <cmath>

#include "editlab/tensor.hpp"
#include "oracles.hpp"

using namespace editlab;

TEST_CASE("matmul identity and small cases") {
    Tensor eye = Tensor::identity(2);
    Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(eye, b, nullptr);
    CHECK(c.bit_equal(b));

    Tensor a = Tensor::from_data({1, 2}, {1, 2});
    Tensor col = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(a, col, nullptr).at(0) == doctest::Approx(11.0).epsilon(1e-15));

    Tensor wide = Tensor::zeros({3, 2});
    CHECK_THROWS_AS(matmul(a, wide, nullptr), DimensionError);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(11);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0);
    Tensor b = Tensor::randn({4, 2}, rng, 1.0);
    Tensor c = matmul(a, b, nullptr);
    const auto ref = oracles::matmul_triple_loop(a.data(), b.data(), 3, 4, 2);
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(std::abs(c.data()[i] - ref[i]) <= 1e-12);
}

TEST_CASE("softmax_rows basics") {
    Tensor x = Tensor::from_data({1, 3}, {0, 0, 0});
    Tensor y = softmax_rows(x, nullptr);
    for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-14));

    // max subtraction keeps huge logits finite
    Tensor big = Tensor::from_data({1, 3}, {1000, 0, 0});
    Tensor yb = softmax_rows(big, nullptr);
    CHECK(yb.all_finite());
    CHECK(yb.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));

    Tensor z = Tensor::from_data({1, 3}, {1, 2, 3});
    Tensor yz = softmax_rows(z, nullptr);
    const auto ref = oracles::softmax_row_direct(z.data());
    double row_sum = 0.0;
    for (int j = 0; j < 3; ++j) {
        CHECK(std::abs(yz.at(0, j) - ref[static_cast<std::size_t>(j)]) <= 1e-12);
        row_sum += yz.at(0, j);
    }
    CHECK(std::abs(row_sum - 1.0) <= 1e-12);
}

TEST_CASE("cross_entropy matches direct evaluation") {
    // forcing probability ~1 on the target drives the loss to ~0
    Tensor sure = Tensor::from_data({1, 3}, {50, 0, 0});
    std::vector<int> t0{0};
    CHECK(cross_entropy(sure, t0, {1}, nullptr).at(0) == doctest::Approx(0.0).epsilon(1e-12));

    Tensor uniform = Tensor::zeros({2, 4});
    std::vector<int> t1{1, 2};
    CHECK(cross_entropy(uniform, t1, {0, 1}, nullptr).at(0) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-14));

    Rng rng(5);
    Tensor logits = Tensor::randn({5, 7}, rng, 2.0);
    std::vector<int> targets{3, 0, 6, 2, 5};
    std::vector<std::uint8_t> mask{1, 0, 1, 1, 0};
    const double got = cross_entropy(logits, targets, mask, nullptr).at(0);
    const double ref = oracles::cross_entropy_direct(logits.data(), 5, 7, targets, mask);
    CHECK(std::abs(got - ref) <= 1e-12);

    CHECK_THROWS_AS(cross_entropy(logits, targets, {0, 0, 0, 0, 0}, nullptr), ContractError);
}

TEST_CASE("backward on linear and quadratic forms") {
    Tensor w = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    {
        Tape tape;
        Tensor loss = sum_all(w, &tape);
        tape.backward(loss);
        for (double g : w.grad()) CHECK(g == 1.0);
        w.zero_grad();
    }
    Tensor v = Tensor::from_data({1, 3}, {1, 2, 3}, true);
    {
        Tape tape;
        Tensor loss = sum_all(mul(v, v, &tape), &tape);
        tape.backward(loss);
        CHECK(v.grad()[0] == doctest::Approx(2.0));
        CHECK(v.grad()[1] == doctest::Approx(4.0));
        CHECK(v.grad()[2] == doctest::Approx(6.0));
    }
}

TEST_CASE("backward twice without zeroing doubles gradients exactly") {
    Rng rng(7);
    Tensor a = Tensor::randn({4, 4}, rng, 1.0, true);
    Tensor b = Tensor::randn({4, 4}, rng, 1.0, true);
    Tape tape;
    Tensor loss = sum_all(gelu(matmul(a, b, &tape), &tape), &tape);
    tape.backward(loss);
    const std::vector<double> once(a.grad().begin(), a.grad().end());
    tape.backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(a.grad()[i] == 2.0 * once[i]);
}

TEST_CASE("ops are deterministic bit-for-bit") {
    Rng rng1(99), rng2(99);
    Tensor a1 = Tensor::randn({6, 6}, rng1, 1.0);
    Tensor a2 = Tensor::randn({6, 6}, rng2, 1.0);
    CHECK(a1.bit_equal(a2));
    Tensor y1 = softmax_rows(matmul(a1, a1, nullptr), nullptr);
    Tensor y2 = softmax_rows(matmul(a2, a2, nullptr), nullptr);
    CHECK(y1.bit_equal(y2));
}

namespace {

// |g - fd| <= tol * max(|g|, |fd|, 1e-3): relative above the guard scale,
// absolute below it (plain relative error is ill-posed near zero).
void check_close(double g, double fd, double tol) {
    const double scale = std::max({std::abs(g), std::abs(fd), 1e-3});
    CHECK(std::abs(g - fd) <= tol * scale);
}

}  // namespace

TEST_CASE("gradients match central finite differences on 100 random graphs") {
    Rng master(20240601);
    int graphs = 0;
    while (graphs < 100) {
        Rng rng = master.fork(static_cast<std::uint64_t>(graphs));
        const auto program = oracles::make_random_graph(rng, 1 + static_cast<int>(rng.uniform_int(6)));
        if (program.steps.empty()) continue;
        ++graphs;

        std::vector<std::vector<double>> data;
        for (const auto& shape : program.leaf_shapes) {
            std::size_t n = 1;
            for (int d : shape) n *= static_cast<std::size_t>(d);
            std::vector<double> v(n);
            for (double& x : v) x = rng.normal(0.0, 0.5);
            data.push_back(std::move(v));
        }

        Tape tape;
        std::vector<Tensor> leaves;
        Tensor loss;
        const double f0 = oracles::run_graph(program, data, &tape, &leaves, &loss);
        CHECK(std::isfinite(f0));
        tape.backward(loss);

        const double h = 1e-5;
        for (std::size_t li = 0; li < data.size(); ++li) {
            REQUIRE(leaves[li].has_grad());
            for (std::size_t e = 0; e < data[li].size(); ++e) {
                const double keep = data[li][e];
                data[li][e] = keep + h;
                const double fp = oracles::run_graph(program, data, nullptr);
                data[li][e] = keep - h;
                const double fm = oracles::run_graph(program, data, nullptr);
                data[li][e] = keep;
                check_close(leaves[li].grad()[e], (fp - fm) / (2 * h), 1e-5);
            }
        }
    }
}

TEST_CASE("adam first step magnitude and fixed point") {
    for (double g : {3.0, -0.25, 1e-3}) {
        Parameter p{"w", Tensor::zeros({1}, true)};
        std::fill(p.value.grad().begin(), p.value.grad().end(), g);
        Adam adam({.lr = 0.1});
        std::vector<Parameter> ps{p};
        adam.step(ps);
        // bias-corrected first step is -lr * sign(g), up to eps
        CHECK(p.value.at(0) == doctest::Approx(-0.1 * (g > 0 ? 1.0 : -1.0)).epsilon(1e-4));
    }
    {
        Parameter p{"w", Tensor::from_data({1}, {0.7}, true)};
        p.value.grad();  // zero grad present
        Adam adam({.lr = 0.1});
        std::vector<Parameter> ps{p};
        adam.step(ps);
        CHECK(p.value.at(0) == 0.7);
    }
}

TEST_CASE("adam descends a scalar quadratic") {
    // f(w) = (w - 3)^2 from w = 0
    Parameter w{"w", Tensor::zeros({1}, true)};
    Adam adam({.lr = 0.5});
    std::vector<Parameter> ps{w};
    for (int i = 0; i < 10; ++i) {
        Tape tape;
        Tensor c = Tensor::full({1}, -3.0);
        Tensor diff = add(w.value, c, &tape);
        Tensor loss = sum_all(mul(diff, diff, &tape), &tape);
        tape.backward(loss);
        adam.step(ps);
        zero_grads(ps);
    }
    CHECK(std::abs(w.value.at(0) - 3.0) < 3.0);
    CHECK(w.value.at(0) > 0.5);
}

TEST_CASE("adam max_step clamps the update L-inf norm") {
    Parameter w{"w", Tensor::zeros({4}, true)};
    auto g = w.value.grad();
    for (std::size_t i = 0; i < 4; ++i) g[i] = 100.0 * (static_cast<double>(i) + 1);
    Adam adam({.lr = 0.5, .max_step = 1e-3});
    std::vector<Parameter> ps{w};
    adam.step(ps);
    for (double v : w.value.data()) CHECK(std::abs(v) <= 1e-3);
}

TEST_CASE("finite outputs on finite inputs across ops") {
    Rng rng(3);
    Tensor a = Tensor::randn({5, 5}, rng, 10.0);
    Tensor g = Tensor::full({5}, 1.0);
    Tensor b = Tensor::zeros({5});
    CHECK(softmax_rows(a, nullptr).all_finite());
    CHECK(causal_softmax(a, nullptr).all_finite());
    CHECK(gelu(a, nullptr).all_finite());
    CHECK(layer_norm(a, g, b, nullptr).all_finite());
}

TEST_CASE("memtrack reports transient allocations") {
    memtrack::reset_peak();
    const std::size_t before = memtrack::peak_bytes();
    {
        Tensor big({128, 128});
        CHECK(memtrack::peak_bytes() >= before + 128 * 128 * sizeof(double));
    }
    CHECK(memtrack::live_bytes() < before + 128 * 128 * sizeof(double));
}
