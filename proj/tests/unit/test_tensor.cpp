#include <cmath>
#include <limits>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "triqdef/error.hpp"

using namespace triqdef;
using namespace triqdef::ad;

TEST_CASE("tensor construction checks") {
    CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor({0, 2}, {1.0}), ShapeError);
    // empty tensors are defined and hold no values
    CHECK(Tensor({0, 2}, {}).defined());
    CHECK(Tensor({0, 2}, {}).size() == 0);
    const Tensor t({2, 2}, {1, 2, 3, 4});
    CHECK(t.size() == 4);
    CHECK(t.reshaped({4}).identical(Tensor({4}, {1, 2, 3, 4})));
    CHECK(Tensor::scalar(2.5).item() == 2.5);
    CHECK_THROWS_AS(leaf(Tensor({2}, {1.0, std::numeric_limits<double>::quiet_NaN()})), InvalidArgument);
    CHECK_THROWS_AS(leaf(Tensor({1}, {std::numeric_limits<double>::infinity()})), InvalidArgument);
}

TEST_CASE("forward examples") {
    CHECK(relu(constant(Tensor({3}, {-1, 0, 2}))).value().identical(Tensor({3}, {0, 0, 2})));

    const Var img = constant(Tensor::full({1, 1, 3, 3}, 1.0));
    const Var ker = constant(Tensor::full({1, 1, 3, 3}, 1.0));
    const auto out = conv2d(img, ker).value();
    CHECK(out.shape() == Shape{1, 1, 1, 1});
    CHECK(out.item() == 9.0);

    const auto ce = softmax_cross_entropy(constant(Tensor({1, 2}, {0, 0})), one_hot({0}, 2)).value();
    CHECK(ce.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("shape errors name the op and both shapes") {
    const Var a = constant(Tensor::zeros({2, 3}));
    const Var b = constant(Tensor::zeros({4}));
    try {
        add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4]") != std::string::npos);
    }
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
    CHECK_THROWS_AS(conv2d(constant(Tensor::zeros({1, 2, 4, 4})), constant(Tensor::zeros({1, 3, 3, 3}))), ShapeError);
}

TEST_CASE("backward examples") {
    const Var x = leaf(Tensor({2}, {1, 2}));
    const auto g = backward(sum(square(x)));
    CHECK(g(x).identical(Tensor({2}, {2, 4})));
    CHECK(x.grad().identical(Tensor({2}, {2, 4})));

    const Var y = leaf(Tensor({1}, {-3}));
    CHECK(backward(sum(relu(y)))(y).item() == 0.0);

    const Var z = leaf(Tensor({1}, {0.0}));
    CHECK(backward(sum(relu(z)))(z).item() == 0.0);

    CHECK_THROWS_AS(backward(square(x)), ShapeError);
}

TEST_CASE("unreachable leaves get exact zeros") {
    const Var x = leaf(Tensor({2}, {1, 2}));
    const Var unused = leaf(Tensor({3}, {1, 2, 3}));
    const auto g = backward(sum(x));
    CHECK(g(unused).identical(Tensor::zeros({3})));
    const auto gs = grad(sum(x), {x, unused});
    CHECK(gs[1].value().identical(Tensor::zeros({3})));
}

TEST_CASE("second order through grad_as_node") {
    // x^3 at 2: first derivative 12, second 12
    const Var x = leaf(Tensor({1}, {2.0}));
    const Var g = grad_as_node(sum(mul(x, square(x))), x);
    CHECK(g.value().item() == doctest::Approx(12.0).epsilon(1e-14));
    CHECK(grad(sum(g), {x})[0].value().item() == doctest::Approx(12.0).epsilon(1e-14));

    // L = (d/dx x^2)^2 at 1: dL/dx = 8
    const Var y = leaf(Tensor({1}, {1.0}));
    const Var gy = grad_as_node(sum(square(y)), y);
    CHECK(grad(sum(square(gy)), {y})[0].value().item() == doctest::Approx(8.0).epsilon(1e-14));
}

TEST_CASE("grad_as_node rejects targets off the tape") {
    const Var x = leaf(Tensor({2}, {1, 2}));
    const Var other = leaf(Tensor({2}, {3, 4}));
    CHECK_THROWS_AS(grad_as_node(sum(square(x)), other), InvalidArgument);
    CHECK_THROWS_AS(grad_as_node(sum(square(x)), constant(Tensor({2}, {1, 2}))), InvalidArgument);
}

TEST_CASE("grad_as_node w.r.t. an intermediate node") {
    const Var x = leaf(Tensor({2}, {1, 3}));
    const Var h = mul_scalar(x, 2.0);
    const Var g = grad_as_node(sum(square(h)), h);  // 2h
    CHECK(g.value().identical(Tensor({2}, {4, 12})));
    // d/dx sum(2h) = 2 * 2 = 4
    CHECK(grad(sum(g), {x})[0].value().identical(Tensor({2}, {4, 4})));
}

TEST_CASE("no-grad mode records nothing") {
    const Var x = leaf(Tensor({2}, {1, 2}));
    NoGradGuard ng;
    const Var y = square(x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("backward is deterministic and tape replay is bit-identical") {
    std::mt19937_64 rng(5);
    const Tensor xt = testsupport::random_tensor(rng, {2, 2, 6, 6});
    const Tensor wt = testsupport::random_tensor(rng, {3, 2, 3, 3});
    auto run = [&](Tensor* gx, std::vector<Tensor>* replay1, std::vector<Tensor>* replay2,
                   std::vector<Tensor>* forward_vals) {
        GradientTape tape;
        const Var x = leaf(xt);
        const Var w = leaf(wt);
        const Var loss = sum(max_pool2d(relu(conv2d(x, w, {1, 1})), 2));
        const Var gxn = grad_as_node(loss, x);
        *gx = grad(sum(square(gxn)), {w})[0].value();
        *replay1 = tape.replay();
        *replay2 = tape.replay();
        forward_vals->clear();
        for (const auto& n : tape.nodes()) forward_vals->push_back(n.value());
    };
    Tensor g1, g2;
    std::vector<Tensor> r1, r2, r3, r4, f1, f2;
    run(&g1, &r1, &r2, &f1);
    run(&g2, &r3, &r4, &f2);
    CHECK(g1.identical(g2));
    REQUIRE(r1.size() == r2.size());
    REQUIRE(r1.size() == f1.size());
    REQUIRE(r1.size() > 6);
    bool same = true;
    for (std::size_t i = 0; i < r1.size(); ++i) same = same && r1[i].identical(r2[i]) && r1[i].identical(f1[i]);
    CHECK(same);
}
