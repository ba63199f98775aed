#include <cmath>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "triqdef/error.hpp"
#include "triqdef/quant.hpp"

using namespace triqdef;
using namespace triqdef::quant;

TEST_CASE("calibrate examples") {
    auto s = calibrate(Tensor({3}, {-1, 0.5, 1}), 2);
    CHECK(s.scale == 1.0);
    CHECK(s.clip_lo == -1.0);
    CHECK(s.clip_hi == 1.0);
    CHECK(s.zero_point == 0.0);

    CHECK(calibrate(Tensor::zeros({4}), 4).scale == 1.0);

    s = calibrate(Tensor({2}, {-3, 6}), 4);
    CHECK(s.scale == doctest::Approx(6.0 / 7.0).epsilon(1e-15));
    CHECK(s.clip_lo == -7.0);
    CHECK(s.clip_hi == 7.0);

    CHECK(calibrate(Tensor({2}, {-3, 6}), 32).is_identity());
    CHECK_THROWS_AS(calibrate(Tensor({1}, {1.0}), 1), InvalidArgument);
    CHECK_THROWS_AS(calibrate(Tensor({1}, {1.0}), 0), InvalidArgument);
}

TEST_CASE("fake_quantize examples") {
    const auto s = calibrate(Tensor({3}, {-1, 0.5, 1}), 2);
    CHECK(fake_quantize(Tensor({3}, {-1, 0.5, 1}), s).identical(Tensor({3}, {-1, 1, 1})));
    CHECK(quantize_value(0.0, s) == 0.0);
    CHECK(quantize_value(-0.5, s) == -1.0);
    CHECK(quantize_value(0.49, s) == 0.0);

    std::mt19937_64 rng(1);
    const Tensor x = testsupport::random_tensor(rng, {17});
    CHECK(fake_quantize(x, QuantSpec::identity()).identical(x));
    const ad::Var xv = ad::leaf(x);
    const ad::Var y = fake_quantize(xv, QuantSpec::identity());
    CHECK(y.node() == xv.node());
}

TEST_CASE("STE passes gradient only in range") {
    QuantSpec s = spec_from_max(1.0, 3);   // scale 1/3, levels -3..3
    const ad::Var x = ad::leaf(Tensor({5}, {-2.0, -1.0, 0.2, 1.0, 1.5}));
    const auto g = ad::grad(ad::sum(fake_quantize(x, s)), {x})[0].value();
    CHECK(g.identical(Tensor({5}, {0.0, 1.0, 1.0, 1.0, 0.0})));
}

TEST_CASE("quantizer properties on random tensors") {
    std::mt19937_64 rng(77);
    for (int bits : {2, 3, 4, 5, 8}) {
        for (int rep = 0; rep < 20; ++rep) {
            const Tensor x = testsupport::random_tensor(rng, {64}, -3.0, 3.0);
            const auto s = calibrate(x, bits);
            const Tensor q = fake_quantize(x, s);
            CHECK(fake_quantize(q, s).identical(q));
            for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::fabs(q[i] - x[i]) <= s.scale / 2 + 1e-15);
        }
    }
}

TEST_CASE("quantize_model") {
    std::vector<WeightEntry> w{{"fc.weight", Tensor({2}, {-2, 2}), true}, {"fc.bias", Tensor({1}, {5}), false}};
    ActivationObserver obs;
    auto q = quantize_model(w, {}, obs, 4, true);
    CHECK(q.weights.at("fc.weight").scale == doctest::Approx(2.0 / 7.0).epsilon(1e-15));
    CHECK(q.weights.count("fc.bias") == 0);

    const auto q32 = quantize_model(w, {"act0"}, obs, 32, true);
    CHECK(q32.weights.at("fc.weight").is_identity());
    CHECK(q32.activations.at("act0").is_identity());

    CHECK_THROWS_AS(quantize_model(w, {"act0"}, obs, 4, true), InvalidArgument);
    obs.observe("act0", Tensor({3}, {0.1, -0.7, 0.3}));
    q = quantize_model(w, {"act0"}, obs, 4, true);
    CHECK(q.activations.at("act0").scale == doctest::Approx(0.1).epsilon(1e-12));

    // Frozen specs survive a weight change until recalibration is requested.
    w[0].value = Tensor({2}, {-4, 1});
    CHECK(quantize_model(w, {"act0"}, obs, 4, false, &q) == q);
    const auto q2 = quantize_model(w, {"act0"}, obs, 4, true, &q);
    CHECK(q2.weights.at("fc.weight").scale == doctest::Approx(4.0 / 7.0).epsilon(1e-15));
}

TEST_CASE("recalibrated scale is monotone in max|w|") {
    double prev = 0.0;
    for (double m = 0.1; m < 5.0; m += 0.37) {
        const double s = calibrate(Tensor({3}, {m, -m / 2, 0.0}), 4).scale;
        CHECK(s > prev);
        prev = s;
    }
}
