#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "triqdef/attacks.hpp"
#include "triqdef/binio.hpp"
#include "triqdef/error.hpp"
#include "triqdef/ops.hpp"

using namespace triqdef;
using namespace triqdef::attacks;
using testsupport::random_tensor;

namespace {

PatchSpec make_patch(std::size_t c, std::size_t h, std::size_t w, std::size_t img, std::size_t row, std::size_t col,
                     double value = 0.75) {
    PatchSpec p;
    p.id = "p";
    p.pixels = Tensor::full({c, h, w}, value);
    p.image_height = img;
    p.image_width = img;
    p.row = row;
    p.col = col;
    p.target_class = 1;
    return p;
}

// Frozen linear classifier: logits = flatten(x) W.
Classifier linear_model(const Tensor& w) {
    return [w](const ad::Var& x) {
        const std::size_t n = x.shape()[0];
        return ad::matmul(ad::reshape(x, {n, w.dim(0)}), ad::constant(w));
    };
}

// Predicts from the mean of channel 0 inside the top-left 2x2 window:
// class 1 when it exceeds 0.5, class 0 otherwise.
Classifier window_model() {
    return [](const ad::Var& x) {
        const Tensor& v = x.value();
        const std::size_t n = v.dim(0), H = v.dim(2), W = v.dim(3), C = v.dim(1);
        std::vector<double> z(n * 2, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double m = 0.0;
            for (std::size_t r = 0; r < 2; ++r)
                for (std::size_t c = 0; c < 2; ++c) m += v[(i * C * H + r) * W + c] / 4.0;
            z[i * 2 + (m > 0.5 ? 1 : 0)] = 1.0;
        }
        return ad::constant(Tensor({n, 2}, z));
    };
}

std::size_t changed(const Tensor& a, const Tensor& b) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
    return n;
}

} // namespace

TEST_CASE("2x2 patch at the origin of a 4x4 image changes exactly four pixels") {
    const Tensor x = Tensor::zeros({1, 1, 4, 4});
    const auto p = make_patch(1, 2, 2, 4, 0, 0);
    const Tensor y = apply_patch(x, p);
    CHECK(changed(x, y) == 4);
    CHECK(y[0] == 0.75);
    CHECK(y[1 * 4 + 1] == 0.75);
    CHECK(y[2 * 4 + 2] == 0.0);
    const Tensor mask = p.mask();
    double ones = 0.0;
    for (double v : mask.values()) ones += v;
    CHECK(ones == 4.0);
}

TEST_CASE("empty mask leaves images unchanged and a full mask broadcasts the patch") {
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor(rng, {3, 2, 5, 5}, 0.0, 1.0);
    PatchSpec empty = make_patch(2, 0, 0, 5, 0, 0);
    CHECK(apply_patch(x, empty).identical(x));

    PatchSpec full = make_patch(2, 5, 5, 5, 0, 0);
    full.pixels = random_tensor(rng, {2, 5, 5}, 0.0, 1.0);
    const Tensor y = apply_patch(x, full);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < 50; ++i) CHECK(y[n * 50 + i] == full.pixels[i]);
}

TEST_CASE("apply_patch keeps outside pixels, is idempotent and rejects misfits") {
    std::mt19937_64 rng(2);
    const Tensor x = random_tensor(rng, {2, 3, 8, 8}, 0.0, 1.0);
    PatchSpec p = make_patch(3, 3, 2, 8, 4, 5);
    p.pixels = random_tensor(rng, {3, 3, 2}, 0.0, 1.0);
    const Tensor y = apply_patch(x, p);
    const Tensor m = p.mask();
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t k = 0; k < 64; ++k) {
                if (m[k] == 0.0) CHECK(y[(n * 3 + c) * 64 + k] == x[(n * 3 + c) * 64 + k]);
            }
    CHECK(apply_patch(y, p).identical(y));
    CHECK_THROWS_AS(apply_patch(x, make_patch(3, 3, 3, 8, 6, 0)), ShapeError);
    CHECK_THROWS_AS(apply_patch(x, make_patch(1, 2, 2, 8, 0, 0)), ShapeError);
    CHECK_THROWS_AS(apply_patch(Tensor::zeros({1, 3, 6, 6}), make_patch(3, 2, 2, 8, 0, 0)), ShapeError);
    CHECK_THROWS_AS(make_patch(3, 3, 3, 8, 6, 0).validate(), InvalidArgument);
    CHECK_THROWS_AS(make_patch(3, 2, 2, 8, 0, 0, 1.5).validate(), InvalidArgument);
}

TEST_CASE("one ascent step on a linear model moves each pixel by step_size times the gradient sign") {
    // Two classes: d log p_t / dP is (1 - p_t)(w_t - w_o) restricted to the
    // patch window, so its sign is sign(w_t - w_o) whatever the images are.
    std::mt19937_64 rng(3);
    const std::size_t C = 2, S = 6, D = C * S * S;
    const Tensor w = random_tensor(rng, {D, 2});
    const Tensor x = random_tensor(rng, {4, C, S, S}, 0.0, 1.0);
    PatchRequest req;
    req.height = 3;
    req.width = 2;
    req.row = 1;
    req.col = 3;
    req.target_class = 1;
    AttackConfig small{1, 1e-3, true, false, 9, 0};
    AttackConfig larger = small;
    larger.step_size = 2e-3;
    const auto a = craft_patch(linear_model(w), x, {0, 0, 1, 0}, small, req);
    const auto b = craft_patch(linear_model(w), x, {0, 0, 1, 0}, larger, req);
    std::size_t checked = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 2; ++j) {
                const std::size_t k = (c * 3 + i) * 2 + j;
                if (a.pixels[k] < 0.01 || a.pixels[k] > 0.99) continue;   // projection may bind
                const std::size_t d = (c * S + req.row + i) * S + req.col + j;
                const double sign = w[d * 2 + 1] > w[d * 2] ? 1.0 : -1.0;
                CHECK(b.pixels[k] - a.pixels[k] == doctest::Approx(1e-3 * sign).epsilon(1e-9));
                ++checked;
            }
    CHECK(checked >= 8);
}

TEST_CASE("one crafting iteration reproduces the stored fixture") {
    std::mt19937_64 rng(4);
    const Tensor w = random_tensor(rng, {1 * 4 * 4, 3});
    const Tensor x = random_tensor(rng, {5, 1, 4, 4}, 0.0, 1.0);
    PatchRequest req;
    req.height = 2;
    req.width = 2;
    req.row = 1;
    req.col = 1;
    req.target_class = 2;
    const auto p = craft_patch(linear_model(w), x, {0, 1, 2, 0, 1}, AttackConfig{1, 0.05, true, false, 17, 2}, req);
    const std::vector<double> fixture{0.64707718429472405, 0.0, 0.65169823264178683, 0.62060824088000455};
    CHECK(p.pixels.to_vector() == fixture);
}

TEST_CASE("attack configuration and target checks") {
    CHECK_THROWS_AS((AttackConfig{0, 0.05}.validate()), InvalidArgument);
    CHECK_THROWS_AS((AttackConfig{10, 0.0}.validate()), InvalidArgument);
    std::mt19937_64 rng(5);
    const Tensor w = random_tensor(rng, {16, 3});
    const Tensor x = random_tensor(rng, {2, 1, 4, 4}, 0.0, 1.0);
    PatchRequest req;
    req.height = 2;
    req.width = 2;
    req.target_class = 3;
    CHECK_THROWS_AS(craft_patch(linear_model(w), x, {0, 1}, AttackConfig{1, 0.05}, req), InvalidArgument);
    req.target_class.reset();
    CHECK_THROWS_AS(craft_patch(linear_model(w), x, {0, 1}, AttackConfig{1, 0.05}, req), InvalidArgument);
    // untargeted needs no target
    const auto p = craft_patch(linear_model(w), x, {0, 1}, AttackConfig{2, 0.05, false}, req);
    CHECK_FALSE(p.target_class.has_value());
}

TEST_CASE("crafting never writes outside the mask and is deterministic") {
    std::mt19937_64 rng(6);
    const Tensor w = random_tensor(rng, {3 * 8 * 8, 4});
    const Tensor x = random_tensor(rng, {6, 3, 8, 8}, 0.0, 1.0);
    PatchRequest req;
    req.height = 3;
    req.width = 3;
    req.row = 2;
    req.col = 4;
    req.target_class = 0;
    AttackConfig cfg{12, 0.1, true, false, 5, 4};
    const auto a = craft_patch(linear_model(w), x, {0, 1, 2, 3, 0, 1}, cfg, req);
    const auto b = craft_patch(linear_model(w), x, {0, 1, 2, 3, 0, 1}, cfg, req);
    CHECK(a == b);
    for (double v : a.pixels.values()) CHECK((v >= 0.0 && v <= 1.0));
    const Tensor y = apply_patch(x, a);
    const Tensor m = a.mask();
    for (std::size_t n = 0; n < 6 * 3; ++n)
        for (std::size_t k = 0; k < 64; ++k)
            if (m[k] == 0.0) CHECK(y[n * 64 + k] == x[n * 64 + k]);

    cfg.random_location = true;
    req.family = Family::universal;
    const auto u1 = craft_patch(linear_model(w), x, {0, 1, 2, 3, 0, 1}, cfg, req);
    const auto u2 = craft_patch(linear_model(w), x, {0, 1, 2, 3, 0, 1}, cfg, req);
    CHECK(u1 == u2);
    cfg.seed = 6;
    CHECK_FALSE(craft_patch(linear_model(w), x, {0, 1, 2, 3, 0, 1}, cfg, req) == u1);
}

TEST_CASE("targeted crafting raises the target rate of a linear model") {
    std::mt19937_64 rng(7);
    const Tensor w = random_tensor(rng, {3 * 8 * 8, 4});
    const Tensor x = random_tensor(rng, {40, 3, 8, 8}, 0.0, 1.0);
    std::vector<int> labels = predict(linear_model(w), x);
    // aim at the class the model predicts least often
    std::vector<int> counts(4, 0);
    for (int l : labels) ++counts[static_cast<std::size_t>(l)];
    const int target = static_cast<int>(std::min_element(counts.begin(), counts.end()) - counts.begin());
    PatchRequest req;
    req.height = 4;
    req.width = 4;
    req.target_class = target;
    const auto p = craft_patch(linear_model(w), x, labels, AttackConfig{50, 0.05, true, false, 1, 16}, req);
    CHECK(target_rate(linear_model(w), x, target, &p) > target_rate(linear_model(w), x, target));
    CHECK(attack_success_rate(linear_model(w), x, labels, p, true) > 0.5);
}

TEST_CASE("ASR of a constant model predicting the target is 1") {
    const Classifier always1 = [](const ad::Var& x) {
        const std::size_t n = x.shape()[0];
        std::vector<double> z(n * 3, 0.0);
        for (std::size_t i = 0; i < n; ++i) z[i * 3 + 1] = 5.0;
        return ad::constant(Tensor({n, 3}, z));
    };
    const Tensor x = Tensor::zeros({4, 1, 4, 4});
    const auto p = make_patch(1, 2, 2, 4, 0, 0);
    // every input clean-correct (labels 1), all sent to target 1
    CHECK(attack_success_rate(always1, x, {1, 1, 1, 1}, p, true) == 1.0);
    // nobody clean-correct: defined as 0
    CHECK(attack_success_rate(always1, x, {0, 2, 0, 2}, p, true) == 0.0);
}

TEST_CASE("patch with an empty mask has untargeted ASR 0") {
    std::mt19937_64 rng(8);
    const Tensor w = random_tensor(rng, {16, 3});
    const Tensor x = random_tensor(rng, {10, 1, 4, 4}, 0.0, 1.0);
    const auto labels = predict(linear_model(w), x);
    CHECK(attack_success_rate(linear_model(w), x, labels, make_patch(1, 0, 0, 4, 0, 0), false) == 0.0);
}

TEST_CASE("three-sample fixture gives ASR 2/3") {
    // Clean window means 0.4, 0.4 and 0.1 all predict class 0. A white 1x1
    // patch in the window corner lifts them to 0.55, 0.55 and 0.325, so two of
    // the three move to target class 1.
    std::vector<double> v(3 * 16);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i < 32 ? 0.4 : 0.1;
    const Tensor x({3, 1, 4, 4}, v);
    const PatchSpec p = make_patch(1, 1, 1, 4, 0, 0, 1.0);
    CHECK(predict(window_model(), x) == std::vector<int>{0, 0, 0});
    CHECK(predict(window_model(), apply_patch(x, p)) == std::vector<int>{1, 1, 0});
    CHECK(attack_success_rate(window_model(), x, {0, 0, 0}, p, true) == doctest::Approx(2.0 / 3.0));
    CHECK(attack_success_rate(window_model(), x, {0, 0, 0}, p, false) == doctest::Approx(2.0 / 3.0));
    // a clean-misclassified input leaves the denominator
    CHECK(attack_success_rate(window_model(), x, {0, 1, 0}, p, true) == doctest::Approx(0.5));
    CHECK(target_rate(window_model(), x, 1) == 0.0);
    CHECK(target_rate(window_model(), x, 1, &p) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("patch container round-trips byte for byte") {
    std::mt19937_64 rng(9);
    PatchSpec p = make_patch(3, 5, 4, 32, 20, 7);
    p.id = "s5_r20_c7_b4";
    p.pixels = random_tensor(rng, {3, 5, 4}, 0.0, 1.0);
    p.source_bits = 4;
    p.family = Family::universal;
    p.target_class = 3;
    const std::string bytes = encode_patch(p);
    CHECK(bytes.rfind("TQPATCH1", 0) == 0);
    const auto q = decode_patch(bytes, "mem");
    CHECK(q == p);
    CHECK(encode_patch(q) == bytes);

    PatchSpec untargeted = p;
    untargeted.target_class.reset();
    CHECK(decode_patch(encode_patch(untargeted), "mem") == untargeted);

    CHECK_THROWS_AS(decode_patch("TQPATCH0" + bytes.substr(8), "mem"), DataError);
    CHECK_THROWS_AS(decode_patch(bytes.substr(0, bytes.size() - 3), "mem"), DataError);
}

TEST_CASE("pool directory round-trip and manifest keys") {
    const auto dir = std::filesystem::temp_directory_path() / "triqdef_test_pool";
    std::filesystem::remove_all(dir);
    std::mt19937_64 rng(10);
    std::vector<PatchSpec> pool;
    for (std::size_t i = 0; i < 3; ++i) {
        PatchSpec p = make_patch(3, 2 + i, 2 + i, 16, i, 2 * i);
        p.id = "p" + std::to_string(i);
        p.pixels = random_tensor(rng, {3, 2 + i, 2 + i}, 0.0, 1.0);
        p.source_bits = i == 2 ? 5 : 32;
        pool.push_back(p);
    }
    save_pool(dir.string(), pool);
    CHECK(load_pool(dir.string()) == pool);
    const auto keys = load_manifest_keys(dir.string());
    REQUIRE(keys.size() == 3);
    CHECK(keys[2] == key_of(pool[2]));
    CHECK(is_seen(pool[1], keys));
    PatchSpec moved = pool[1];
    moved.col += 1;
    CHECK_FALSE(is_seen(moved, keys));
    PatchSpec other_source = pool[1];
    other_source.source_bits = 2;
    CHECK_FALSE(is_seen(other_source, keys));
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(load_pool(dir.string()), DataError);
}

TEST_CASE("family names parse") {
    CHECK(parse_family("lavan") == Family::per_image_targeted);
    CHECK(parse_family("gap") == Family::universal);
    CHECK(parse_family(to_string(Family::universal)) == Family::universal);
    CHECK_THROWS_AS(parse_family("patchattack"), InvalidArgument);
}
