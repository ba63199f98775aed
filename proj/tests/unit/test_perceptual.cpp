#include <cmath>
#include <numbers>

#include "doctest.h"
#include "support/op_catalog.hpp"
#include "triqdef/error.hpp"
#include "triqdef/perceptual.hpp"

using namespace triqdef;
using namespace triqdef::perceptual;
using ad::Var;
using testsupport::random_tensor;

namespace {

Tensor image(std::size_t h, std::size_t w, const std::function<double(std::size_t, std::size_t)>& f) {
    std::vector<double> v(h * w);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) v[i * w + j] = f(i, j);
    return Tensor({h, w}, std::move(v));
}

Tensor transposed(const Tensor& a) {
    return image(a.dim(1), a.dim(0), [&](std::size_t i, std::size_t j) { return a[j * a.dim(1) + i]; });
}

// Counter-clockwise quarter turn of a square image.
Tensor rotated90(const Tensor& a) {
    const std::size_t n = a.dim(0);
    return image(n, n, [&](std::size_t i, std::size_t j) { return a[j * n + (n - 1 - i)]; });
}

Tensor grating(std::size_t n, double angle) {
    return image(n, n, [&](std::size_t i, std::size_t j) {
        return std::sin(0.9 * (std::cos(angle) * static_cast<double>(j) + std::sin(angle) * static_cast<double>(i)));
    });
}

// Straightforward 3x3 Sobel with clamped indices.
Tensor sobel_oracle(const Tensor& a) {
    const long h = static_cast<long>(a.dim(0)), w = static_cast<long>(a.dim(1));
    auto at = [&](long i, long j) {
        i = std::clamp(i, 0L, h - 1);
        j = std::clamp(j, 0L, w - 1);
        return a[static_cast<std::size_t>(i * w + j)];
    };
    return image(a.dim(0), a.dim(1), [&](std::size_t ui, std::size_t uj) {
        const long i = static_cast<long>(ui), j = static_cast<long>(uj);
        const double gx = (at(i - 1, j + 1) + 2 * at(i, j + 1) + at(i + 1, j + 1)) -
                          (at(i - 1, j - 1) + 2 * at(i, j - 1) + at(i + 1, j - 1));
        const double gy = (at(i + 1, j - 1) + 2 * at(i + 1, j) + at(i + 1, j + 1)) -
                          (at(i - 1, j - 1) + 2 * at(i - 1, j) + at(i - 1, j + 1));
        return std::sqrt(gx * gx + gy * gy + 1e-12);
    });
}

// Per-bin orientation mass of a HOG descriptor in soft_hog's layout.
std::vector<double> bin_mass(const Tensor& desc, std::size_t bins, std::size_t positions) {
    std::vector<double> m(bins, 0.0);
    for (std::size_t i = 0; i < desc.size(); ++i) m[(i / positions) % bins] += desc[i];
    return m;
}

std::size_t argmax(const std::vector<double>& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

} // namespace

TEST_CASE("percentile uses linear interpolation") {
    const std::vector<double> v{4, 1, 3, 2};
    CHECK(percentile(v, 0) == 1.0);
    CHECK(percentile(v, 100) == 4.0);
    CHECK(percentile(v, 50) == 2.5);
    CHECK(percentile(v, 85) == doctest::Approx(1 + 0.85 * 3).epsilon(1e-15));
}

TEST_CASE("sobel examples") {
    const Tensor c = Tensor::full({5, 5}, 0.3);
    const Tensor ec = sobel_magnitude(c);
    for (double v : ec.values()) CHECK(v == doctest::Approx(1e-6).epsilon(1e-9));

    const Tensor step = image(5, 5, [](std::size_t, std::size_t j) { return j >= 3 ? 1.0 : 0.0; });
    const Tensor e = sobel_magnitude(step);
    const Tensor o = sobel_oracle(step);
    for (std::size_t i = 0; i < e.size(); ++i) CHECK(e[i] == doctest::Approx(o[i]).epsilon(1e-14));
    // the two columns either side of the step respond with 4, the rest ~0
    CHECK(e[2 * 5 + 2] == doctest::Approx(4.0));
    CHECK(e[2 * 5 + 3] == doctest::Approx(4.0));
    CHECK(e[2 * 5 + 0] < 1e-5);

    std::mt19937_64 rng(8);
    const Tensor a = random_tensor(rng, {6, 7});
    const Tensor et = sobel_magnitude(transposed(a));
    const Tensor te = transposed(sobel_magnitude(a));
    for (std::size_t i = 0; i < et.size(); ++i) CHECK(et[i] == doctest::Approx(te[i]).epsilon(1e-14));

    std::vector<double> shifted = a.to_vector();
    for (auto& v : shifted) v += 0.75;
    const Tensor es = sobel_magnitude(Tensor(a.shape(), shifted));
    const Tensor ea = sobel_magnitude(a);
    for (std::size_t i = 0; i < es.size(); ++i) CHECK(es[i] == doctest::Approx(ea[i]).epsilon(1e-12));

    CHECK_THROWS_AS(sobel_magnitude(Tensor::zeros({2, 5})), InvalidArgument);
}

TEST_CASE("soft binarize examples") {
    const Var c = ad::constant(Tensor::full({3, 3}, 2.0));
    const Tensor half = soft_binarize(c).value();
    for (double v : half.values()) CHECK(v == 0.5);

    std::vector<double> spike(20, 0.0);
    spike[19] = 10.0;
    const Tensor out = soft_binarize(ad::constant(Tensor({20}, spike))).value();
    const double tau = percentile(spike, 85);
    CHECK(tau == 0.0);
    CHECK(out[19] == doctest::Approx(1.0));
    CHECK(out[0] == 0.5);

    std::mt19937_64 rng(4);
    const Tensor a = random_tensor(rng, {200});
    const double t = percentile(a.values(), 85);
    const Tensor hard = soft_binarize(ad::constant(a), {85.0, 1e6}).value();
    const Tensor soft = soft_binarize(ad::constant(a), {85.0, 100.0}).value();
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(soft[i] > 0.0);
        CHECK(soft[i] < 1.0);
        if (std::fabs(a[i] - t) > 1e-4) CHECK(std::fabs(hard[i] - (a[i] > t ? 1.0 : 0.0)) < 1e-3);
    }
    CHECK_THROWS_AS(soft_binarize(c, {0.0, 1.0}), InvalidArgument);
}

TEST_CASE("soft dice examples") {
    auto dice = [](std::vector<double> a, std::vector<double> b) {
        const Shape s{a.size()};
        return soft_dice(ad::constant(Tensor(s, a)), ad::constant(Tensor(s, b))).value().item();
    };
    CHECK(dice({1, 1, 1, 1}, {1, 1, 1, 1}) == doctest::Approx(8.0 / (8.0 + 1e-6)).epsilon(1e-15));
    CHECK(dice({1, 1, 1, 1}, {0, 0, 0, 0}) == 0.0);
    CHECK(dice({1, 0, 1, 0}, {1, 1, 0, 0}) == doctest::Approx(2.0 / (4.0 + 1e-6)).epsilon(1e-15));
    CHECK_THROWS_AS(soft_dice(ad::constant(Tensor::zeros({2})), ad::constant(Tensor::zeros({3}))), ShapeError);

    std::mt19937_64 rng(2);
    for (int rep = 0; rep < 10; ++rep) {
        const Var a = ad::constant(random_tensor(rng, {4, 4}, 0.0, 1.0));
        const Var b = ad::constant(random_tensor(rng, {4, 4}, 0.0, 1.0));
        const double ab = soft_dice(a, b).value().item();
        CHECK(ab == soft_dice(b, a).value().item());
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
    }
}

TEST_CASE("soft hog examples") {
    std::mt19937_64 rng(6);
    const Var a = ad::constant(random_tensor(rng, {16, 16}));
    const Var ha = soft_hog(a);
    CHECK(ha.size() == hog_length(16, 16));
    CHECK(cosine_similarity(ha, ha).value().item() == doctest::Approx(1.0).epsilon(1e-12));

    const Tensor flat = soft_hog(ad::constant(Tensor::full({8, 8}, 0.4))).value();
    for (double v : flat.values()) CHECK(v == 0.0);

    // block sub-vectors are normalized
    const Tensor d = ha.value();
    const std::size_t positions = 3 * 3, per_block = 4 * 9;
    for (std::size_t p = 0; p < positions; ++p) {
        double n2 = 0.0;
        for (std::size_t k = 0; k < per_block; ++k) n2 += d[k * positions + p] * d[k * positions + p];
        CHECK(std::sqrt(n2) <= 1.0 + 1e-9);
    }
    for (double v : d.values()) CHECK(v >= 0.0);

    CHECK_THROWS_AS(soft_hog(ad::constant(Tensor::zeros({7, 12}))), InvalidArgument);
}

TEST_CASE("quarter turn of a grating shifts the dominant bin by half the bins") {
    const double angle = 10.0 * std::numbers::pi / 180.0;   // centre of bin 0
    const Tensor g = grating(16, angle);
    const Tensor r = rotated90(g);
    const std::size_t positions = 9;
    HogParams hp;
    for (bool soft : {false, true}) {
        CAPTURE(soft);
        const Tensor dg = soft ? soft_hog(ad::constant(g), hp).value() : hard_hog(g, hp);
        const Tensor dr = soft ? soft_hog(ad::constant(r), hp).value() : hard_hog(r, hp);
        const std::size_t bg = argmax(bin_mass(dg, 9, positions));
        const std::size_t br = argmax(bin_mass(dr, 9, positions));
        const std::size_t shift = (br + 9 - bg) % 9;
        CHECK((shift == 4 || shift == 5));
    }
}

TEST_CASE("soft hog approaches hard hog as softness shrinks") {
    std::mt19937_64 rng(10);
    HogParams hp;
    hp.softness = 0.05;
    hp.hard_binning = HardBinning::nearest;
    for (int rep = 0; rep < 5; ++rep) {
        const Tensor a = random_tensor(rng, {32, 32}, 0.0, 1.0);
        const double c = cosine_similarity(soft_hog(ad::constant(a), hp).value(), hard_hog(a, hp));
        CHECK(c > 0.999);
    }
}

TEST_CASE("hard hog matches a direct loop implementation") {
    std::mt19937_64 rng(12);
    const Tensor a = random_tensor(rng, {10, 13});
    for (auto binning : {HardBinning::nearest, HardBinning::linear}) {
        HogParams hp;
        hp.hard_binning = binning;
        // oracle: crop to 8x12 (rows 1..8, cols 0..11), central differences, bins, blocks
        const std::size_t H = 8, W = 12, r0 = 1, c0 = 0, bins = 9, hc = 2, wc = 3;
        auto px = [&](long i, long j) {
            i = std::clamp(i, 0L, static_cast<long>(H) - 1);
            j = std::clamp(j, 0L, static_cast<long>(W) - 1);
            return a[(r0 + static_cast<std::size_t>(i)) * 13 + c0 + static_cast<std::size_t>(j)];
        };
        std::vector<double> cells(bins * hc * wc, 0.0);
        const double width = std::numbers::pi / 9;
        for (long i = 0; i < static_cast<long>(H); ++i)
            for (long j = 0; j < static_cast<long>(W); ++j) {
                const double gx = px(i, j + 1) - px(i, j - 1), gy = px(i + 1, j) - px(i - 1, j);
                const double m = std::hypot(gx, gy);
                double t = std::atan2(gy, gx);
                if (t < 0) t += std::numbers::pi;
                if (t >= std::numbers::pi) t -= std::numbers::pi;
                const std::size_t cell = static_cast<std::size_t>(i / 4) * wc + static_cast<std::size_t>(j / 4);
                if (binning == HardBinning::nearest) {
                    cells[std::min<std::size_t>(8, static_cast<std::size_t>(t / width)) * hc * wc + cell] += m;
                } else {
                    const double pos = t / width - 0.5;
                    const long b = static_cast<long>(std::floor(pos));
                    const double f = pos - std::floor(pos);
                    cells[static_cast<std::size_t>((b + 9) % 9) * hc * wc + cell] += m * (1 - f);
                    cells[static_cast<std::size_t>((b + 10) % 9) * hc * wc + cell] += m * f;
                }
            }
        const std::size_t hb = 1, wb = 2;
        std::vector<double> expect(hb * wb * 4 * bins);
        for (std::size_t bi = 0; bi < hb; ++bi)
            for (std::size_t bj = 0; bj < wb; ++bj) {
                double n2 = 0.0;
                for (std::size_t di = 0; di < 2; ++di)
                    for (std::size_t dj = 0; dj < 2; ++dj)
                        for (std::size_t b = 0; b < bins; ++b) {
                            const double v = cells[b * hc * wc + (bi + di) * wc + bj + dj];
                            n2 += v * v;
                        }
                const double nrm = std::sqrt(n2 + 1e-12);
                for (std::size_t di = 0; di < 2; ++di)
                    for (std::size_t dj = 0; dj < 2; ++dj)
                        for (std::size_t b = 0; b < bins; ++b) {
                            const std::size_t ch = (di * 2 + dj) * bins + b;
                            expect[ch * hb * wb + bi * wb + bj] = cells[b * hc * wc + (bi + di) * wc + bj + dj] / nrm;
                        }
            }
        const Tensor got = hard_hog(a, hp);
        REQUIRE(got.size() == expect.size());
        for (std::size_t i = 0; i < expect.size(); ++i) CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    }
}

TEST_CASE("cosine similarity examples") {
    auto cs = [](std::vector<double> u, std::vector<double> v) {
        return cosine_similarity(Tensor({u.size()}, u), Tensor({v.size()}, v));
    };
    CHECK(cs({1, 0}, {0, 1}) == 0.0);
    CHECK(cs({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cs({1, 2, 3}, {-1, -2, -3}) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(cs({0, 0}, {1, 2}) == 0.0);
    CHECK_THROWS_AS(cs({1, 2}, {1, 2, 3}), ShapeError);
    const Var z = ad::leaf(Tensor::zeros({3}));
    const auto g = ad::grad(cosine_similarity(z, ad::constant(Tensor({3}, {1, 2, 3}))), {z})[0].value();
    CHECK(g.all_finite());
}

TEST_CASE("hard edge IoU examples") {
    std::mt19937_64 rng(14);
    const Tensor a = random_tensor(rng, {8, 8});
    CHECK(hard_edge_iou(a, a) == 1.0);
    CHECK(hard_edge_iou(Tensor::full({6, 6}, 1.0), Tensor::full({6, 6}, 2.0)) == 1.0);

    // Step edges cover 2 of 16 lines (12.5% of pixels), so the 85th percentile
    // falls on the flat background and exactly the edge pixels survive.
    const Tensor v = image(16, 16, [](std::size_t, std::size_t j) { return j >= 2 ? 1.0 : 0.0; });
    const Tensor h = image(16, 16, [](std::size_t i, std::size_t) { return i >= 14 ? 1.0 : 0.0; });
    // masks: v -> columns 1,2 ; h -> rows 13,14 ; they cross in 4 pixels
    CHECK(hard_edge_iou(v, h) == doctest::Approx(4.0 / (32 + 32 - 4)).epsilon(1e-12));

    const Tensor right = image(16, 16, [](std::size_t, std::size_t j) { return j >= 9 ? 1.0 : 0.0; });
    CHECK(hard_edge_iou(v, right) == 0.0);

    // offset by one column: masks {1,2} and {2,3} share one column
    const Tensor s1 = v;
    const Tensor s2 = image(16, 16, [](std::size_t, std::size_t j) { return j >= 3 ? 1.0 : 0.0; });
    CHECK(hard_edge_iou(s1, s2) == doctest::Approx(16.0 / 48.0).epsilon(1e-12));
    CHECK_THROWS_AS(hard_edge_iou(s1, Tensor::zeros({8, 9})), ShapeError);
}

TEST_CASE("hard hog cosine examples") {
    const Tensor g = grating(16, 10.0 * std::numbers::pi / 180.0);
    CHECK(hard_hog_cosine(g, g) == doctest::Approx(1.0).epsilon(1e-12));
    const Tensor o = grating(16, 100.0 * std::numbers::pi / 180.0);
    CHECK(hard_hog_cosine(g, o) < 0.1);
}

TEST_CASE("perceptual metrics match central differences") {
    std::mt19937_64 rng(31);
    for (const auto& probe : testsupport::quant_perceptual_probes()) {
        CAPTURE(probe.name);
        for (int rep = 0; rep < 4; ++rep) {
            std::vector<Tensor> at;
            for (const auto& s : probe.shapes) at.push_back(random_tensor(rng, s, probe.lo, probe.hi));
            CHECK(testsupport::grad_check(probe.fn, at) < 1e-4);
        }
    }
}
