#include "triqdef/perceptual.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "triqdef/error.hpp"
#include "triqdef/ops.hpp"

namespace triqdef::perceptual {

using ad::Var;

namespace {

constexpr double kSobelEps = 1e-12;
constexpr double kHogMagEps = 1e-12;
constexpr double kBlockEps = 1e-6;
constexpr double kCosEps = 1e-12;
// Keeps sqrt differentiable at an exactly zero vector without changing any
// representable nonzero norm.
constexpr double kNormFloor = 1e-300;

struct Batched {
    Var x;            // [N,1,H,W]
    bool single;      // input was [H,W]
};

Batched as_batch(const Var& a, const char* who) {
    const Shape& s = a.shape();
    if (s.size() == 2) return {ad::reshape(a, {1, 1, s[0], s[1]}), true};
    if (s.size() == 4 && s[1] == 1) return {a, false};
    throw ShapeError(std::string(who) + ": expected [H,W] or [N,1,H,W], got " + shape_str(s));
}

Var unbatch(const Var& v, bool single, const Shape& original) {
    return single ? ad::reshape(v, original) : v;
}

// Shape [N,1,...,1] broadcastable against a batch of the given rank.
Shape per_sample_shape(std::size_t n, std::size_t rank) {
    Shape s(rank, 1);
    s[0] = n;
    return s;
}

Var per_sample_sum(const Var& a) {
    const std::size_t n = a.shape()[0];
    return ad::reshape(ad::sum_to(a, per_sample_shape(n, a.shape().size())), {n});
}

// Central differences [-1, 0, 1] with replicate padding.
void central_gradients(const Var& x, Var& gx, Var& gy) {
    const std::size_t h = x.shape()[2], w = x.shape()[3];
    const Var p = ad::pad_replicate(x, 1);
    const Var rows = ad::slice(p, 2, 1, h);
    const Var cols = ad::slice(p, 3, 1, w);
    gx = ad::sub(ad::slice(rows, 3, 2, w), ad::slice(rows, 3, 0, w));
    gy = ad::sub(ad::slice(cols, 2, 2, h), ad::slice(cols, 2, 0, h));
}

Var center_crop(const Var& x, std::size_t cell) {
    const std::size_t h = x.shape()[2], w = x.shape()[3];
    const std::size_t hc = h / cell * cell, wc = w / cell * cell;
    return ad::slice(ad::slice(x, 2, (h - hc) / 2, hc), 3, (w - wc) / 2, wc);
}

void check_hog_extent(const Shape& s, const HogParams& p) {
    const std::size_t need = p.cell * p.block;
    if (s[2] < need || s[3] < need) {
        throw InvalidArgument("soft_hog: map " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                              " is smaller than one block (" + std::to_string(need) + " pixels)");
    }
}

// Cell histograms -> block-normalized descriptor [N,D].
Var blocks_descriptor(const Var& cells, const HogParams& p) {
    const std::size_t n = cells.shape()[0], hc = cells.shape()[2], wc = cells.shape()[3];
    const std::size_t hb = hc - p.block + 1, wb = wc - p.block + 1;
    const Var energy = ad::sum_to(ad::square(cells), {n, 1, hc, wc});
    const Var box = ad::conv2d(energy, ad::constant(Tensor::full({1, 1, p.block, p.block}, 1.0)));
    const Var norm = ad::sqrt(ad::add_scalar(box, kBlockEps * kBlockEps));
    std::vector<Var> parts;
    for (std::size_t di = 0; di < p.block; ++di)
        for (std::size_t dj = 0; dj < p.block; ++dj)
            parts.push_back(ad::div(ad::slice(ad::slice(cells, 2, di, hb), 3, dj, wb), norm));
    const Var desc = ad::concat(parts, 1);
    return ad::reshape(desc, {n, desc.size() / n});
}

// Shared HOG pipeline; `bin_weights` maps (gx, gy) to one weight map per bin.
template <typename Weights, typename Magnitude>
Var hog_pipeline(const Var& x4, const HogParams& p, Magnitude&& magnitude, Weights&& bin_weights) {
    validate(p);
    check_hog_extent(x4.shape(), p);
    const Var x = center_crop(x4, p.cell);
    Var gx, gy;
    central_gradients(x, gx, gy);
    const Var mag = magnitude(gx, gy);
    const std::vector<Var> weights = bin_weights(gx, gy);
    std::vector<Var> hist;
    hist.reserve(weights.size());
    for (const auto& w : weights) hist.push_back(ad::mul(w, mag));
    return blocks_descriptor(ad::sum_pool2d(ad::concat(hist, 1), p.cell), p);
}

double bin_width(const HogParams& p) { return std::numbers::pi / static_cast<double>(p.bins); }

// Unsigned orientation in [0, pi).
double unsigned_angle(double gy, double gx) {
    double t = std::atan2(gy, gx);
    if (t < 0) t += std::numbers::pi;
    if (t >= std::numbers::pi) t -= std::numbers::pi;
    return t;
}

} // namespace

void validate(const SoftBinarizeParams& p) {
    if (!(p.q > 0.0 && p.q < 100.0)) throw InvalidArgument("soft_binarize: percentile must lie in (0, 100)");
    if (!(p.k > 0.0)) throw InvalidArgument("soft_binarize: sharpness must be positive");
}

void validate(const HogParams& p) {
    if (p.cell == 0 || p.block == 0) throw InvalidArgument("hog: cell and block sizes must be positive");
    if (p.bins < 2) throw InvalidArgument("hog: need at least 2 orientation bins");
    if (!(p.softness > 0.0)) throw InvalidArgument("hog: softness must be positive");
}

double percentile(std::span<const double> values, double q) {
    if (values.empty()) throw InvalidArgument("percentile: empty input");
    if (!(q >= 0.0 && q <= 100.0)) throw InvalidArgument("percentile: q outside [0, 100]");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] + frac * (v[hi] - v[lo]);
}

Var sobel_magnitude(const Var& a) {
    const auto [x, single] = as_batch(a, "sobel_magnitude");
    if (x.shape()[2] < 3 || x.shape()[3] < 3) {
        throw InvalidArgument("sobel_magnitude: spatial extent must be at least 3x3, got " + shape_str(a.shape()));
    }
    static const Tensor kernels({2, 1, 3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1,     // d/dx
                                               -1, -2, -1, 0, 0, 0, 1, 2, 1});  // d/dy
    const Var g = ad::conv2d(ad::pad_replicate(x, 1), ad::constant(kernels));
    const Var gx = ad::slice(g, 1, 0, 1);
    const Var gy = ad::slice(g, 1, 1, 1);
    const Var mag = ad::sqrt(ad::add_scalar(ad::add(ad::square(gx), ad::square(gy)), kSobelEps));
    return unbatch(mag, single, a.shape());
}

Tensor sobel_magnitude(const Tensor& a) {
    ad::NoGradGuard ng;
    return sobel_magnitude(ad::constant(a)).value();
}

namespace {
thread_local ThresholdRecorder* t_recorder = nullptr;

double threshold(std::span<const double> values, double q) {
    const double tau = percentile(values, q);
    return t_recorder ? t_recorder->resolve(tau) : tau;
}
} // namespace

ThresholdRecorder::ThresholdRecorder() : previous_(t_recorder) { t_recorder = this; }
ThresholdRecorder::~ThresholdRecorder() { t_recorder = previous_; }
ThresholdRecorder* ThresholdRecorder::active() { return t_recorder; }

double ThresholdRecorder::resolve(double computed) {
    if (!replaying_) {
        values_.push_back(computed);
        return computed;
    }
    if (next_ >= values_.size()) throw InvalidArgument("ThresholdRecorder: more thresholds than recorded");
    return values_[next_++];
}

Var binarize_at(const Var& a, double tau, double k) { return ad::sigmoid(ad::mul_scalar(ad::add_scalar(a, -tau), k)); }

Var soft_binarize(const Var& a, const SoftBinarizeParams& p) {
    validate(p);
    return binarize_at(a, threshold(a.value().values(), p.q), p.k);
}

Var soft_binarize_per_sample(const Var& a, const SoftBinarizeParams& p) {
    validate(p);
    const std::size_t n = a.shape().at(0);
    const std::size_t per = a.size() / n;
    std::vector<double> tau(n);
    const auto vals = a.value().values();
    for (std::size_t i = 0; i < n; ++i) tau[i] = threshold(vals.subspan(i * per, per), p.q);
    const Var t = ad::constant(Tensor(per_sample_shape(n, a.shape().size()), std::move(tau)));
    return ad::sigmoid(ad::mul_scalar(ad::sub(a, t), p.k));
}

Var soft_dice(const Var& a, const Var& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("soft_dice: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    }
    const Var num = ad::mul_scalar(ad::sum(ad::mul(a, b)), 2.0);
    return ad::div(num, ad::add_scalar(ad::add(ad::sum(a), ad::sum(b)), kDiceEps));
}

Var soft_dice_per_sample(const Var& a, const Var& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("soft_dice: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    }
    const Var num = ad::mul_scalar(per_sample_sum(ad::mul(a, b)), 2.0);
    return ad::div(num, ad::add_scalar(ad::add(per_sample_sum(a), per_sample_sum(b)), kDiceEps));
}

Var soft_hog(const Var& a, const HogParams& p) {
    const auto [x, single] = as_batch(a, "soft_hog");
    const double width = bin_width(p);
    const double sigma = p.softness * width;
    const double inv_two_var = 1.0 / (2.0 * sigma * sigma);
    const std::size_t bins = p.bins;
    auto magnitude = [](const Var& gx, const Var& gy) {
        const Var r2 = ad::add(ad::square(gx), ad::square(gy));
        return ad::add_scalar(ad::sqrt(ad::add_scalar(r2, kHogMagEps)), -std::sqrt(kHogMagEps));
    };
    auto weights = [&](const Var& gx, const Var& gy) {
        const Var theta = ad::atan2(gy, gx);
        std::vector<Var> logits;
        for (std::size_t b = 0; b < bins; ++b) {
            const double centre = (static_cast<double>(b) + 0.5) * width;
            const Var d = ad::wrap_periodic(ad::add_scalar(theta, -centre), std::numbers::pi);
            logits.push_back(ad::mul_scalar(ad::square(d), -inv_two_var));
        }
        // Normalization is shift invariant, so a constant per-pixel max keeps
        // exp() in range without changing values or gradients.
        std::vector<double> mx(logits[0].size(), -std::numeric_limits<double>::infinity());
        for (const auto& l : logits) {
            const double* v = l.value().data();
            for (std::size_t i = 0; i < mx.size(); ++i) mx[i] = std::max(mx[i], v[i]);
        }
        const Var shift = ad::constant(Tensor(logits[0].shape(), std::move(mx)));
        std::vector<Var> e;
        for (const auto& l : logits) e.push_back(ad::exp(ad::sub(l, shift)));
        Var z = e[0];
        for (std::size_t b = 1; b < bins; ++b) z = ad::add(z, e[b]);
        std::vector<Var> w;
        for (const auto& eb : e) w.push_back(ad::div(eb, z));
        return w;
    };
    Var desc = hog_pipeline(x, p, magnitude, weights);
    if (single) desc = ad::reshape(desc, {desc.size()});
    return desc;
}

Tensor hard_hog(const Tensor& a, const HogParams& p) {
    ad::NoGradGuard ng;
    const auto [x, single] = as_batch(ad::constant(a), "hard_hog");
    const double width = bin_width(p);
    auto magnitude = [](const Var& gx, const Var& gy) { return ad::sqrt(ad::add(ad::square(gx), ad::square(gy))); };
    auto weights = [&](const Var& gx, const Var& gy) {
        const std::size_t n = gx.size();
        std::vector<std::vector<double>> w(p.bins, std::vector<double>(n, 0.0));
        const double* px = gx.value().data();
        const double* py = gy.value().data();
        for (std::size_t i = 0; i < n; ++i) {
            const double t = unsigned_angle(py[i], px[i]);
            if (p.hard_binning == HardBinning::nearest) {
                w[std::min(p.bins - 1, static_cast<std::size_t>(t / width))][i] = 1.0;
            } else {
                const double pos = t / width - 0.5;
                const double f = std::floor(pos);
                const double frac = pos - f;
                const long b0 = static_cast<long>(f);
                const long nb = static_cast<long>(p.bins);
                w[static_cast<std::size_t>((b0 % nb + nb) % nb)][i] += 1.0 - frac;
                w[static_cast<std::size_t>(((b0 + 1) % nb + nb) % nb)][i] += frac;
            }
        }
        std::vector<Var> out;
        for (auto& wb : w) out.push_back(ad::constant(Tensor(gx.shape(), std::move(wb))));
        return out;
    };
    Tensor desc = hog_pipeline(x, p, magnitude, weights).value();
    if (single) desc = desc.reshaped({desc.size()});
    return desc;
}

std::size_t hog_length(std::size_t h, std::size_t w, const HogParams& p) {
    const std::size_t hb = h / p.cell - p.block + 1, wb = w / p.cell - p.block + 1;
    return hb * wb * p.block * p.block * p.bins;
}

Var cosine_similarity(const Var& u, const Var& v) {
    if (u.size() != v.size()) {
        throw ShapeError("cosine_similarity: lengths " + std::to_string(u.size()) + " and " +
                         std::to_string(v.size()) + " differ");
    }
    const Var vv = u.shape() == v.shape() ? v : ad::reshape(v, u.shape());
    const Var dot = ad::sum(ad::mul(u, vv));
    const Var nu = ad::sqrt(ad::add_scalar(ad::sum(ad::square(u)), kNormFloor));
    const Var nv = ad::sqrt(ad::add_scalar(ad::sum(ad::square(vv)), kNormFloor));
    return ad::div(dot, ad::add_scalar(ad::mul(nu, nv), kCosEps));
}

Var cosine_similarity_rows(const Var& u, const Var& v) {
    if (u.shape() != v.shape() || u.shape().size() != 2) {
        throw ShapeError("cosine_similarity_rows: shapes " + shape_str(u.shape()) + " and " +
                         shape_str(v.shape()) + " must be equal [N,D]");
    }
    const Var dot = per_sample_sum(ad::mul(u, v));
    const Var nu = ad::sqrt(ad::add_scalar(per_sample_sum(ad::square(u)), kNormFloor));
    const Var nv = ad::sqrt(ad::add_scalar(per_sample_sum(ad::square(v)), kNormFloor));
    return ad::div(dot, ad::add_scalar(ad::mul(nu, nv), kCosEps));
}

double cosine_similarity(const Tensor& u, const Tensor& v) {
    if (u.size() != v.size()) {
        throw ShapeError("cosine_similarity: lengths " + std::to_string(u.size()) + " and " +
                         std::to_string(v.size()) + " differ");
    }
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    return dot / (std::sqrt(nu) * std::sqrt(nv) + kCosEps);
}

double hard_edge_iou(const Tensor& a, const Tensor& b, double q) {
    if (a.shape() != b.shape()) {
        throw ShapeError("hard_edge_iou: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    }
    const Tensor ea = sobel_magnitude(a);
    const Tensor eb = sobel_magnitude(b);
    const double ta = percentile(ea.values(), q);
    const double tb = percentile(eb.values(), q);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < ea.size(); ++i) {
        const bool ma = ea[i] > ta, mb = eb[i] > tb;
        inter += (ma && mb) ? 1 : 0;
        uni += (ma || mb) ? 1 : 0;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double hard_hog_cosine(const Tensor& a, const Tensor& b, const HogParams& p) {
    if (a.shape() != b.shape()) {
        throw ShapeError("hard_hog_cosine: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
    }
    return cosine_similarity(hard_hog(a, p), hard_hog(b, p));
}

Var channel_mean(const Var& x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("channel_mean: expected [N,C,H,W], got " + shape_str(s));
    if (s[1] == 1) return x;
    return ad::mul_scalar(ad::sum_to(x, {s[0], 1, s[2], s[3]}), 1.0 / static_cast<double>(s[1]));
}

Tensor channel_mean(const Tensor& x) {
    ad::NoGradGuard ng;
    return channel_mean(ad::constant(x)).value();
}

} // namespace triqdef::perceptual
