#include "triqdef/quant.hpp"

#include <algorithm>
#include <cmath>

#include "triqdef/error.hpp"
#include "triqdef/ops.hpp"

namespace triqdef::quant {

QuantSpec QuantSpec::identity() { return QuantSpec{}; }

void validate_bits(int bits) {
    if (bits == kFullPrecision) return;
    if (bits < 2 || bits > 8) {
        throw InvalidArgument("quant: unsupported bit-width " + std::to_string(bits) + " (expected 2..8 or 32)");
    }
}

QuantSpec spec_from_max(double max_abs, int bits) {
    validate_bits(bits);
    if (bits == kFullPrecision) return QuantSpec::identity();
    if (!std::isfinite(max_abs) || max_abs < 0) throw NumericalError("quant: invalid tensor range");
    const double levels = std::ldexp(1.0, bits - 1) - 1.0;
    QuantSpec s;
    s.bits = bits;
    s.scale = max_abs == 0.0 ? 1.0 : max_abs / levels;
    s.clip_lo = -levels;
    s.clip_hi = levels;
    return s;
}

QuantSpec calibrate(const Tensor& x, int bits) {
    if (!x.defined() || x.size() == 0) throw InvalidArgument("calibrate: empty tensor");
    double m = 0.0;
    for (double v : x.values()) m = std::max(m, std::fabs(v));
    return spec_from_max(m, bits);
}

double quantize_value(double x, const QuantSpec& spec) {
    if (spec.is_identity()) return x;
    const double level = std::clamp(std::round(x / spec.scale), spec.clip_lo, spec.clip_hi);
    return spec.scale * level;
}

Tensor fake_quantize(const Tensor& x, const QuantSpec& spec) {
    if (spec.is_identity()) return x;
    std::vector<double> out(x.size());
    const double* p = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = quantize_value(p[i], spec);
    return Tensor(x.shape(), std::move(out));
}

namespace {

class FakeQuantOp final : public ad::Op {
public:
    explicit FakeQuantOp(QuantSpec s) : spec_(s) {}
    std::string_view name() const override { return "fake_quantize"; }
    Tensor forward(std::span<const Tensor> in) const override { return fake_quantize(in[0], spec_); }
    std::vector<ad::Var> backward(const ad::Var&, const ad::Var& g, std::span<const ad::Var> in,
                                  const std::vector<bool>&) const override {
        const Tensor& x = in[0].value();
        std::vector<double> mask(x.size());
        const double* p = x.data();
        for (std::size_t i = 0; i < mask.size(); ++i) {
            const double r = p[i] / spec_.scale;
            mask[i] = (r >= spec_.clip_lo && r <= spec_.clip_hi) ? 1.0 : 0.0;
        }
        return {ad::mul(g, ad::constant(Tensor(x.shape(), std::move(mask))))};
    }

private:
    QuantSpec spec_;
};

} // namespace

ad::Var fake_quantize(const ad::Var& x, const QuantSpec& spec) {
    if (spec.is_identity()) return x;
    return ad::apply(std::make_shared<FakeQuantOp>(spec), {x});
}

void ActivationObserver::observe(const std::string& site, const Tensor& activation) {
    double m = 0.0;
    for (double v : activation.values()) m = std::max(m, std::fabs(v));
    auto [it, inserted] = max_abs_.emplace(site, m);
    if (!inserted) it->second = std::max(it->second, m);
}

void ActivationObserver::merge(const ActivationObserver& other) {
    for (const auto& [site, m] : other.max_abs_) {
        auto [it, inserted] = max_abs_.emplace(site, m);
        if (!inserted) it->second = std::max(it->second, m);
    }
}

void recalibrate_weights(ModelQuant& q, const std::vector<WeightEntry>& weights) {
    for (const auto& w : weights) {
        if (w.quantize) q.weights[w.name] = calibrate(w.value, q.bits);
    }
}

ModelQuant quantize_model(const std::vector<WeightEntry>& weights, const std::vector<std::string>& activation_sites,
                          const ActivationObserver& activations, int bits, bool recalibrate,
                          const ModelQuant* previous) {
    validate_bits(bits);
    if (weights.empty()) throw InvalidArgument("quantize_model: model has no weights");
    if (previous && !recalibrate) {
        if (previous->bits != bits) throw InvalidArgument("quantize_model: previous specs are for another bit-width");
        return *previous;
    }
    ModelQuant q;
    q.bits = bits;
    recalibrate_weights(q, weights);
    for (const auto& site : activation_sites) {
        if (bits == kFullPrecision) {
            q.activations[site] = QuantSpec::identity();
            continue;
        }
        auto it = activations.max_abs().find(site);
        if (it == activations.max_abs().end()) {
            throw InvalidArgument("quantize_model: calibration batch is empty (no statistics for activation site '" +
                                  site + "')");
        }
        q.activations[site] = spec_from_max(it->second, bits);
    }
    return q;
}

} // namespace triqdef::quant
