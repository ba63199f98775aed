#pragma once

// Symmetric per-tensor fake quantization with a clipped straight-through
// estimator.

#include <map>
#include <string>
#include <vector>

#include "triqdef/autograd.hpp"

namespace triqdef::quant {

/// Bit-width sentinel meaning "not quantized".
inline constexpr int kFullPrecision = 32;

struct QuantSpec {
    int bits = kFullPrecision;
    double scale = 1.0;
    double zero_point = 0.0;   // always 0 in symmetric mode
    double clip_lo = 0.0;      // integer level bounds, -(2^(b-1)-1) and 2^(b-1)-1
    double clip_hi = 0.0;

    bool is_identity() const { return bits == kFullPrecision; }
    static QuantSpec identity();
    bool operator==(const QuantSpec&) const = default;
};

/// Throws InvalidArgument unless bits is in 2..8 or 32.
void validate_bits(int bits);

/// Spec for a tensor whose largest magnitude is max_abs (scale 1 when 0).
QuantSpec spec_from_max(double max_abs, int bits);
QuantSpec calibrate(const Tensor& x, int bits);

/// scale * clamp(round(x / scale), lo, hi), rounding half away from zero.
double quantize_value(double x, const QuantSpec& spec);
Tensor fake_quantize(const Tensor& x, const QuantSpec& spec);
/// Differentiable version. Gradient is passed unchanged where x/scale lies in
/// [clip_lo, clip_hi] and is zero elsewhere. For bits == 32 returns x itself.
ad::Var fake_quantize(const ad::Var& x, const QuantSpec& spec);

/// One weight tensor of a model as seen by the quantizer.
struct WeightEntry {
    std::string name;
    Tensor value;
    bool quantize = true;   // biases are kept at full precision
};

/// Quantization parameters of one bit-width variant of a model.
struct ModelQuant {
    int bits = kFullPrecision;
    std::map<std::string, QuantSpec> weights;
    std::map<std::string, QuantSpec> activations;
    bool operator==(const ModelQuant&) const = default;
};

/// Running max |activation| per site, fed from calibration batches.
class ActivationObserver {
public:
    void observe(const std::string& site, const Tensor& activation);
    void merge(const ActivationObserver& other);
    const std::map<std::string, double>& max_abs() const { return max_abs_; }
    bool empty() const { return max_abs_.empty(); }
    void set(const std::string& site, double max_abs) { max_abs_[site] = max_abs; }

private:
    std::map<std::string, double> max_abs_;
};

/// Specs for every quantized weight and every activation site.
///
/// With recalibrate set (or no previous specs) weight scales come from the
/// current weight values and activation scales from `activations`. Without
/// it the previous specs are returned unchanged. Throws InvalidArgument when
/// activation specs are needed but the observer has no data for a site.
ModelQuant quantize_model(const std::vector<WeightEntry>& weights, const std::vector<std::string>& activation_sites,
                          const ActivationObserver& activations, int bits, bool recalibrate,
                          const ModelQuant* previous = nullptr);

/// Refresh only the weight specs of q from the current weights.
void recalibrate_weights(ModelQuant& q, const std::vector<WeightEntry>& weights);

} // namespace triqdef::quant
