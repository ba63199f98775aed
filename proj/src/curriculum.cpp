#include "triqdef/curriculum.hpp"

#include <algorithm>

#include "triqdef/error.hpp"
#include "triqdef/ops.hpp"

namespace triqdef {

namespace curriculum {

std::string to_string(Mode m) {
    switch (m) {
    case Mode::staircase: return "staircase";
    case Mode::linear: return "linear";
    case Mode::joint: return "joint";
    }
    return "staircase";
}

Mode parse_mode(const std::string& s) {
    if (s == "staircase") return Mode::staircase;
    if (s == "linear") return Mode::linear;
    if (s == "joint") return Mode::joint;
    throw InvalidArgument("unknown curriculum mode '" + s + "' (expected staircase, linear or joint)");
}

Schedule build_schedule(std::size_t total_epochs, const std::vector<int>& bits, Mode mode) {
    if (bits.empty()) throw InvalidArgument("build_schedule: no bit-widths");
    for (int b : bits) quant::validate_bits(b);
    for (std::size_t i = 1; i < bits.size(); ++i) {
        if (bits[i] >= bits[i - 1]) throw InvalidArgument("build_schedule: bit-widths must be strictly descending");
    }
    Schedule s;
    s.total_epochs = total_epochs;
    s.mode = mode;
    s.bits = bits;

    std::vector<std::vector<int>> groups;
    if (mode == Mode::joint || bits.size() == 1) {
        groups.push_back(bits);
    } else {
        groups.push_back({bits[0], bits[1]});
        for (std::size_t i = 2; i < bits.size(); ++i) groups.push_back({bits[i]});
    }
    const std::size_t n = groups.size();
    if (total_epochs < n) {
        throw InvalidArgument("build_schedule: " + std::to_string(total_epochs) + " epochs cannot hold " +
                              std::to_string(n) + " stages");
    }
    std::size_t start = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (mode == Mode::linear) start = k * total_epochs / n;
        s.stages.push_back({start, groups[k]});
        if (mode != Mode::linear) start += total_epochs / n + (k < total_epochs % n ? 1 : 0);
    }
    return s;
}

std::vector<int> active_bits(const Schedule& s, std::size_t epoch) {
    if (epoch >= s.total_epochs) {
        throw InvalidArgument("active_bits: epoch " + std::to_string(epoch) + " outside [0, " +
                              std::to_string(s.total_epochs) + ")");
    }
    std::vector<int> out;
    for (const auto& st : s.stages) {
        if (st.start_epoch <= epoch) out.insert(out.end(), st.bits_added.begin(), st.bits_added.end());
    }
    std::sort(out.begin(), out.end(), std::greater<>());
    return out;
}

} // namespace curriculum

std::string to_string(EnsembleMode m) { return m == EnsembleMode::shared ? "shared" : "independent"; }

EnsembleMode parse_ensemble_mode(const std::string& s) {
    if (s == "shared") return EnsembleMode::shared;
    if (s == "independent") return EnsembleMode::independent;
    throw InvalidArgument("unknown ensemble mode '" + s + "' (expected shared or independent)");
}

bool EnsembleState::is_active(int bits) const { return std::find(active.begin(), active.end(), bits) != active.end(); }

const models::Weights& EnsembleState::weights_for(int bits) const {
    if (mode == EnsembleMode::shared) return master;
    auto it = copies.find(bits);
    if (it == copies.end()) throw InvalidArgument("ensemble: no weights for " + std::to_string(bits) + "-bit variant");
    return it->second;
}

models::Weights& EnsembleState::weights_for(int bits) {
    return const_cast<models::Weights&>(static_cast<const EnsembleState&>(*this).weights_for(bits));
}

quant::ActivationObserver observe_activations(const EnsembleState& state, int bits, const Tensor& batch) {
    quant::ActivationObserver obs;
    ad::NoGradGuard ng;
    models::ForwardOptions opt;
    opt.quantize_activations = false;
    opt.observer = &obs;
    models::forward_with_taps(state.variant(bits), ad::constant(batch), nullptr, opt);
    return obs;
}

EnsembleState activate_bit(EnsembleState state, int bits, const Tensor& calibration_batch) {
    quant::validate_bits(bits);
    if (state.is_active(bits)) throw InvalidArgument("activate_bit: " + std::to_string(bits) + "-bit already active");
    if (!calibration_batch.defined() || calibration_batch.size() == 0) {
        throw InvalidArgument("activate_bit: calibration batch is empty");
    }
    if (state.mode == EnsembleMode::independent) {
        // warm start from the closest higher-precision variant already trained
        const models::Weights* src = &state.master;
        int best = 0;
        for (int b : state.active) {
            if (b > bits && (best == 0 || b < best)) {
                best = b;
                src = &state.copies.at(b);
            }
        }
        state.copies[bits] = *src;
    }
    // Weight specs first so the observing forward pass sees quantized weights.
    quant::ModelQuant q;
    q.bits = bits;
    quant::recalibrate_weights(q, models::weight_entries(state.def, state.weights_for(bits)));
    state.quant[bits] = q;
    const auto obs = observe_activations(state, bits, calibration_batch);
    state.quant[bits] = quant::quantize_model(models::weight_entries(state.def, state.weights_for(bits)),
                                              state.def.activation_sites, obs, bits, true);
    state.active.push_back(bits);
    std::sort(state.active.begin(), state.active.end(), std::greater<>());
    return state;
}

} // namespace triqdef
