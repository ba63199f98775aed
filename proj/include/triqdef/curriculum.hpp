#pragma once

// Staged activation of bit-widths over the epoch budget, and the ensemble
// state those stages act on.

#include <map>
#include <string>
#include <vector>

#include "triqdef/models.hpp"
#include "triqdef/quant.hpp"

namespace triqdef {

namespace curriculum {

enum class Mode {
    staircase,   // equal stages, remainder epochs to the earliest stages
    linear,      // boundaries at floor(k T / S)
    joint,       // every bit-width from epoch 0 (no curriculum)
};

std::string to_string(Mode m);
Mode parse_mode(const std::string& s);

struct Stage {
    std::size_t start_epoch = 0;
    std::vector<int> bits_added;
    bool operator==(const Stage&) const = default;
};

struct Schedule {
    std::size_t total_epochs = 0;
    Mode mode = Mode::staircase;
    std::vector<int> bits;        // descending
    std::vector<Stage> stages;
    bool operator==(const Schedule&) const = default;
};

/// Stages: the two highest bit-widths first, then one bit-width per stage.
/// `bits` must be strictly descending. Throws InvalidArgument when there are
/// fewer epochs than stages.
Schedule build_schedule(std::size_t total_epochs, const std::vector<int>& bits, Mode mode);

/// Bit-widths active at `epoch`, descending. Throws for epoch >= total.
std::vector<int> active_bits(const Schedule& s, std::size_t epoch);

} // namespace curriculum

enum class EnsembleMode {
    shared,        // one set of master weights for every bit-width
    independent,   // a weight copy per bit-width, warm-started on activation
};

std::string to_string(EnsembleMode m);
EnsembleMode parse_ensemble_mode(const std::string& s);

struct EnsembleState {
    models::ModelDef def;
    EnsembleMode mode = EnsembleMode::shared;
    models::Weights master;
    std::map<int, models::Weights> copies;     // independent mode only
    std::map<int, quant::ModelQuant> quant;    // one entry per active bit-width
    std::vector<int> active;                   // descending
    std::size_t epoch = 0;

    bool is_active(int bits) const;
    const models::Weights& weights_for(int bits) const;
    models::Weights& weights_for(int bits);
    models::VariantHandle variant(int bits) const { return {this, bits}; }
};

/// Adds `bits` to the active set with specs calibrated from its current
/// weights and, for activations, from a forward pass over calibration_batch.
/// In independent mode the new copy starts from the nearest higher active
/// bit-width. Throws InvalidArgument if already active or the batch is empty.
EnsembleState activate_bit(EnsembleState state, int bits, const Tensor& calibration_batch);

/// Running-max activation statistics of one variant on a batch (activations
/// left unquantized while observing).
quant::ActivationObserver observe_activations(const EnsembleState& state, int bits, const Tensor& batch);

} // namespace triqdef
