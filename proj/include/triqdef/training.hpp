#pragma once

// The multi-bit training loop: clean cross-entropy of every active variant
// plus the feature and gradient disalignment penalties on patched inputs,
// one SGD step on the master weights per batch, curriculum stages per epoch.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "triqdef/attacks.hpp"
#include "triqdef/config.hpp"
#include "triqdef/curriculum.hpp"
#include "triqdef/datasets.hpp"
#include "triqdef/rng.hpp"

namespace triqdef::training {

struct StepMetrics {
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::vector<int> active_bits;
    double l_clean = 0.0;      // sum over variants of the clean cross-entropy
    double l_fdp = 0.0;        // unweighted penalties
    double l_gpdp = 0.0;
    double l_total = 0.0;
    std::size_t fdp_terms = 0;
    std::size_t gpdp_pairs = 0;
    double lr = 0.0;
    std::string patch_id;

    /// One NDJSON line (no trailing newline).
    std::string to_json() const;
};

/// Everything needed to continue a run bit-exactly.
struct TrainState {
    RunConfig config;
    curriculum::Schedule schedule;
    EnsembleState ensemble;                        // ensemble.epoch = next epoch to run
    /// Momentum buffers keyed by weight owner: 0 for the shared master
    /// weights, the bit-width for independent copies.
    std::map<int, models::Weights> velocity;
    Rng rng;
    std::size_t step = 0;
    std::vector<attacks::PatchSpec> pool;          // training patch pool

    bool finished() const { return ensemble.epoch >= config.epochs; }
};

struct TrainOptions {
    /// NDJSON metrics file, appended to; empty disables.
    std::string metrics_path;
    /// Written after every epoch when non-empty.
    std::string checkpoint_path;
    /// Stop once this many epochs in total have run (for resume tests).
    std::optional<std::size_t> stop_after_epoch;
    std::function<void(const StepMetrics&)> on_step;
    std::function<void(const TrainState&)> on_epoch;
};

/// Learning rate for an epoch: lr times lr_decay per passed milestone.
double learning_rate(const RunConfig& cfg, std::size_t epoch);

/// Fresh state: seeded weights and the epoch-0 bit-widths activated on the
/// first calibration_images training images.
TrainState init_state(const RunConfig& cfg, const data::Dataset& train);

/// One optimizer step on a batch. Throws NumericalError for a non-finite loss.
StepMetrics train_step(TrainState& s, const data::Dataset& batch, double lr);

/// Runs the epoch in s.ensemble.epoch: stage activation, pool crafting when
/// due, activation recalibration, then all batches in a seeded order.
void train_epoch(TrainState& s, const data::Dataset& train, const TrainOptions& opt = {});

/// Runs from `s` until the epoch budget (or opt.stop_after_epoch) is reached.
void train(TrainState& s, const data::Dataset& train, const TrainOptions& opt = {});

/// Patches for every (size, location, source bit-width) of cfg.attack,
/// crafted against the given ensemble's variants on `images`. Bit-widths that
/// are not active are viewed through freshly calibrated specs.
std::vector<attacks::PatchSpec> craft_pool(const EnsembleState& ensemble, const AttackPoolConfig& cfg,
                                           const data::Dataset& images, std::size_t calibration_images,
                                           std::uint64_t seed);

/// Activation specs of every active bit-width refreshed on `batch`.
void recalibrate_activations(EnsembleState& e, const Tensor& batch);

} // namespace triqdef::training
