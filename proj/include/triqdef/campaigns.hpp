#pragma once

// Multi-run workflows built from training and evaluation: shared training
// pools, train-then-evaluate, and the ablation and sweep grids.

#include <string>
#include <utility>
#include <vector>

#include "triqdef/evaluation.hpp"
#include "triqdef/reports.hpp"
#include "triqdef/training.hpp"

namespace triqdef::campaigns {

/// Patch pool crafted per cfg.attack on a briefly trained (warm-up epochs,
/// all bit-widths from the start, clean loss only) model.
std::vector<attacks::PatchSpec> craft_warmup_pool(const RunConfig& cfg, const data::Split& split);

struct Outcome {
    training::TrainState state;
    std::map<int, double> clean;
    std::vector<attacks::PatchSpec> eval_pool;      // crafted on the final model per cfg.eval_attack
    evaluation::TransferReport transfer;            // training pool and eval pool, seen/unseen marked
};

/// Eval pool crafted against the final model, then the transfer matrix of
/// the training and eval pools on the eval split.
Outcome evaluate_run(training::TrainState state, const data::Split& split);

/// Seen and unseen summary rows of one run.
std::vector<reports::SummaryRow> summarize(const std::string& variant, const Outcome& o);

/// full / w/o FDP / w/o GPDP variants of cfg.
std::vector<std::pair<std::string, RunConfig>> ablation_configs(const RunConfig& cfg);
/// One config per sweep value, each varying a single hyperparameter.
std::vector<std::pair<std::string, RunConfig>> sweep_configs(const RunConfig& cfg);

} // namespace triqdef::campaigns
