#include "triqdef/campaigns.hpp"

#include <charconv>
#include <cmath>

#include "triqdef/error.hpp"

namespace triqdef::campaigns {

namespace {

std::string fmt(double v) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

} // namespace

std::vector<attacks::PatchSpec> craft_warmup_pool(const RunConfig& cfg, const data::Split& split) {
    RunConfig warm = cfg;
    warm.mode = DefenseMode::standard_qat;
    warm.curriculum = curriculum::Mode::joint;
    warm.epochs = std::max<std::size_t>(1, cfg.attack.warmup_epochs);
    warm.attack.pool_dir.clear();
    auto s = training::init_state(warm, split.train);
    training::train(s, split.train);
    Rng rng(cfg.seed);
    return training::craft_pool(s.ensemble, cfg.attack, split.train.head(cfg.attack.craft_images),
                                cfg.calibration_images, rng.fork(7).next_u64());
}

Outcome evaluate_run(training::TrainState state, const data::Split& split) {
    const RunConfig& cfg = state.config;
    Outcome o;
    const data::Dataset eval = split.eval.head(cfg.eval.asr_images);
    o.clean = evaluation::evaluate_clean(state.ensemble, eval, cfg.bits);
    Rng rng(cfg.seed);
    o.eval_pool = training::craft_pool(state.ensemble, cfg.eval_attack, split.train.head(cfg.eval_attack.craft_images),
                                       cfg.calibration_images, rng.fork(11).next_u64());
    // Ids of held-out patches get a prefix so they never collide with the training pool.
    for (auto& p : o.eval_pool) p.id = "eval_" + p.id;
    std::vector<attacks::PatchKey> manifest;
    for (const auto& p : state.pool) manifest.push_back(attacks::key_of(p));
    std::vector<attacks::PatchSpec> all = state.pool;
    all.insert(all.end(), o.eval_pool.begin(), o.eval_pool.end());
    o.transfer = evaluation::transfer_matrix(state.ensemble, all, eval, cfg.bits, true, manifest);
    o.state = std::move(state);
    return o;
}

std::vector<reports::SummaryRow> summarize(const std::string& variant, const Outcome& o) {
    std::vector<reports::SummaryRow> rows;
    for (const std::string split : {"seen", "unseen"}) {
        reports::SummaryRow r;
        r.variant = variant;
        r.split = split;
        r.cross_bit_asr = o.transfer.mean_cross_bit_asr(split);
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& c : o.transfer.cells) {
            if (c.seen == (split == "seen")) {
                sum += c.asr;
                ++n;
            }
        }
        r.mean_asr = n ? sum / static_cast<double>(n) : std::nan("");
        r.clean_accuracy = o.clean;
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<std::pair<std::string, RunConfig>> ablation_configs(const RunConfig& cfg) {
    std::vector<std::pair<std::string, RunConfig>> out;
    for (auto [name, mode] : {std::pair{"full", DefenseMode::triqdef}, std::pair{"w/o FDP", DefenseMode::triqdef_no_fdp},
                              std::pair{"w/o GPDP", DefenseMode::triqdef_no_gpdp}}) {
        RunConfig c = cfg;
        c.mode = mode;
        out.emplace_back(name, std::move(c));
    }
    return out;
}

std::vector<std::pair<std::string, RunConfig>> sweep_configs(const RunConfig& cfg) {
    std::vector<std::pair<std::string, RunConfig>> out;
    auto add = [&](const std::string& name, const std::vector<double>& values, double losses::LossWeights::*m) {
        for (double v : values) {
            RunConfig c = cfg;
            c.mode = DefenseMode::triqdef;
            c.loss.*m = v;
            c.loss.validate();
            out.emplace_back(name + "=" + fmt(v), std::move(c));
        }
    };
    add("alpha", cfg.sweep.alpha, &losses::LossWeights::alpha);
    add("beta", cfg.sweep.beta, &losses::LossWeights::beta);
    add("lambda_fdp", cfg.sweep.lambda_fdp, &losses::LossWeights::lambda_fdp);
    add("lambda_gpdp", cfg.sweep.lambda_gpdp, &losses::LossWeights::lambda_gpdp);
    return out;
}

} // namespace triqdef::campaigns
