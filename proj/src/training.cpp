#include "triqdef/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "triqdef/checkpoint.hpp"
#include "triqdef/error.hpp"
#include "triqdef/ops.hpp"

namespace triqdef::training {

using ad::Var;

namespace {

int owner_of(const EnsembleState& e, int bits) { return e.mode == EnsembleMode::shared ? 0 : bits; }

models::Weights zeros_like(const models::Weights& w) {
    models::Weights z;
    for (const auto& t : w) z.push_back(Tensor::zeros(t.shape()));
    return z;
}

bool penalties_active(const TrainState& s) {
    return uses_patches(s.config.mode) && s.ensemble.epoch >= s.config.attack.warmup_epochs;
}

std::string describe(const StepMetrics& m) {
    return "step " + std::to_string(m.step) + " epoch " + std::to_string(m.epoch) + ": l_clean=" +
           std::to_string(m.l_clean) + " l_fdp=" + std::to_string(m.l_fdp) + " l_gpdp=" + std::to_string(m.l_gpdp) +
           " l_total=" + std::to_string(m.l_total) + " lr=" + std::to_string(m.lr) +
           (m.patch_id.empty() ? "" : " patch=" + m.patch_id);
}

void activate_due(TrainState& s, const Tensor& calib) {
    for (int b : curriculum::active_bits(s.schedule, s.ensemble.epoch)) {
        if (s.ensemble.is_active(b)) continue;
        s.ensemble = activate_bit(std::move(s.ensemble), b, calib);
        if (s.ensemble.mode == EnsembleMode::independent) s.velocity[b] = zeros_like(s.ensemble.weights_for(b));
    }
}

} // namespace

std::string StepMetrics::to_json() const {
    nlohmann::json j;
    j["step"] = step;
    j["epoch"] = epoch;
    j["active_bits"] = active_bits;
    j["l_clean"] = l_clean;
    j["l_fdp"] = l_fdp;
    j["l_gpdp"] = l_gpdp;
    j["l_total"] = l_total;
    j["fdp_terms"] = fdp_terms;
    j["gpdp_pairs"] = gpdp_pairs;
    j["lr"] = lr;
    j["patch"] = patch_id;
    return j.dump();
}

double learning_rate(const RunConfig& cfg, std::size_t epoch) {
    double lr = cfg.optim.lr;
    for (double m : cfg.optim.milestones) {
        if (epoch >= static_cast<std::size_t>(std::floor(m * static_cast<double>(cfg.epochs)))) lr *= cfg.optim.lr_decay;
    }
    return lr;
}

void recalibrate_activations(EnsembleState& e, const Tensor& batch) {
    for (int b : e.active) {
        if (b == quant::kFullPrecision) continue;
        const auto obs = observe_activations(e, b, batch);
        auto& q = e.quant.at(b);
        q = quant::quantize_model(models::weight_entries(e.def, e.weights_for(b)), e.def.activation_sites, obs, b, true);
    }
}

TrainState init_state(const RunConfig& cfg, const data::Dataset& train) {
    cfg.validate();
    if (train.size() == 0) throw InvalidArgument("train: empty training set");
    TrainState s;
    s.config = cfg;
    s.schedule = curriculum::build_schedule(cfg.epochs, cfg.bits, cfg.curriculum);
    s.rng = Rng(cfg.seed);
    Rng init = s.rng.fork(1);
    s.ensemble.def = models::ModelDef::make(cfg.arch, train.images.dim(1), train.images.dim(2), train.classes);
    s.ensemble.mode = cfg.ensemble;
    s.ensemble.master = models::init_weights(s.ensemble.def, init);
    if (cfg.ensemble == EnsembleMode::shared) s.velocity[0] = zeros_like(s.ensemble.master);
    activate_due(s, train.head(cfg.calibration_images).images);
    if (uses_patches(cfg.mode) && !cfg.attack.pool_dir.empty()) {
        s.pool = attacks::load_pool(cfg.attack.pool_dir);
        if (s.pool.empty()) throw InvalidArgument("train: patch pool '" + cfg.attack.pool_dir + "' is empty");
    }
    return s;
}

StepMetrics train_step(TrainState& s, const data::Dataset& batch, double lr) {
    const RunConfig& cfg = s.config;
    EnsembleState& E = s.ensemble;
    StepMetrics m;
    m.step = s.step;
    m.epoch = E.epoch;
    m.active_bits = E.active;
    m.lr = lr;

    // Weight scales track the weights at every step.
    for (int b : E.active) quant::recalibrate_weights(E.quant.at(b), models::weight_entries(E.def, E.weights_for(b)));

    std::map<int, std::vector<Var>> leaves;
    for (int b : E.active) {
        const int k = owner_of(E, b);
        if (leaves.count(k)) continue;
        for (const auto& w : E.weights_for(b)) leaves[k].push_back(ad::leaf(w));
    }
    auto params = [&](int b) { return &leaves.at(owner_of(E, b)); };

    const Var x = ad::constant(batch.images);
    std::map<int, Var> ce;
    for (int b : E.active) ce[b] = models::clean_ce(models::forward_with_taps(E.variant(b), x, params(b)).logits, batch.labels);

    losses::LossWeights w = cfg.loss;
    const bool want_fdp = cfg.mode == DefenseMode::triqdef || cfg.mode == DefenseMode::triqdef_no_gpdp;
    const bool want_gpdp = cfg.mode == DefenseMode::triqdef || cfg.mode == DefenseMode::triqdef_no_fdp;
    if (!want_fdp) w.lambda_fdp = 0.0;
    if (!want_gpdp) w.lambda_gpdp = 0.0;
    if (cfg.mode == DefenseMode::standard_qat || cfg.mode == DefenseMode::patch_augmented) {
        w.lambda_fdp = w.lambda_gpdp = 0.0;
    }

    Var fdp, gpdp;
    if (penalties_active(s)) {
        if (s.pool.empty()) throw InvalidArgument("train: patch pool is empty in mode " + to_string(cfg.mode));
        const attacks::PatchSpec& p = s.pool[s.rng.below(s.pool.size())];
        m.patch_id = p.id;
        const Tensor x_adv = attacks::apply_patch(batch.images, p);
        if (cfg.mode == DefenseMode::patch_augmented) {
            const Var xa = ad::constant(x_adv);
            for (int b : E.active) {
                ce[b] = ad::add(ce[b], models::clean_ce(models::forward_with_taps(E.variant(b), xa, params(b)).logits,
                                                        batch.labels));
            }
        } else if (E.active.size() >= 2) {
            const Var xa = ad::leaf(x_adv);
            losses::TapFeatures features;
            losses::InputGrads grads;
            for (int b : E.active) {
                auto out = models::forward_with_taps(E.variant(b), xa, params(b));
                if (want_fdp) {
                    for (const auto& tap : cfg.taps) {
                        auto it = out.taps.find(tap);
                        if (it == out.taps.end()) throw InvalidArgument("train: model has no tap '" + tap + "'");
                        features[b][tap] = it->second;
                    }
                }
                if (want_gpdp) grads[b] = ad::grad_as_node(models::clean_ce(out.logits, batch.labels), xa);
            }
            const std::size_t n = E.active.size(), pairs = n * (n - 1) / 2;
            if (want_fdp) {
                auto r = losses::fdp_loss(features, w, cfg.metrics);
                if (r.pairs != pairs) throw Error("train: FDP pair count does not match the active set");
                fdp = r.value;
                m.fdp_terms = r.terms;
                m.l_fdp = fdp.value().item();
            }
            if (want_gpdp) {
                auto r = losses::gpdp_loss(grads, w, cfg.metrics);
                if (r.pairs != pairs) throw Error("train: GPDP pair count does not match the active set");
                gpdp = r.value;
                m.gpdp_pairs = r.pairs;
                m.l_gpdp = gpdp.value().item();
            }
        }
    }
    for (const auto& [b, v] : ce) m.l_clean += v.value().item();
    const Var total = losses::total_loss(ce, fdp, gpdp, w);
    m.l_total = total.value().item();
    if (!std::isfinite(m.l_total) || !std::isfinite(m.l_clean)) {
        throw NumericalError("non-finite loss at " + describe(m));
    }

    std::vector<Var> flat;
    for (const auto& [k, ls] : leaves) flat.insert(flat.end(), ls.begin(), ls.end());
    const auto g = ad::grad(total, flat);

    double scale = 1.0;
    if (cfg.optim.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& gi : g)
            for (double v : gi.value().values()) sq += v * v;
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw NumericalError("non-finite gradient at " + describe(m));
        if (norm > cfg.optim.grad_clip) scale = cfg.optim.grad_clip / norm;
    }

    std::size_t gi = 0;
    for (const auto& [k, ls] : leaves) {
        models::Weights& weights = k == 0 ? E.master : E.copies.at(k);
        models::Weights& vel = s.velocity.at(k);
        for (std::size_t i = 0; i < ls.size(); ++i, ++gi) {
            const auto wv = weights[i].values();
            const auto gv = g[gi].value().values();
            const auto vv = vel[i].values();
            std::vector<double> nw(wv.size()), nv(wv.size());
            for (std::size_t j = 0; j < wv.size(); ++j) {
                const double d = scale * gv[j] + cfg.optim.weight_decay * wv[j];
                nv[j] = cfg.optim.momentum * vv[j] + d;
                nw[j] = wv[j] - lr * nv[j];
                if (!std::isfinite(nw[j])) throw NumericalError("non-finite weight update at " + describe(m));
            }
            vel[i] = Tensor(weights[i].shape(), std::move(nv));
            weights[i] = Tensor(weights[i].shape(), std::move(nw));
        }
    }
    ++s.step;
    return m;
}

std::vector<attacks::PatchSpec> craft_pool(const EnsembleState& ensemble, const AttackPoolConfig& cfg,
                                           const data::Dataset& images, std::size_t calibration_images,
                                           std::uint64_t seed) {
    if (images.size() == 0) throw InvalidArgument("craft_pool: no images");
    EnsembleState view = ensemble;
    const Tensor calib = images.head(calibration_images).images;
    for (int b : cfg.source_bits) {
        if (!view.is_active(b)) view = activate_bit(std::move(view), b, calib);
    }
    Rng rng(seed);
    std::vector<attacks::PatchSpec> pool;
    for (std::size_t size : cfg.sizes) {
        for (const auto& [row, col] : cfg.locations) {
            for (int b : cfg.source_bits) {
                attacks::PatchRequest req;
                req.id = "s" + std::to_string(size) + "_r" + std::to_string(row) + "_c" + std::to_string(col) + "_b" +
                         std::to_string(b);
                req.height = req.width = size;
                req.row = row;
                req.col = col;
                req.family = cfg.family;
                req.target_class = cfg.target_class;
                req.source_bits = b;
                attacks::AttackConfig ac;
                ac.iterations = cfg.iterations;
                ac.step_size = cfg.step_size;
                ac.targeted = true;
                ac.random_location = cfg.family == attacks::Family::universal;
                ac.seed = rng.next_u64();
                ac.batch_size = cfg.craft_batch;
                pool.push_back(attacks::craft_patch(attacks::classifier(view.variant(b)), images.images, images.labels,
                                                    ac, req));
            }
        }
    }
    return pool;
}

void train_epoch(TrainState& s, const data::Dataset& train, const TrainOptions& opt) {
    const RunConfig& cfg = s.config;
    const std::size_t e = s.ensemble.epoch;
    if (e >= cfg.epochs) throw InvalidArgument("train_epoch: run already finished");
    const Tensor calib = train.head(cfg.calibration_images).images;
    activate_due(s, calib);

    if (uses_patches(cfg.mode) && cfg.attack.pool_dir.empty() && e >= cfg.attack.warmup_epochs) {
        bool stage_start = false;
        for (const auto& st : s.schedule.stages) stage_start = stage_start || st.start_epoch == e;
        if (s.pool.empty() || (cfg.attack.refresh && stage_start && e > cfg.attack.warmup_epochs)) {
            s.pool = craft_pool(s.ensemble, cfg.attack, train.head(cfg.attack.craft_images), cfg.calibration_images,
                                s.rng.next_u64());
        }
    }
    recalibrate_activations(s.ensemble, calib);

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    s.rng.shuffle(order);
    const double lr = learning_rate(cfg, e);

    std::ofstream metrics;
    if (!opt.metrics_path.empty()) {
        metrics.open(opt.metrics_path, std::ios::app);
        if (!metrics) throw DataError(opt.metrics_path + ": cannot open metrics log");
    }
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
        const StepMetrics m = train_step(s, train.subset(idx), lr);
        if (metrics.is_open()) metrics << m.to_json() << '\n';
        if (opt.on_step) opt.on_step(m);
    }
    s.ensemble.epoch = e + 1;
}

void train(TrainState& s, const data::Dataset& train_set, const TrainOptions& opt) {
    while (!s.finished()) {
        if (opt.stop_after_epoch && s.ensemble.epoch >= *opt.stop_after_epoch) break;
        train_epoch(s, train_set, opt);
        if (!opt.checkpoint_path.empty()) checkpoint::save(opt.checkpoint_path, s);
        if (opt.on_epoch) opt.on_epoch(s);
    }
}

} // namespace triqdef::training
