#pragma once

// Run configuration: a flat key=value text format with [section] headers
// and '#' comments, and the typed RunConfig read from it.
// The grammar is documented in docs/config.md.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "triqdef/attacks.hpp"
#include "triqdef/curriculum.hpp"
#include "triqdef/losses.hpp"

namespace triqdef {

/// Parsed key/value pairs; keys are "section.key" ("key" before any header).
class ConfigFile {
public:
    /// Throws InvalidArgument naming `source` and the line on syntax errors
    /// and duplicate keys.
    static ConfigFile parse(const std::string& text, const std::string& source = "<config>");
    static ConfigFile load(const std::string& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::map<std::string, std::string>& values() const { return values_; }
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

private:
    std::map<std::string, std::string> values_;
};

enum class DefenseMode { standard_qat, patch_augmented, triqdef, triqdef_no_fdp, triqdef_no_gpdp };

std::string to_string(DefenseMode m);
DefenseMode parse_defense_mode(const std::string& s);
/// True for the modes that need a patch pool.
bool uses_patches(DefenseMode m);

struct DataConfig {
    std::string dataset = "synthetic-shapes";   // or cifar10-subset
    std::size_t train_size = 2000;
    std::size_t eval_size = 500;
    std::size_t image_size = 32;
    std::size_t classes = 4;
    std::string data_dir;                       // empty: TRIQDEF_DATA_DIR
};

struct OptimConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    /// Epoch fractions at which the learning rate is multiplied by lr_decay.
    std::vector<double> milestones{0.5, 0.75};
    double lr_decay = 0.1;
    /// Global gradient-norm clip; 0 disables.
    double grad_clip = 0.0;
};

struct AttackPoolConfig {
    std::string pool_dir;                       // load instead of crafting when set
    std::vector<std::size_t> sizes{5, 8};
    std::vector<std::pair<std::size_t, std::size_t>> locations{{0, 0}, {24, 24}};
    std::vector<int> source_bits{32, 5};
    attacks::Family family = attacks::Family::per_image_targeted;
    int target_class = 0;
    std::size_t iterations = 50;
    double step_size = 0.05;
    std::size_t craft_images = 256;
    std::size_t craft_batch = 32;
    /// Epochs of clean training before the pool is crafted and the penalties
    /// switch on.
    std::size_t warmup_epochs = 2;
    /// Re-craft the pool at the start of every stage.
    bool refresh = false;
};

/// Held-out patches used for evaluation; their (size, location, source
/// bit-width) triples should not occur in the training pool.
inline AttackPoolConfig default_eval_attack() {
    AttackPoolConfig a;
    a.sizes = {6};
    a.locations = {{4, 20}, {20, 4}};
    a.source_bits = {32};
    a.iterations = 100;
    a.warmup_epochs = 0;
    return a;
}

struct EvalConfig {
    std::size_t asr_images = 500;     // head of the eval split
    std::size_t align_images = 64;
};

/// One-at-a-time hyperparameter grid for the sweep command; every other
/// value stays at its configured setting.
struct SweepConfig {
    std::vector<double> alpha{0.25, 0.5, 1.0};
    std::vector<double> beta{0.5, 1.0, 2.0};
    std::vector<double> lambda_fdp{0.4, 0.8, 1.6};
    std::vector<double> lambda_gpdp{0.25, 0.5, 1.0};
};

struct RunConfig {
    std::uint64_t seed = 0;
    bool seed_set = false;
    DataConfig data;
    std::string arch = "tinycnn-s";
    std::vector<int> bits{32, 5, 4, 2};
    EnsembleMode ensemble = EnsembleMode::shared;
    curriculum::Mode curriculum = curriculum::Mode::staircase;
    DefenseMode mode = DefenseMode::triqdef;
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    OptimConfig optim;
    losses::LossWeights loss;
    losses::MetricParams metrics;
    std::vector<std::string> taps{"block1", "block2", "block3"};
    std::size_t calibration_images = 256;
    AttackPoolConfig attack;
    AttackPoolConfig eval_attack = default_eval_attack();
    EvalConfig eval;
    SweepConfig sweep;
    std::string out_dir = "run";

    /// Throws InvalidArgument; a missing seed is an error.
    void validate() const;
    /// Canonical text: every key in a fixed order. from_file(to_text()) == *this.
    std::string to_text() const;
    static RunConfig from_file(const ConfigFile& f);
    static RunConfig from_text(const std::string& text, const std::string& source = "<config>");
    static RunConfig load(const std::string& path);
};

} // namespace triqdef
