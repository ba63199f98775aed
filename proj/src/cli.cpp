#include "triqdef/cli.hpp"

#include <cctype>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "triqdef/campaigns.hpp"
#include "triqdef/checkpoint.hpp"
#include "triqdef/error.hpp"

namespace triqdef {

namespace {

namespace fs = std::filesystem;

struct CommonOptions {
    std::optional<std::uint64_t> seed;
    std::string out;
};

RunConfig load_config(const std::string& path, const CommonOptions& o) {
    RunConfig cfg = RunConfig::load(path);
    if (o.seed) {
        cfg.seed = *o.seed;
        cfg.seed_set = true;
    }
    if (!o.out.empty()) cfg.out_dir = o.out;
    cfg.validate();
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write '" + path.string() + "'");
    f << text;
}

std::vector<int> bits_or_default(const std::vector<int>& requested, const RunConfig& cfg) {
    return requested.empty() ? cfg.bits : requested;
}

std::string slug(const std::string& name) {
    std::string s;
    for (char c : name) s += std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '=' ? c : '_';
    return s;
}

void print_clean(std::ostream& out, const std::map<int, double>& clean) {
    for (auto [b, a] : clean) out << "clean accuracy " << b << "-bit: " << a << "\n";
}

int cmd_train(const std::string& config_path, const CommonOptions& o, const std::string& resume, std::ostream& out) {
    const RunConfig cfg = load_config(config_path, o);
    const auto split = data::load_dataset(cfg.data, cfg.seed);
    training::TrainState s = resume.empty() ? training::init_state(cfg, split.train) : checkpoint::load(resume);
    if (!resume.empty() && s.config.to_text() != cfg.to_text()) {
        throw InvalidArgument("train: checkpoint '" + resume + "' was written for a different configuration");
    }
    const fs::path dir = cfg.out_dir;
    fs::create_directories(dir);
    write_text(dir / "config.ini", cfg.to_text());
    training::TrainOptions opt;
    opt.metrics_path = (dir / "metrics.ndjson").string();
    opt.checkpoint_path = (dir / "checkpoint.tqc").string();
    opt.on_epoch = [&](const training::TrainState& st) {
        out << "epoch " << st.ensemble.epoch << "/" << st.config.epochs << " done\n";
    };
    // Resuming appends to the existing log; a fresh run starts a new one.
    if (resume.empty()) fs::remove(opt.metrics_path);
    training::train(s, split.train, opt);
    checkpoint::save(opt.checkpoint_path, s);
    const auto clean = evaluation::evaluate_clean(s.ensemble, split.eval.head(cfg.eval.asr_images), cfg.bits);
    reports::write(dir.string(), "clean", reports::clean_json(clean), reports::clean_csv(clean));
    print_clean(out, clean);
    out << "checkpoint written to " << opt.checkpoint_path << "\n";
    return 0;
}

int cmd_craft_pool(const std::string& config_path, const CommonOptions& o, const std::string& ckpt, bool eval_pool,
                   std::ostream& out) {
    if (o.out.empty()) throw InvalidArgument("craft-pool: --out is required");
    RunConfig cfg = RunConfig::load(config_path);
    if (o.seed) {
        cfg.seed = *o.seed;
        cfg.seed_set = true;
    }
    cfg.validate();
    const auto split = data::load_dataset(cfg.data, cfg.seed);
    std::vector<attacks::PatchSpec> pool;
    if (ckpt.empty()) {
        if (eval_pool) throw InvalidArgument("craft-pool: --eval needs --ckpt");
        pool = campaigns::craft_warmup_pool(cfg, split);
    } else {
        const auto s = checkpoint::load(ckpt);
        const AttackPoolConfig& pc = eval_pool ? cfg.eval_attack : cfg.attack;
        Rng rng(cfg.seed);
        pool = training::craft_pool(s.ensemble, pc, split.train.head(pc.craft_images), cfg.calibration_images,
                                    rng.fork(eval_pool ? 11 : 7).next_u64());
        if (eval_pool) {
            for (auto& p : pool) p.id = "eval_" + p.id;
        }
    }
    attacks::save_pool(o.out, pool);
    out << pool.size() << " patches written to " << o.out << "\n";
    return 0;
}

int cmd_eval_clean(const std::string& ckpt, const std::vector<int>& bits, const std::string& out_dir,
                   std::ostream& out) {
    const auto s = checkpoint::load(ckpt);
    const auto split = data::load_dataset(s.config.data, s.config.seed);
    const auto clean =
        evaluation::evaluate_clean(s.ensemble, split.eval.head(s.config.eval.asr_images), bits_or_default(bits, s.config));
    const std::string csv = reports::clean_csv(clean);
    if (!out_dir.empty()) reports::write(out_dir, "clean", reports::clean_json(clean), csv);
    out << csv;
    return 0;
}

int cmd_transfer(const std::string& ckpt, const std::string& pool_dir, const std::vector<int>& bits, bool untargeted,
                 const std::string& manifest_dir, const std::string& out_dir, std::ostream& out) {
    const auto s = checkpoint::load(ckpt);
    const auto split = data::load_dataset(s.config.data, s.config.seed);
    const auto pool = attacks::load_pool(pool_dir);
    std::vector<attacks::PatchKey> manifest;
    if (!manifest_dir.empty()) {
        manifest = attacks::load_manifest_keys(manifest_dir);
    } else {
        for (const auto& p : s.pool) manifest.push_back(attacks::key_of(p));
    }
    const auto eval = split.eval.head(s.config.eval.asr_images);
    const auto use_bits = bits_or_default(bits, s.config);
    auto r = evaluation::transfer_matrix(s.ensemble, pool, eval, use_bits, !untargeted, manifest);
    r.clean_accuracy = evaluation::evaluate_clean(s.ensemble, eval, use_bits);
    const std::string csv = reports::transfer_csv(r);
    if (!out_dir.empty()) reports::write(out_dir, "transfer", reports::transfer_json(r), csv);
    out << csv;
    return 0;
}

int cmd_align(const std::string& ckpt, const std::vector<int>& bits, const std::string& pool_dir,
              std::size_t patch_index, const std::string& out_dir, std::ostream& out) {
    const auto s = checkpoint::load(ckpt);
    const auto split = data::load_dataset(s.config.data, s.config.seed);
    std::optional<attacks::PatchSpec> patch;
    if (!pool_dir.empty()) {
        const auto pool = attacks::load_pool(pool_dir);
        if (patch_index >= pool.size()) {
            throw InvalidArgument("align: --patch-index " + std::to_string(patch_index) + " but the pool has " +
                                  std::to_string(pool.size()) + " patches");
        }
        patch = pool[patch_index];
    }
    const auto entries =
        evaluation::alignment_report(s.ensemble, split.eval.head(s.config.eval.align_images),
                                     bits_or_default(bits, s.config), s.config.taps, patch ? &*patch : nullptr, s.config.metrics);
    const std::string csv = reports::align_csv(entries);
    if (!out_dir.empty()) reports::write(out_dir, "align", reports::align_json(entries), csv);
    out << csv;
    return 0;
}

// Trains and evaluates every named config against one shared training pool.
int run_grid(const RunConfig& base, const std::vector<std::pair<std::string, RunConfig>>& grid, const char* schema,
             const std::string& stem, std::ostream& out) {
    const fs::path dir = base.out_dir;
    fs::create_directories(dir);
    const auto split = data::load_dataset(base.data, base.seed);
    std::string pool_dir = base.attack.pool_dir;
    if (pool_dir.empty()) {
        pool_dir = (dir / "train_pool").string();
        attacks::save_pool(pool_dir, campaigns::craft_warmup_pool(base, split));
        out << "training pool written to " << pool_dir << "\n";
    }
    std::vector<reports::SummaryRow> rows;
    for (auto [name, cfg] : grid) {
        cfg.attack.pool_dir = pool_dir;
        cfg.out_dir = (dir / slug(name)).string();
        fs::create_directories(cfg.out_dir);
        out << "running " << name << "\n";
        auto s = training::init_state(cfg, split.train);
        training::train(s, split.train);
        checkpoint::save((fs::path(cfg.out_dir) / "checkpoint.tqc").string(), s);
        const auto o = campaigns::evaluate_run(std::move(s), split);
        reports::write(cfg.out_dir, "transfer", reports::transfer_json(o.transfer), reports::transfer_csv(o.transfer));
        for (auto& r : campaigns::summarize(name, o)) rows.push_back(std::move(r));
    }
    const std::string csv = reports::summary_csv(rows);
    reports::write(dir.string(), stem, reports::summary_json(schema, rows), csv);
    out << csv;
    return 0;
}

int classify(const std::exception& e, std::ostream& err) {
    err << "error: " << e.what() << "\n";
    if (dynamic_cast<const NumericalError*>(&e)) return 3;
    if (dynamic_cast<const InvalidArgument*>(&e)) return 1;
    return 2;
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-bit quantization-aware training with patch-transfer defenses"};
    app.name("triqdef");
    app.require_subcommand(1);

    CommonOptions common;
    std::string config_path, ckpt_path, pool_dir, resume, manifest_dir;
    std::vector<int> bits;
    bool untargeted = false, eval_pool = false;
    std::size_t patch_index = 0;

    auto add_seed = [&](CLI::App* c) { c->add_option("--seed", common.seed, "Override the configured seed"); };

    auto* train = app.add_subcommand("train", "Train an ensemble from a config file");
    train->add_option("config", config_path, "Config file")->required();
    add_seed(train);
    train->add_option("--out", common.out, "Output directory (overrides train.out_dir)");
    train->add_option("--resume", resume, "Continue from a checkpoint");

    auto* craft = app.add_subcommand("craft-pool", "Craft a patch pool");
    craft->add_option("config", config_path, "Config file")->required();
    craft->add_option("--out", common.out, "Pool directory")->required();
    add_seed(craft);
    craft->add_option("--ckpt", ckpt_path, "Craft against this checkpoint instead of a warm-up model");
    craft->add_flag("--eval", eval_pool, "Use the eval_attack section (needs --ckpt)");

    auto* clean = app.add_subcommand("eval-clean", "Clean accuracy per bit-width");
    clean->add_option("ckpt", ckpt_path, "Checkpoint")->required();
    clean->add_option("--bits", bits, "Bit-widths (default: all configured)")->delimiter(',');
    clean->add_option("--out", common.out, "Report directory");

    auto* transfer = app.add_subcommand("transfer", "Patch transfer matrix across bit-widths");
    transfer->add_option("ckpt", ckpt_path, "Checkpoint")->required();
    transfer->add_option("--pool", pool_dir, "Pool directory")->required();
    transfer->add_option("--bits", bits, "Target bit-widths (default: all configured)")->delimiter(',');
    transfer->add_flag("--untargeted", untargeted, "Count any flipped prediction as success");
    transfer->add_option("--train-manifest", manifest_dir, "Pool directory whose patches count as seen");
    transfer->add_option("--out", common.out, "Report directory");

    auto* align = app.add_subcommand("align", "Feature and gradient alignment between bit-widths");
    align->add_option("ckpt", ckpt_path, "Checkpoint")->required();
    align->add_option("--bits", bits, "Bit-widths (default: all configured)")->delimiter(',');
    align->add_option("--pool", pool_dir, "Patch the inputs with a patch from this pool");
    align->add_option("--patch-index", patch_index, "Index of the patch in the pool");
    align->add_option("--out", common.out, "Report directory");

    auto* ablate = app.add_subcommand("ablate", "Full, w/o FDP and w/o GPDP runs on one training pool");
    ablate->add_option("config", config_path, "Config file")->required();
    add_seed(ablate);
    ablate->add_option("--out", common.out, "Output directory (overrides train.out_dir)");

    auto* sweep = app.add_subcommand("sweep", "One-at-a-time sweep of the loss weights");
    sweep->add_option("config", config_path, "Config file")->required();
    add_seed(sweep);
    sweep->add_option("--out", common.out, "Output directory (overrides train.out_dir)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (*train) return cmd_train(config_path, common, resume, out);
        if (*craft) return cmd_craft_pool(config_path, common, ckpt_path, eval_pool, out);
        if (*clean) return cmd_eval_clean(ckpt_path, bits, common.out, out);
        if (*transfer) return cmd_transfer(ckpt_path, pool_dir, bits, untargeted, manifest_dir, common.out, out);
        if (*align) return cmd_align(ckpt_path, bits, pool_dir, patch_index, common.out, out);
        if (*ablate) {
            const RunConfig cfg = load_config(config_path, common);
            return run_grid(cfg, campaigns::ablation_configs(cfg), reports::kAblationSchema, "ablation", out);
        }
        if (*sweep) {
            const RunConfig cfg = load_config(config_path, common);
            return run_grid(cfg, campaigns::sweep_configs(cfg), reports::kSweepSchema, "sweep", out);
        }
    } catch (const std::exception& e) {
        return classify(e, err);
    }
    err << app.help();
    return 1;
}

} // namespace triqdef
