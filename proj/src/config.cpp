#include "triqdef/config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <sstream>

#include "triqdef/binio.hpp"
#include "triqdef/error.hpp"

namespace triqdef {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

std::string fmt(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
    throw InvalidArgument("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T v{};
    const char* end = value.data() + value.size();
    auto r = std::from_chars(value.data(), end, v);
    if (r.ec != std::errc() || r.ptr != end) bad_value(key, value, "a number");
    return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    bad_value(key, value, "a boolean");
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
    return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
    std::vector<T> out;
    for (const auto& item : split(value, ',')) out.push_back(parse_number<T>(key, item));
    return out;
}

struct Field {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
std::string show(const T& v) {
    if constexpr (std::is_same_v<T, double>) return fmt(v);
    else if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
    else if constexpr (std::is_same_v<T, std::string>) return v;
    else return std::to_string(v);
}

template <typename T>
T read(const std::string& key, const std::string& v) {
    if constexpr (std::is_same_v<T, bool>) return parse_bool(key, v);
    else if constexpr (std::is_same_v<T, std::string>) return v;
    else return parse_number<T>(key, v);
}

// `access` maps a config to the member the key controls.
template <typename T, typename Access>
Field scalar(const std::string& key, Access access) {
    return {key, [access](const RunConfig& c) { return show<T>(access(const_cast<RunConfig&>(c))); },
            [key, access](RunConfig& c, const std::string& v) { access(c) = read<T>(key, v); }};
}

#define TQ_FIELD(key, expr, T) scalar<T>(key, [](RunConfig& c) -> T& { return c.expr; })

// Keys of one patch-pool block; `with_training` adds the training-only keys.
std::vector<Field> pool_fields(const std::string& prefix, AttackPoolConfig RunConfig::*pool, bool with_training) {
    auto scalar_of = [&]<typename T>(const std::string& name, T AttackPoolConfig::*m) {
        const std::string key = prefix + "." + name;
        return scalar<T>(key, [pool, m](RunConfig& c) -> T& { return (c.*pool).*m; });
    };
    std::vector<Field> t;
    const std::string P = prefix + ".";
    if (with_training) t.push_back(scalar_of.template operator()<std::string>("pool_dir", &AttackPoolConfig::pool_dir));
    t.push_back({P + "sizes",
                 [pool](const RunConfig& c) {
                     return join<std::size_t>((c.*pool).sizes, [](const std::size_t& s) { return std::to_string(s); });
                 },
                 [pool, P](RunConfig& c, const std::string& v) {
                     (c.*pool).sizes = parse_list<std::size_t>(P + "sizes", v);
                 }});
    t.push_back({P + "locations",
                 [pool](const RunConfig& c) {
                     return join<std::pair<std::size_t, std::size_t>>((c.*pool).locations, [](const auto& l) {
                         return std::to_string(l.first) + ":" + std::to_string(l.second);
                     });
                 },
                 [pool, P](RunConfig& c, const std::string& v) {
                     auto& locs = (c.*pool).locations;
                     locs.clear();
                     for (const auto& item : split(v, ',')) {
                         const auto parts = split(item, ':');
                         if (parts.size() != 2) bad_value(P + "locations", item, "row:col");
                         locs.emplace_back(parse_number<std::size_t>(P + "locations", parts[0]),
                                           parse_number<std::size_t>(P + "locations", parts[1]));
                     }
                 }});
    t.push_back({P + "source_bits",
                 [pool](const RunConfig& c) {
                     return join<int>((c.*pool).source_bits, [](const int& b) { return std::to_string(b); });
                 },
                 [pool, P](RunConfig& c, const std::string& v) {
                     (c.*pool).source_bits = parse_list<int>(P + "source_bits", v);
                 }});
    t.push_back({P + "family", [pool](const RunConfig& c) { return attacks::to_string((c.*pool).family); },
                 [pool](RunConfig& c, const std::string& v) { (c.*pool).family = attacks::parse_family(v); }});
    t.push_back(scalar_of.template operator()<int>("target_class", &AttackPoolConfig::target_class));
    t.push_back(scalar_of.template operator()<std::size_t>("iterations", &AttackPoolConfig::iterations));
    t.push_back(scalar_of.template operator()<double>("step_size", &AttackPoolConfig::step_size));
    t.push_back(scalar_of.template operator()<std::size_t>("craft_images", &AttackPoolConfig::craft_images));
    t.push_back(scalar_of.template operator()<std::size_t>("craft_batch", &AttackPoolConfig::craft_batch));
    if (with_training) {
        t.push_back(scalar_of.template operator()<std::size_t>("warmup_epochs", &AttackPoolConfig::warmup_epochs));
        t.push_back(scalar_of.template operator()<bool>("refresh", &AttackPoolConfig::refresh));
    }
    return t;
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
         [](RunConfig& c, const std::string& v) {
             c.seed = parse_number<std::uint64_t>("seed", v);
             c.seed_set = true;
         }},
        TQ_FIELD("data.dataset", data.dataset, std::string),
        TQ_FIELD("data.train_size", data.train_size, std::size_t),
        TQ_FIELD("data.eval_size", data.eval_size, std::size_t),
        TQ_FIELD("data.image_size", data.image_size, std::size_t),
        TQ_FIELD("data.classes", data.classes, std::size_t),
        TQ_FIELD("data.data_dir", data.data_dir, std::string),
        TQ_FIELD("model.arch", arch, std::string),
        {"model.bits", [](const RunConfig& c) { return join<int>(c.bits, [](const int& b) { return std::to_string(b); }); },
         [](RunConfig& c, const std::string& v) { c.bits = parse_list<int>("model.bits", v); }},
        {"model.ensemble", [](const RunConfig& c) { return to_string(c.ensemble); },
         [](RunConfig& c, const std::string& v) { c.ensemble = parse_ensemble_mode(v); }},
        {"train.mode", [](const RunConfig& c) { return to_string(c.mode); },
         [](RunConfig& c, const std::string& v) { c.mode = parse_defense_mode(v); }},
        {"train.curriculum", [](const RunConfig& c) { return curriculum::to_string(c.curriculum); },
         [](RunConfig& c, const std::string& v) { c.curriculum = curriculum::parse_mode(v); }},
        TQ_FIELD("train.epochs", epochs, std::size_t),
        TQ_FIELD("train.batch_size", batch_size, std::size_t),
        TQ_FIELD("train.calibration_images", calibration_images, std::size_t),
        TQ_FIELD("train.out_dir", out_dir, std::string),
        TQ_FIELD("optim.lr", optim.lr, double),
        TQ_FIELD("optim.momentum", optim.momentum, double),
        TQ_FIELD("optim.weight_decay", optim.weight_decay, double),
        {"optim.milestones",
         [](const RunConfig& c) { return join<double>(c.optim.milestones, [](const double& m) { return fmt(m); }); },
         [](RunConfig& c, const std::string& v) { c.optim.milestones = parse_list<double>("optim.milestones", v); }},
        TQ_FIELD("optim.lr_decay", optim.lr_decay, double),
        TQ_FIELD("optim.grad_clip", optim.grad_clip, double),
        TQ_FIELD("loss.alpha", loss.alpha, double),
        TQ_FIELD("loss.beta", loss.beta, double),
        TQ_FIELD("loss.lambda_fdp", loss.lambda_fdp, double),
        TQ_FIELD("loss.lambda_gpdp", loss.lambda_gpdp, double),
        {"loss.taps", [](const RunConfig& c) { return join<std::string>(c.taps, [](const std::string& s) { return s; }); },
         [](RunConfig& c, const std::string& v) { c.taps = split(v, ','); }},
        TQ_FIELD("loss.binarize_percentile", metrics.binarize.q, double),
        TQ_FIELD("loss.binarize_sharpness", metrics.binarize.k, double),
        TQ_FIELD("loss.hog_cell", metrics.hog.cell, std::size_t),
        TQ_FIELD("loss.hog_block", metrics.hog.block, std::size_t),
        TQ_FIELD("loss.hog_bins", metrics.hog.bins, std::size_t),
        TQ_FIELD("loss.hog_softness", metrics.hog.softness, double),
    };
    static const std::vector<Field> all = [] {
        std::vector<Field> t = table;
        auto a = pool_fields("attack", &RunConfig::attack, true);
        auto e = pool_fields("eval_attack", &RunConfig::eval_attack, false);
        t.insert(t.end(), a.begin(), a.end());
        t.insert(t.end(), e.begin(), e.end());
        t.push_back(TQ_FIELD("eval.asr_images", eval.asr_images, std::size_t));
        t.push_back(TQ_FIELD("eval.align_images", eval.align_images, std::size_t));
        for (auto [name, member] : {std::pair{"sweep.alpha", &SweepConfig::alpha}, std::pair{"sweep.beta", &SweepConfig::beta},
                                    std::pair{"sweep.lambda_fdp", &SweepConfig::lambda_fdp},
                                    std::pair{"sweep.lambda_gpdp", &SweepConfig::lambda_gpdp}}) {
            const std::string key = name;
            t.push_back({key,
                         [member](const RunConfig& c) {
                             return join<double>(c.sweep.*member, [](const double& v) { return fmt(v); });
                         },
                         [key, member](RunConfig& c, const std::string& v) {
                             c.sweep.*member = parse_list<double>(key, v);
                         }});
        }
        return t;
    }();
    return all;
}

#undef TQ_FIELD

} // namespace

ConfigFile ConfigFile::parse(const std::string& text, const std::string& source) {
    ConfigFile f;
    std::stringstream ss(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(lineno);
        if (line.front() == '[') {
            if (line.back() != ']') throw InvalidArgument(where + ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) throw InvalidArgument(where + ": empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw InvalidArgument(where + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw InvalidArgument(where + ": empty key");
        const std::string full = section.empty() ? key : section + "." + key;
        if (!f.values_.emplace(full, trim(line.substr(eq + 1))).second) {
            throw InvalidArgument(where + ": duplicate key '" + full + "'");
        }
    }
    return f;
}

ConfigFile ConfigFile::load(const std::string& path) { return parse(binio::read_file(path), path); }

std::string to_string(DefenseMode m) {
    switch (m) {
    case DefenseMode::standard_qat: return "standard-qat";
    case DefenseMode::patch_augmented: return "patch-augmented";
    case DefenseMode::triqdef: return "triqdef";
    case DefenseMode::triqdef_no_fdp: return "triqdef-no-fdp";
    case DefenseMode::triqdef_no_gpdp: return "triqdef-no-gpdp";
    }
    return "triqdef";
}

DefenseMode parse_defense_mode(const std::string& s) {
    for (auto m : {DefenseMode::standard_qat, DefenseMode::patch_augmented, DefenseMode::triqdef,
                   DefenseMode::triqdef_no_fdp, DefenseMode::triqdef_no_gpdp}) {
        if (to_string(m) == s) return m;
    }
    throw InvalidArgument("unknown defense mode '" + s +
                          "' (expected standard-qat, patch-augmented, triqdef, triqdef-no-fdp or triqdef-no-gpdp)");
}

bool uses_patches(DefenseMode m) { return m != DefenseMode::standard_qat; }

void RunConfig::validate() const {
    if (!seed_set) throw InvalidArgument("config: 'seed' is mandatory");
    if (data.dataset != "synthetic-shapes" && data.dataset != "cifar10-subset") {
        throw InvalidArgument("config: unknown dataset '" + data.dataset + "'");
    }
    if (data.train_size == 0 || data.eval_size == 0) throw InvalidArgument("config: dataset sizes must be positive");
    if (bits.empty()) throw InvalidArgument("config: model.bits is empty");
    for (int b : bits) quant::validate_bits(b);
    for (std::size_t i = 1; i < bits.size(); ++i) {
        if (bits[i] >= bits[i - 1]) throw InvalidArgument("config: model.bits must be strictly descending");
    }
    if (epochs == 0 || batch_size == 0) throw InvalidArgument("config: epochs and batch_size must be positive");
    if (!(optim.lr > 0.0) || optim.momentum < 0.0 || optim.weight_decay < 0.0) {
        throw InvalidArgument("config: invalid optimizer settings");
    }
    loss.validate();
    perceptual::validate(metrics.binarize);
    perceptual::validate(metrics.hog);
    if (taps.empty()) throw InvalidArgument("config: loss.taps is empty");
    if (calibration_images == 0) throw InvalidArgument("config: calibration_images must be positive");
    if (uses_patches(mode) && attack.pool_dir.empty()) {
        if (attack.sizes.empty() || attack.locations.empty() || attack.source_bits.empty()) {
            throw InvalidArgument("config: attack pool needs sizes, locations and source_bits");
        }
        if (attack.warmup_epochs >= epochs) throw InvalidArgument("config: attack.warmup_epochs must be < epochs");
    }
    for (const AttackPoolConfig* pool : {&attack, &eval_attack}) {
        attacks::AttackConfig{pool->iterations, pool->step_size}.validate();
        if (pool->target_class < 0 || static_cast<std::size_t>(pool->target_class) >= data.classes) {
            throw InvalidArgument("config: patch target_class out of range");
        }
        for (const auto& [r, c] : pool->locations) {
            for (auto s : pool->sizes) {
                if (r + s > data.image_size || c + s > data.image_size) {
                    throw InvalidArgument("config: patch of size " + std::to_string(s) + " at " + std::to_string(r) +
                                          ":" + std::to_string(c) + " exceeds the image");
                }
            }
        }
        for (int b : pool->source_bits) {
            if (std::find(bits.begin(), bits.end(), b) == bits.end()) {
                throw InvalidArgument("config: patch source bit-width " + std::to_string(b) + " not in model.bits");
            }
        }
    }
    if (eval.asr_images == 0 || eval.align_images == 0) throw InvalidArgument("config: eval image counts must be positive");
}

std::string RunConfig::to_text() const {
    std::string out, section;
    for (const auto& f : fields()) {
        const auto dot = f.key.find('.');
        const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
        const std::string key = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
        if (sec != section) {
            out += "\n[" + sec + "]\n";
            section = sec;
        }
        out += key + " = " + f.get(*this) + "\n";
    }
    return out;
}

RunConfig RunConfig::from_file(const ConfigFile& f) {
    RunConfig c;
    for (const auto& [key, value] : f.values()) {
        auto it = std::find_if(fields().begin(), fields().end(), [&](const Field& d) { return d.key == key; });
        if (it == fields().end()) throw InvalidArgument("config: unknown key '" + key + "'");
        it->set(c, value);
    }
    return c;
}

RunConfig RunConfig::from_text(const std::string& text, const std::string& source) {
    return from_file(ConfigFile::parse(text, source));
}

RunConfig RunConfig::load(const std::string& path) { return from_file(ConfigFile::load(path)); }

} // namespace triqdef
