#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "doctest.h"
#include "triqdef/campaigns.hpp"
#include "triqdef/checkpoint.hpp"
#include "triqdef/cli.hpp"
#include "triqdef/error.hpp"

using namespace triqdef;
namespace fs = std::filesystem;

namespace {

// Small enough that a full train + evaluate cycle takes a few seconds.
const char* kTinyConfig = R"(seed = 3
[data]
train_size = 48
eval_size = 24
image_size = 16
[model]
bits = 32,4
[train]
mode = triqdef
epochs = 2
batch_size = 16
calibration_images = 16
[optim]
lr = 0.05
[loss]
taps = block1,block2
hog_cell = 2
[attack]
sizes = 3
locations = 0:0
source_bits = 32
iterations = 2
craft_images = 16
craft_batch = 8
warmup_epochs = 1
[eval_attack]
sizes = 4
locations = 8:8
source_bits = 32
iterations = 2
craft_images = 16
craft_batch = 8
[eval]
asr_images = 24
align_images = 8
)";

// kTinyConfig with the keys of `overrides` replaced.
ConfigFile tiny_file(const std::string& overrides = "") {
    ConfigFile base = ConfigFile::parse(kTinyConfig);
    const ConfigFile extra = ConfigFile::parse(overrides);
    for (const auto& [k, v] : extra.values()) base.set(k, v);
    return base;
}

RunConfig tiny(const std::string& overrides = "") { return RunConfig::from_file(tiny_file(overrides)); }

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& leaf = "") const { return (leaf.empty() ? path : path / leaf).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    for (std::string line; std::getline(ss, line);)
        if (!line.empty()) out.push_back(line);
    return out;
}

int cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
    args.insert(args.begin(), "triqdef");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
}

bool same_weights(const models::Weights& a, const models::Weights& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!a[i].identical(b[i])) return false;
    return true;
}

} // namespace

TEST_CASE("config text round-trips through the canonical form") {
    const RunConfig c = tiny("[sweep]\nalpha = 0.1,0.3\n");
    const std::string text = c.to_text();
    CHECK(RunConfig::from_text(text).to_text() == text);
    CHECK(c.bits == std::vector<int>{32, 4});
    CHECK(c.attack.locations == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}});
    CHECK(c.sweep.alpha == std::vector<double>{0.1, 0.3});
    CHECK(c.optim.momentum == 0.9);
    CHECK(c.optim.weight_decay == 1e-4);
    CHECK(c.optim.milestones == std::vector<double>{0.5, 0.75});
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config errors name the problem") {
    CHECK_THROWS_AS(RunConfig::from_text("[train]\nepochs = 3\nepochs = 4\n"), InvalidArgument);
    CHECK_THROWS_AS(RunConfig::from_text("[train]\nepohcs = 3\n"), InvalidArgument);
    CHECK_THROWS_AS(RunConfig::from_text("[train\n"), InvalidArgument);
    CHECK_THROWS_AS(RunConfig::from_text("[train]\nmode = adversarial\n"), InvalidArgument);
    CHECK_THROWS_AS(RunConfig::from_text("[train]\nepochs = many\n"), InvalidArgument);
    try {
        ConfigFile::parse("a = 1\nno equals sign\n", "my.ini");
        FAIL("expected a parse error");
    } catch (const InvalidArgument& e) {
        CHECK(std::string(e.what()).find("my.ini:2") != std::string::npos);
    }
    // the seed is mandatory
    CHECK_THROWS_AS(RunConfig::from_text("[train]\nepochs = 3\n").validate(), InvalidArgument);
    // patches must fit the image
    CHECK_THROWS_AS(tiny("[attack]\nlocations = 14:14\n").validate(), InvalidArgument);
    CHECK_THROWS_AS(tiny("[attack]\nsource_bits = 3\n").validate(), InvalidArgument);
    // comments and blank lines are ignored
    CHECK(RunConfig::from_text("# run\n\nseed = 5  # inline\n").seed == 5);
}

TEST_CASE("defense mode names") {
    for (auto m : {DefenseMode::standard_qat, DefenseMode::patch_augmented, DefenseMode::triqdef,
                   DefenseMode::triqdef_no_fdp, DefenseMode::triqdef_no_gpdp})
        CHECK(parse_defense_mode(to_string(m)) == m);
    CHECK(to_string(DefenseMode::standard_qat) == "standard-qat");
    CHECK_FALSE(uses_patches(DefenseMode::standard_qat));
    CHECK(uses_patches(DefenseMode::triqdef_no_gpdp));
}

TEST_CASE("synthetic shapes are deterministic under the seed") {
    DataConfig d;
    d.train_size = 20;
    d.eval_size = 8;
    d.image_size = 16;
    const auto a = data::load_dataset(d, 7);
    const auto b = data::load_dataset(d, 7);
    CHECK(a.train.images.identical(b.train.images));
    CHECK(a.train.labels == b.train.labels);
    CHECK(a.eval.images.identical(b.eval.images));
    CHECK_FALSE(a.train.images.identical(data::load_dataset(d, 8).train.images));
    CHECK(a.train.images.shape() == Shape{20, 3, 16, 16});
    for (double v : a.train.images.values()) CHECK((v >= 0.0 && v <= 1.0));
    std::vector<int> counts(4, 0);
    for (int y : a.train.labels) ++counts.at(static_cast<std::size_t>(y));
    CHECK(counts == std::vector<int>{5, 5, 5, 5});
}

TEST_CASE("CIFAR-10 records parse and truncation names file and offset") {
    TempDir dir("triqdef_test_cifar");
    std::string bytes;
    for (int r = 0; r < 3; ++r) {
        bytes.push_back(static_cast<char>(r == 0 ? 6 : r));
        for (int i = 0; i < 3072; ++i) bytes.push_back(static_cast<char>(i == 0 ? 255 : (r == 1 && i == 1 ? 51 : 0)));
    }
    const std::string path = dir.str("data_batch_1.bin");
    std::ofstream(path, std::ios::binary) << bytes;
    const auto d = data::read_cifar_batch(path);
    CHECK(d.size() == 3);
    CHECK(d.labels == std::vector<int>{6, 1, 2});
    CHECK(d.images.shape() == Shape{3, 3, 32, 32});
    CHECK(d.images[0] == 1.0);
    CHECK(d.images[3072 + 1] == doctest::Approx(51.0 / 255.0).epsilon(1e-15));

    std::ofstream(dir.str("short.bin"), std::ios::binary) << bytes.substr(0, 3073 + 100);
    try {
        data::read_cifar_batch(dir.str("short.bin"));
        FAIL("expected a data error");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("short.bin") != std::string::npos);
        CHECK(msg.find("3073") != std::string::npos);
    }
    std::string bad = bytes;
    bad[3073] = 12;
    std::ofstream(dir.str("bad.bin"), std::ios::binary) << bad;
    CHECK_THROWS_AS(data::read_cifar_batch(dir.str("bad.bin")), DataError);
    CHECK_THROWS_AS(data::read_cifar_batch(dir.str("missing.bin")), DataError);
}

TEST_CASE("stratified subset has per-class counts within one") {
    Rng rng(1);
    const auto d = data::synthetic_shapes(70, 8, 5, rng);
    for (std::size_t n : {10u, 23u, 37u}) {
        Rng r(2);
        const auto s = data::stratified_subset(d, n, r);
        CHECK(s.size() == n);
        std::vector<int> counts(5, 0);
        for (int y : s.labels) ++counts.at(static_cast<std::size_t>(y));
        CHECK(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) <= 1);
    }
}

TEST_CASE("constant-logit model accuracy is the class frequency") {
    const RunConfig c = tiny();
    const auto split = data::load_dataset(c.data, c.seed);
    auto s = training::init_state(c, split.train);
    for (auto& w : s.ensemble.master) w = Tensor::zeros(w.shape());
    s.ensemble.master.back() = Tensor({4}, {0.0, 0.0, 1.0, 0.0});
    double freq = 0.0;
    for (int y : split.eval.labels) freq += y == 2;
    freq /= static_cast<double>(split.eval.size());
    const auto acc = evaluation::evaluate_clean(s.ensemble, split.eval, {32});
    CHECK(acc.at(32) == doctest::Approx(freq));
    CHECK_THROWS_AS(evaluation::evaluate_clean(s.ensemble, split.eval, {2}), InvalidArgument);
}

TEST_CASE("standard-qat loss is the summed clean cross-entropy") {
    const RunConfig c = tiny("[train]\nmode = standard-qat\n[model]\nbits = 32,5,4\n");
    const auto split = data::load_dataset(c.data, c.seed);
    auto s = training::init_state(c, split.train);
    const auto m = training::train_step(s, split.train.head(16), 0.01);
    CHECK(m.l_total == m.l_clean);
    CHECK(m.l_fdp == 0.0);
    CHECK(m.fdp_terms == 0);
    CHECK(m.patch_id.empty());
}

TEST_CASE("triqdef step with two bit-widths and two taps counts 2 FDP terms and 1 GPDP pair") {
    RunConfig c = tiny();
    const auto split = data::load_dataset(c.data, c.seed);
    auto s = training::init_state(c, split.train);
    s.pool = training::craft_pool(s.ensemble, c.attack, split.train.head(8), 8, 1);
    REQUIRE(s.ensemble.active == std::vector<int>{32, 4});
    s.ensemble.epoch = c.attack.warmup_epochs;   // penalties on
    const auto m = training::train_step(s, split.train.head(16), 0.01);
    CHECK(m.fdp_terms == 2);
    CHECK(m.gpdp_pairs == 1);
    CHECK(m.l_total == doctest::Approx(m.l_clean + 0.8 * m.l_fdp + 0.5 * m.l_gpdp).epsilon(1e-12));
    CHECK_FALSE(m.patch_id.empty());
    const auto j = nlohmann::json::parse(m.to_json());
    for (const char* k : {"step", "epoch", "active_bits", "l_clean", "l_fdp", "l_gpdp", "l_total"}) CHECK(j.contains(k));
    s.pool.clear();
    CHECK_THROWS_AS(training::train_step(s, split.train.head(16), 0.01), InvalidArgument);
}

TEST_CASE("learning rate decays at half and three quarters of the budget") {
    RunConfig c = tiny();
    c.epochs = 8;
    CHECK(training::learning_rate(c, 3) == 0.05);
    CHECK(training::learning_rate(c, 4) == doctest::Approx(0.005));
    CHECK(training::learning_rate(c, 6) == doctest::Approx(0.0005));
}

TEST_CASE("seeded runs are bit-identical and resume matches the uninterrupted run") {
    const RunConfig c = tiny("[train]\nepochs = 3\n[model]\nbits = 32,5,4\n");
    const auto split = data::load_dataset(c.data, c.seed);
    auto a = training::init_state(c, split.train);
    training::train(a, split.train);
    auto b = training::init_state(c, split.train);
    training::train(b, split.train);
    const std::string bytes = checkpoint::encode(a);
    CHECK(bytes == checkpoint::encode(b));
    CHECK(bytes.rfind("TQCKPT01", 0) == 0);

    // stop after one epoch, save, load, finish
    TempDir dir("triqdef_test_resume");
    auto r = training::init_state(c, split.train);
    training::TrainOptions opt;
    opt.stop_after_epoch = 1;
    training::train(r, split.train, opt);
    checkpoint::save(dir.str("mid.tqc"), r);
    auto resumed = checkpoint::load(dir.str("mid.tqc"));
    training::train(resumed, split.train);
    CHECK(checkpoint::encode(resumed) == bytes);
    CHECK(same_weights(resumed.ensemble.master, a.ensemble.master));
}

TEST_CASE("checkpoint load then save is byte-identical and corruption is reported") {
    const RunConfig c = tiny("[train]\nepochs = 1\n[attack]\nwarmup_epochs = 0\n");
    const auto split = data::load_dataset(c.data, c.seed);
    auto s = training::init_state(c, split.train);
    training::train(s, split.train);
    const std::string bytes = checkpoint::encode(s);
    CHECK(checkpoint::encode(checkpoint::decode(bytes, "mem")) == bytes);
    CHECK_THROWS_AS(checkpoint::decode(bytes.substr(0, bytes.size() / 2), "mem"), DataError);
    CHECK_THROWS_AS(checkpoint::decode("TQCKPT02" + bytes.substr(8), "mem"), DataError);
    CHECK_THROWS_AS(checkpoint::load("/nonexistent/ckpt.tqc"), DataError);
}

TEST_CASE("transfer matrix cells, seen marking and JSON round trip") {
    const RunConfig c = tiny();
    const auto split = data::load_dataset(c.data, c.seed);
    auto s = training::init_state(c, split.train);
    auto pool = training::craft_pool(s.ensemble, c.attack, split.train.head(8), 8, 2);
    REQUIRE(pool.size() == 1);
    // one patch, two target bit-widths
    const auto r1 = evaluation::transfer_matrix(s.ensemble, pool, split.eval, {32, 4}, true, {});
    CHECK(r1.cells.size() == 2);
    CHECK_FALSE(r1.cells[0].seen);

    attacks::PatchSpec empty = pool[0];
    empty.id = "empty";
    empty.pixels = Tensor::zeros({3, 0, 0});
    pool.push_back(empty);
    const auto r = evaluation::transfer_matrix(s.ensemble, pool, split.eval, {32, 4}, false, {attacks::key_of(pool[0])});
    REQUIRE(r.cells.size() == 4);
    for (const auto& cell : r.cells) {
        CHECK((cell.asr >= 0.0 && cell.asr <= 1.0));
        if (cell.patch_id == "empty") CHECK(cell.asr == 0.0);
        CHECK(cell.seen == (cell.patch_id != "empty"));
    }
    const auto j = reports::transfer_json(r);
    CHECK(j.at("schema") == reports::kTransferSchema);
    CHECK(reports::transfer_from_json(nlohmann::json::parse(j.dump())) == r);
    auto broken = j;
    broken["schema"] = "triqdef.transfer/0";
    CHECK_THROWS_AS(reports::transfer_from_json(broken), DataError);
    const auto rows = lines_of(reports::transfer_csv(r));
    CHECK(rows.size() == 5);
    CHECK(rows[0] == "patch_id,source_bits,target_bits,seen,asr_fraction");
}

TEST_CASE("alignment of a bit-width with itself is 1 on every metric") {
    const RunConfig c = tiny();
    const auto split = data::load_dataset(c.data, c.seed);
    auto s = training::init_state(c, split.train);
    const auto entries = evaluation::alignment_report(s.ensemble, split.eval.head(4), {4, 4}, c.taps, nullptr, c.metrics);
    // 2 taps x 3 metrics for features, 3 metrics for gradients
    CHECK(entries.size() == 9);
    for (const auto& e : entries) CHECK(e.value == doctest::Approx(1.0).epsilon(1e-9));
    CHECK_THROWS_AS(evaluation::alignment_report(s.ensemble, split.eval.head(4), {4}, c.taps), InvalidArgument);
}

TEST_CASE("cli: usage errors exit 1 and missing files exit 2") {
    std::string out, err;
    CHECK(cli({}, &out, &err) == 1);
    CHECK(cli({"frobnicate"}, &out, &err) == 1);
    CHECK(err.find("train") != std::string::npos);
    CHECK(cli({"eval-clean"}, &out, &err) == 1);
    CHECK(cli({"--help"}, &out, &err) == 0);
    CHECK(cli({"eval-clean", "/nonexistent/x.tqc"}, &out, &err) == 2);
    CHECK(cli({"train", "/nonexistent/x.ini"}, &out, &err) == 2);
}

TEST_CASE("cli: train, eval-clean, transfer and align write their reports") {
    TempDir dir("triqdef_test_cli");
    std::ofstream(dir.str("run.ini")) << kTinyConfig;
    std::string out, err;
    REQUIRE(cli({"train", dir.str("run.ini"), "--out", dir.str("run")}, &out, &err) == 0);
    const std::string ckpt = dir.str("run/checkpoint.tqc");
    CHECK(fs::exists(ckpt));
    const auto metrics = lines_of(slurp(dir.str("run/metrics.ndjson")));
    CHECK(metrics.size() == 2 * (48 / 16));

    REQUIRE(cli({"eval-clean", ckpt, "--out", dir.str("clean")}, &out, &err) == 0);
    const auto rows = lines_of(out);
    REQUIRE(rows.size() == 3);   // header + one row per bit-width
    CHECK(rows[0] == "bits,top1_accuracy_fraction");
    CHECK(rows[1].rfind("4,", 0) == 0);
    CHECK(rows[2].rfind("32,", 0) == 0);
    CHECK(nlohmann::json::parse(slurp(dir.str("clean/clean.json"))).at("schema") == reports::kCleanSchema);

    REQUIRE(cli({"craft-pool", dir.str("run.ini"), "--out", dir.str("pool"), "--ckpt", ckpt, "--eval"}, &out, &err) ==
            0);
    REQUIRE(cli({"transfer", ckpt, "--pool", dir.str("pool"), "--out", dir.str("transfer")}, &out, &err) == 0);
    const auto tj = nlohmann::json::parse(slurp(dir.str("transfer/transfer.json")));
    const auto tr = reports::transfer_from_json(tj);
    CHECK(tr.cells.size() == 2);
    for (const auto& cell : tr.cells) CHECK_FALSE(cell.seen);
    CHECK(reports::transfer_json(tr) == tj);

    REQUIRE(cli({"align", ckpt, "--pool", dir.str("pool"), "--out", dir.str("align")}, &out, &err) == 0);
    CHECK(lines_of(out).size() == 1 + 9);
    CHECK(cli({"align", ckpt, "--pool", dir.str("pool"), "--patch-index", "5"}, &out, &err) == 1);

    // resuming a finished run with a different config is refused
    std::ofstream(dir.str("other.ini")) << tiny("[optim]\nmomentum = 0.5\n").to_text();
    CHECK(cli({"train", dir.str("other.ini"), "--out", dir.str("run"), "--resume", ckpt}, &out, &err) == 1);
    // --seed overrides the config
    CHECK(cli({"train", dir.str("run.ini"), "--out", dir.str("run2"), "--seed", "4"}, &out, &err) == 0);
    CHECK(RunConfig::load(dir.str("run2/config.ini")).seed == 4);
}

TEST_CASE("cli: ablate reports full, w/o FDP and w/o GPDP for both splits") {
    TempDir dir("triqdef_test_ablate");
    std::ofstream(dir.str("run.ini")) << kTinyConfig;
    std::string out, err;
    REQUIRE(cli({"ablate", dir.str("run.ini"), "--out", dir.str("abl")}, &out, &err) == 0);
    const auto j = nlohmann::json::parse(slurp(dir.str("abl/ablation.json")));
    CHECK(j.at("schema") == reports::kAblationSchema);
    const auto& rows = j.at("rows");
    REQUIRE(rows.size() == 6);
    std::vector<std::pair<std::string, std::string>> seen;
    for (const auto& r : rows) seen.emplace_back(r.at("variant"), r.at("split"));
    CHECK(seen == std::vector<std::pair<std::string, std::string>>{{"full", "seen"},
                                                                   {"full", "unseen"},
                                                                   {"w/o FDP", "seen"},
                                                                   {"w/o FDP", "unseen"},
                                                                   {"w/o GPDP", "seen"},
                                                                   {"w/o GPDP", "unseen"}});
    CHECK(lines_of(slurp(dir.str("abl/ablation.csv"))).size() == 7);
}

TEST_CASE("sweep varies one loss weight at a time") {
    const auto grid = campaigns::sweep_configs(tiny());
    CHECK(grid.size() == 12);
    CHECK(grid[0].first == "alpha=0.25");
    CHECK(grid[0].second.loss.alpha == 0.25);
    CHECK(grid[0].second.loss.beta == 1.0);
    CHECK(grid[11].first == "lambda_gpdp=1");
    const auto abl = campaigns::ablation_configs(tiny());
    CHECK(abl[1].second.mode == DefenseMode::triqdef_no_fdp);
}
