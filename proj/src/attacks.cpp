#include "triqdef/attacks.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>

#include <json.hpp>

#include "triqdef/binio.hpp"
#include "triqdef/error.hpp"
#include "triqdef/ops.hpp"
#include "triqdef/rng.hpp"

namespace triqdef::attacks {

using ad::Var;
using nlohmann::json;

namespace {

constexpr const char* kPatchMagic = "TQPATCH1";
constexpr int kPatchVersion = 1;
constexpr const char* kManifestSchema = "triqdef.pool/1";
// Evaluation batch size; bounds the memory of a single forward pass.
constexpr std::size_t kEvalChunk = 256;

void check_batch(const Tensor& images, const std::vector<int>& labels, const char* who) {
    if (images.rank() != 4) throw ShapeError(std::string(who) + ": images must be [N,C,H,W]");
    if (labels.size() != images.dim(0)) throw ShapeError(std::string(who) + ": label count does not match images");
}

void check_fits(const Tensor& x, const PatchSpec& p) {
    if (x.rank() != 4) throw ShapeError("apply_patch: images must be [N,C,H,W], got " + shape_str(x.shape()));
    if (p.channels() != x.dim(1)) {
        throw ShapeError("apply_patch: patch has " + std::to_string(p.channels()) + " channels, images " +
                         std::to_string(x.dim(1)));
    }
    if (x.dim(2) != p.image_height || x.dim(3) != p.image_width) {
        throw ShapeError("apply_patch: patch '" + p.id + "' was made for " + std::to_string(p.image_height) + "x" +
                         std::to_string(p.image_width) + " images, got " + std::to_string(x.dim(2)) + "x" +
                         std::to_string(x.dim(3)));
    }
    if (p.row + p.height() > x.dim(2) || p.col + p.width() > x.dim(3)) {
        throw ShapeError("apply_patch: " + std::to_string(p.height()) + "x" + std::to_string(p.width()) +
                         " patch at (" + std::to_string(p.row) + "," + std::to_string(p.col) +
                         ") exceeds image " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
    }
}

Tensor take_rows(const Tensor& images, const std::vector<std::size_t>& idx) {
    const std::size_t per = images.size() / images.dim(0);
    std::vector<double> out;
    out.reserve(idx.size() * per);
    for (auto i : idx) out.insert(out.end(), images.data() + i * per, images.data() + (i + 1) * per);
    Shape s = images.shape();
    s[0] = idx.size();
    return Tensor(std::move(s), std::move(out));
}

Tensor slice_rows(const Tensor& images, std::size_t start, std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    return take_rows(images, idx);
}

json header_json(const PatchSpec& p) {
    json h;
    h["format"] = kPatchMagic;
    h["version"] = kPatchVersion;
    h["id"] = p.id;
    h["channels"] = p.channels();
    h["height"] = p.height();
    h["width"] = p.width();
    h["image_height"] = p.image_height;
    h["image_width"] = p.image_width;
    h["row"] = p.row;
    h["col"] = p.col;
    h["source_bits"] = p.source_bits;
    h["family"] = to_string(p.family);
    h["target_class"] = p.target_class ? json(*p.target_class) : json(nullptr);
    return h;
}

json entry_json(const PatchSpec& p, const std::string& file) {
    json e = header_json(p);
    e.erase("format");
    e.erase("version");
    e["file"] = file;
    return e;
}

} // namespace

std::string to_string(Family f) { return f == Family::universal ? "universal" : "per-image-targeted"; }

Family parse_family(const std::string& s) {
    if (s == "per-image-targeted" || s == "lavan") return Family::per_image_targeted;
    if (s == "universal" || s == "gap") return Family::universal;
    throw InvalidArgument("unknown patch family '" + s + "' (expected per-image-targeted or universal)");
}

Tensor PatchSpec::mask() const {
    std::vector<double> m(image_height * image_width, 0.0);
    for (std::size_t i = 0; i < height(); ++i)
        for (std::size_t j = 0; j < width(); ++j) m[(row + i) * image_width + col + j] = 1.0;
    return Tensor({image_height, image_width}, std::move(m));
}

void PatchSpec::validate() const {
    if (!pixels.defined() || pixels.rank() != 3) throw InvalidArgument("patch '" + id + "': pixels must be [C,h,w]");
    if (row + height() > image_height || col + width() > image_width) {
        throw InvalidArgument("patch '" + id + "': rectangle exceeds the " + std::to_string(image_height) + "x" +
                              std::to_string(image_width) + " image");
    }
    for (double v : pixels.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("patch '" + id + "': pixel outside [0,1]");
    }
}

bool PatchSpec::operator==(const PatchSpec& o) const {
    return id == o.id && pixels.identical(o.pixels) && image_height == o.image_height &&
           image_width == o.image_width && row == o.row && col == o.col && source_bits == o.source_bits &&
           family == o.family && target_class == o.target_class;
}

PatchKey key_of(const PatchSpec& p) { return {p.height(), p.width(), p.row, p.col, p.source_bits}; }

bool is_seen(const PatchSpec& p, const std::vector<PatchKey>& training_manifest) {
    return std::find(training_manifest.begin(), training_manifest.end(), key_of(p)) != training_manifest.end();
}

void AttackConfig::validate() const {
    if (iterations < 1) throw InvalidArgument("attack: iterations must be >= 1");
    if (!(step_size > 0.0)) throw InvalidArgument("attack: step_size must be > 0");
}

Classifier classifier(const models::VariantHandle& h) {
    return [h](const Var& x) { return models::forward_with_taps(h, x).logits; };
}

Tensor apply_patch(const Tensor& x, const PatchSpec& p) {
    check_fits(x, p);
    std::vector<double> out = x.to_vector();
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < p.height(); ++i)
                for (std::size_t j = 0; j < p.width(); ++j)
                    out[((n * C + c) * H + p.row + i) * W + p.col + j] = p.pixels[(c * p.height() + i) * p.width() + j];
    return Tensor(x.shape(), std::move(out));
}

PatchSpec craft_patch(const Classifier& model, const Tensor& images, const std::vector<int>& labels,
                      const AttackConfig& cfg, const PatchRequest& req) {
    cfg.validate();
    check_batch(images, labels, "craft_patch");
    if (images.dim(0) == 0) throw InvalidArgument("craft_patch: no images");
    if (cfg.targeted && !req.target_class) throw InvalidArgument("craft_patch: targeted attack without target class");

    PatchSpec p;
    p.id = req.id;
    p.image_height = images.dim(2);
    p.image_width = images.dim(3);
    p.row = req.row;
    p.col = req.col;
    p.source_bits = req.source_bits;
    p.family = req.family;
    p.target_class = cfg.targeted ? req.target_class : std::nullopt;

    Rng rng(cfg.seed);
    const std::size_t C = images.dim(1);
    const std::size_t psize = C * req.height * req.width;
    std::vector<double> pix(psize);
    for (auto& v : pix) v = rng.uniform();
    p.pixels = Tensor({C, req.height, req.width}, pix);
    p.validate();
    if (psize == 0) return p;

    const std::size_t N = images.dim(0);
    const std::size_t bs = cfg.batch_size == 0 ? N : std::min(cfg.batch_size, N);
    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    std::size_t cursor = N;   // forces a shuffle before the first step

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        std::vector<std::size_t> idx;
        if (bs == N) {
            idx = order;
        } else {
            for (std::size_t k = 0; k < bs; ++k) {
                if (cursor == N) {
                    rng.shuffle(order);
                    cursor = 0;
                }
                idx.push_back(order[cursor++]);
            }
        }
        std::vector<std::size_t> rows(idx.size(), req.row), cols(idx.size(), req.col);
        if (cfg.random_location) {
            for (std::size_t k = 0; k < idx.size(); ++k) {
                rows[k] = rng.below(p.image_height - req.height + 1);
                cols[k] = rng.below(p.image_width - req.width + 1);
            }
        }
        std::vector<int> y(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) y[k] = cfg.targeted ? *req.target_class : labels[idx[k]];

        const Var patch = ad::leaf(p.pixels);
        const Var logits = model(ad::paste_patch(ad::constant(take_rows(images, idx)), patch, rows, cols));
        const std::size_t classes = logits.shape().at(1);
        if (cfg.targeted && (*req.target_class < 0 || static_cast<std::size_t>(*req.target_class) >= classes)) {
            throw InvalidArgument("craft_patch: target class " + std::to_string(*req.target_class) +
                                  " out of range for " + std::to_string(classes) + " classes");
        }
        // Targeted: ascend log p(target) = -CE(target). Untargeted: ascend CE(label).
        Var objective = models::clean_ce(logits, y);
        if (cfg.targeted) objective = ad::neg(objective);
        const Tensor g = ad::grad(objective, {patch})[0].value();
        for (std::size_t k = 0; k < psize; ++k) {
            const double s = g[k] > 0.0 ? 1.0 : (g[k] < 0.0 ? -1.0 : 0.0);
            pix[k] = std::clamp(pix[k] + cfg.step_size * s, 0.0, 1.0);
        }
        p.pixels = Tensor({C, req.height, req.width}, pix);
    }
    return p;
}

std::vector<int> predict(const Classifier& model, const Tensor& images) {
    ad::NoGradGuard ng;
    std::vector<int> out;
    const std::size_t N = images.dim(0);
    for (std::size_t s = 0; s < N; s += kEvalChunk) {
        const std::size_t n = std::min(kEvalChunk, N - s);
        const Tensor chunk = (s == 0 && n == N) ? images : slice_rows(images, s, n);
        auto pred = models::predict(model(ad::constant(chunk)).value());
        out.insert(out.end(), pred.begin(), pred.end());
    }
    return out;
}

double attack_success_rate(const Classifier& model, const Tensor& images, const std::vector<int>& labels,
                           const PatchSpec& p, bool targeted) {
    check_batch(images, labels, "attack_success_rate");
    if (targeted && !p.target_class) throw InvalidArgument("attack_success_rate: targeted score for untargeted patch");
    const auto clean = predict(model, images);
    const auto patched = predict(model, apply_patch(images, p));
    std::size_t correct = 0, success = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (clean[i] != labels[i]) continue;
        ++correct;
        if (targeted ? patched[i] == *p.target_class : patched[i] != labels[i]) ++success;
    }
    return correct == 0 ? 0.0 : static_cast<double>(success) / static_cast<double>(correct);
}

double target_rate(const Classifier& model, const Tensor& images, int target_class, const PatchSpec* p) {
    if (images.dim(0) == 0) return 0.0;
    const auto pred = predict(model, p ? apply_patch(images, *p) : images);
    return static_cast<double>(std::count(pred.begin(), pred.end(), target_class)) /
           static_cast<double>(pred.size());
}

std::string encode_patch(const PatchSpec& p) {
    p.validate();
    binio::Writer w;
    w.bytes(kPatchMagic, 8);
    w.str(header_json(p).dump());
    w.u64(p.pixels.size());
    for (double v : p.pixels.values()) w.f64(v);
    return w.buffer();
}

PatchSpec decode_patch(const std::string& bytes, const std::string& source) {
    binio::Reader r(bytes, source);
    r.expect_magic(kPatchMagic);
    json h;
    try {
        h = json::parse(r.str());
        if (h.at("version").get<int>() != kPatchVersion) r.fail("unsupported patch version");
        PatchSpec p;
        p.id = h.at("id").get<std::string>();
        p.image_height = h.at("image_height").get<std::size_t>();
        p.image_width = h.at("image_width").get<std::size_t>();
        p.row = h.at("row").get<std::size_t>();
        p.col = h.at("col").get<std::size_t>();
        p.source_bits = h.at("source_bits").get<int>();
        p.family = parse_family(h.at("family").get<std::string>());
        if (!h.at("target_class").is_null()) p.target_class = h.at("target_class").get<int>();
        const Shape shape{h.at("channels").get<std::size_t>(), h.at("height").get<std::size_t>(),
                          h.at("width").get<std::size_t>()};
        const std::uint64_t n = r.u64();
        if (n != shape_numel(shape)) r.fail("pixel count does not match the header shape");
        std::vector<double> v(n);
        for (auto& x : v) x = r.f64();
        if (!r.at_end()) r.fail("trailing bytes after pixel payload");
        p.pixels = Tensor(shape, std::move(v));
        p.validate();
        return p;
    } catch (const json::exception& e) {
        r.fail(std::string("malformed patch header: ") + e.what());
    } catch (const InvalidArgument& e) {
        r.fail(e.what());
    }
}

void save_patch(const std::string& path, const PatchSpec& p) { binio::write_file(path, encode_patch(p)); }

PatchSpec load_patch(const std::string& path) { return decode_patch(binio::read_file(path), path); }

void save_pool(const std::string& dir, const std::vector<PatchSpec>& patches) {
    std::filesystem::create_directories(dir);
    json m;
    m["schema"] = kManifestSchema;
    m["patches"] = json::array();
    for (std::size_t i = 0; i < patches.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "patch_%03zu.tqp", i);
        save_patch((std::filesystem::path(dir) / name).string(), patches[i]);
        m["patches"].push_back(entry_json(patches[i], name));
    }
    binio::write_file((std::filesystem::path(dir) / "manifest.json").string(), m.dump(2) + "\n");
}

namespace {

json read_manifest(const std::string& dir) {
    const std::string path = (std::filesystem::path(dir) / "manifest.json").string();
    json m;
    try {
        m = json::parse(binio::read_file(path));
        if (m.at("schema").get<std::string>() != kManifestSchema) {
            throw DataError(path + ": unsupported manifest schema");
        }
        m.at("patches").get_ref<const json::array_t&>();
    } catch (const json::exception& e) {
        throw DataError(path + ": malformed manifest: " + e.what());
    }
    return m;
}

} // namespace

std::vector<PatchSpec> load_pool(const std::string& dir) {
    std::vector<PatchSpec> out;
    const json manifest = read_manifest(dir);
    for (const auto& e : manifest.at("patches")) {
        out.push_back(load_patch((std::filesystem::path(dir) / e.at("file").get<std::string>()).string()));
    }
    return out;
}

std::vector<PatchKey> load_manifest_keys(const std::string& dir) {
    std::vector<PatchKey> out;
    const json manifest = read_manifest(dir);
    try {
        for (const auto& e : manifest.at("patches")) {
            out.push_back({e.at("height").get<std::size_t>(), e.at("width").get<std::size_t>(),
                           e.at("row").get<std::size_t>(), e.at("col").get<std::size_t>(),
                           e.at("source_bits").get<int>()});
        }
    } catch (const json::exception& e) {
        throw DataError(dir + "/manifest.json: malformed entry: " + e.what());
    }
    return out;
}

} // namespace triqdef::attacks
