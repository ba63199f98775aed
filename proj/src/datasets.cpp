#include "triqdef/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "triqdef/binio.hpp"
#include "triqdef/error.hpp"

namespace triqdef::data {

namespace {

constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
constexpr std::size_t kCifarRecord = 1 + kCifarPixels;
constexpr std::size_t kCifarClasses = 10;

// Shape membership in coordinates normalized by the shape radius.
bool inside(std::size_t kind, double u, double v) {
    const double au = std::abs(u), av = std::abs(v);
    switch (kind) {
    case 0: return u * u + v * v <= 1.0;                                       // disk
    case 1: return std::max(au, av) <= 0.8;                                    // square
    case 2: return v >= -0.85 && v <= 0.85 && au <= 0.5 * (v + 0.85);          // triangle, apex up
    case 3: return (au <= 0.25 && av <= 0.9) || (av <= 0.25 && au <= 0.9);    // plus
    case 4: {                                                                  // ring
        const double r = std::sqrt(u * u + v * v);
        return r >= 0.55 && r <= 1.0;
    }
    case 5: return au + av <= 1.0;                                             // diamond
    case 6: return au <= 0.9 && av <= 0.9 && static_cast<int>(std::floor((v + 0.9) / 0.36)) % 2 == 0; // stripes
    case 7: return au <= 0.9 && av <= 0.9 && (std::abs(u - v) <= 0.3 || std::abs(u + v) <= 0.3);    // cross
    default: return false;
    }
}

} // namespace

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
    const std::size_t per = size() == 0 ? 0 : images.size() / size();
    std::vector<double> px;
    px.reserve(indices.size() * per);
    Dataset out;
    out.classes = classes;
    for (auto i : indices) {
        if (i >= size()) throw InvalidArgument("Dataset::subset: index out of range");
        px.insert(px.end(), images.data() + i * per, images.data() + (i + 1) * per);
        out.labels.push_back(labels[i]);
    }
    Shape s = images.shape();
    s[0] = indices.size();
    out.images = Tensor(std::move(s), std::move(px));
    return out;
}

Dataset Dataset::head(std::size_t n) const {
    std::vector<std::size_t> idx(std::min(n, size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return subset(idx);
}

Dataset synthetic_shapes(std::size_t n, std::size_t image_size, std::size_t classes, Rng& rng) {
    if (classes < 2 || classes > kMaxShapeClasses) {
        throw InvalidArgument("synthetic-shapes: classes must be in [2, " + std::to_string(kMaxShapeClasses) + "]");
    }
    if (image_size < 8) throw InvalidArgument("synthetic-shapes: image_size must be at least 8");
    const std::size_t S = image_size;
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
    rng.shuffle(labels);

    std::vector<double> px(n * 3 * S * S);
    for (std::size_t i = 0; i < n; ++i) {
        const double side = static_cast<double>(S);
        const double radius = rng.uniform(0.22, 0.34) * side;
        const double cy = rng.uniform(0.35, 0.65) * side, cx = rng.uniform(0.35, 0.65) * side;
        double fg[3], bg[3];
        for (int c = 0; c < 3; ++c) {
            fg[c] = rng.uniform(0.5, 1.0);
            bg[c] = rng.uniform(0.0, 0.35);
        }
        double* img = px.data() + i * 3 * S * S;
        for (std::size_t y = 0; y < S; ++y) {
            for (std::size_t x = 0; x < S; ++x) {
                const double u = (static_cast<double>(x) + 0.5 - cx) / radius;
                const double v = (static_cast<double>(y) + 0.5 - cy) / radius;
                const bool on = inside(static_cast<std::size_t>(labels[i]), u, v);
                for (int c = 0; c < 3; ++c) {
                    const double noise = 0.05 * rng.normal();
                    img[(c * S + y) * S + x] = std::clamp((on ? fg[c] : bg[c]) + noise, 0.0, 1.0);
                }
            }
        }
    }
    Dataset d;
    d.images = Tensor({n, 3, S, S}, std::move(px));
    d.labels = std::move(labels);
    d.classes = classes;
    return d;
}

Dataset read_cifar_batch(const std::string& path) {
    const std::string bytes = binio::read_file(path);
    if (bytes.size() % kCifarRecord != 0) {
        throw DataError(path + ": truncated record at offset " +
                        std::to_string(bytes.size() / kCifarRecord * kCifarRecord) + " (file size " +
                        std::to_string(bytes.size()) + " is not a multiple of " + std::to_string(kCifarRecord) + ")");
    }
    const std::size_t n = bytes.size() / kCifarRecord;
    Dataset d;
    d.classes = kCifarClasses;
    d.labels.resize(n);
    std::vector<double> px(n * kCifarPixels);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = i * kCifarRecord;
        const auto label = static_cast<unsigned char>(bytes[off]);
        if (label >= kCifarClasses) {
            throw DataError(path + ": invalid label " + std::to_string(label) + " at offset " + std::to_string(off));
        }
        d.labels[i] = label;
        for (std::size_t k = 0; k < kCifarPixels; ++k) {
            px[i * kCifarPixels + k] = static_cast<unsigned char>(bytes[off + 1 + k]) / 255.0;
        }
    }
    d.images = Tensor({n, 3, kCifarSide, kCifarSide}, std::move(px));
    return d;
}

Dataset stratified_subset(const Dataset& d, std::size_t n, Rng& rng) {
    if (n > d.size()) {
        throw InvalidArgument("stratified_subset: requested " + std::to_string(n) + " of " +
                              std::to_string(d.size()) + " samples");
    }
    std::vector<std::vector<std::size_t>> by_class(d.classes);
    for (std::size_t i = 0; i < d.size(); ++i) by_class.at(d.labels[i]).push_back(i);
    for (auto& c : by_class) rng.shuffle(c);
    // Round-robin over classes in a shuffled order keeps counts within one.
    std::vector<std::size_t> order(d.classes);
    for (std::size_t c = 0; c < d.classes; ++c) order[c] = c;
    rng.shuffle(order);
    std::vector<std::size_t> picked, cursor(d.classes, 0);
    while (picked.size() < n) {
        bool progressed = false;
        for (auto c : order) {
            if (picked.size() == n) break;
            if (cursor[c] < by_class[c].size()) {
                picked.push_back(by_class[c][cursor[c]++]);
                progressed = true;
            }
        }
        if (!progressed) break;
    }
    rng.shuffle(picked);
    return d.subset(picked);
}

std::string resolve_cifar_dir(const DataConfig& cfg) {
    std::string root = cfg.data_dir;
    if (root.empty()) {
        const char* env = std::getenv("TRIQDEF_DATA_DIR");
        if (!env || !*env) throw DataError("cifar10-subset: set data.data_dir or TRIQDEF_DATA_DIR");
        root = env;
    }
    namespace fs = std::filesystem;
    if (fs::exists(fs::path(root) / "data_batch_1.bin")) return root;
    const fs::path nested = fs::path(root) / "cifar-10-batches-bin";
    if (fs::exists(nested / "data_batch_1.bin")) return nested.string();
    throw DataError((fs::path(root) / "data_batch_1.bin").string() + ": CIFAR-10 batch file not found");
}

Split load_dataset(const DataConfig& cfg, std::uint64_t seed) {
    Rng root(seed);
    Split s;
    if (cfg.dataset == "synthetic-shapes") {
        Rng tr = root.fork(1), ev = root.fork(2);
        s.train = synthetic_shapes(cfg.train_size, cfg.image_size, cfg.classes, tr);
        s.eval = synthetic_shapes(cfg.eval_size, cfg.image_size, cfg.classes, ev);
        return s;
    }
    if (cfg.dataset == "cifar10-subset") {
        if (cfg.image_size != kCifarSide || cfg.classes != kCifarClasses) {
            throw InvalidArgument("cifar10-subset: requires image_size 32 and classes 10");
        }
        const std::string dir = resolve_cifar_dir(cfg);
        std::vector<Dataset> parts;
        for (int b = 1; b <= 5; ++b) {
            parts.push_back(read_cifar_batch((std::filesystem::path(dir) / ("data_batch_" + std::to_string(b) + ".bin")).string()));
        }
        Dataset all;
        all.classes = kCifarClasses;
        std::vector<double> px;
        for (const auto& p : parts) {
            px.insert(px.end(), p.images.values().begin(), p.images.values().end());
            all.labels.insert(all.labels.end(), p.labels.begin(), p.labels.end());
        }
        all.images = Tensor({all.labels.size(), 3, kCifarSide, kCifarSide}, std::move(px));
        const Dataset test = read_cifar_batch((std::filesystem::path(dir) / "test_batch.bin").string());
        Rng tr = root.fork(1), ev = root.fork(2);
        s.train = stratified_subset(all, cfg.train_size, tr);
        s.eval = stratified_subset(test, cfg.eval_size, ev);
        return s;
    }
    throw InvalidArgument("unknown dataset '" + cfg.dataset + "'");
}

} // namespace triqdef::data
