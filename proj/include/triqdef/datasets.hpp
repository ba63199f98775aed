#pragma once

// Image classification datasets: seeded synthetic shapes and a stratified
// subset of the CIFAR-10 binary release.

#include <cstdint>
#include <string>
#include <vector>

#include "triqdef/config.hpp"
#include "triqdef/rng.hpp"
#include "triqdef/tensor.hpp"

namespace triqdef::data {

struct Dataset {
    Tensor images;              // [N,C,H,W] in [0,1]
    std::vector<int> labels;
    std::size_t classes = 0;

    std::size_t size() const { return labels.size(); }
    Dataset subset(const std::vector<std::size_t>& indices) const;
    /// First n samples.
    Dataset head(std::size_t n) const;
};

struct Split {
    Dataset train;
    Dataset eval;
};

/// Largest class count synthetic_shapes can draw.
inline constexpr std::size_t kMaxShapeClasses = 8;

/// n images of geometric shapes (class = shape kind) with random colour,
/// placement, size and pixel noise; classes are balanced.
Dataset synthetic_shapes(std::size_t n, std::size_t image_size, std::size_t classes, Rng& rng);

/// Parses one CIFAR-10 binary batch (records of 1 label byte + 3072 pixel
/// bytes, channel-major). Throws DataError naming the file and offset.
Dataset read_cifar_batch(const std::string& path);

/// Seeded subset with per-class counts differing by at most one.
Dataset stratified_subset(const Dataset& d, std::size_t n, Rng& rng);

/// CIFAR-10 directory: cfg.data_dir, else $TRIQDEF_DATA_DIR; the batch files
/// may sit directly inside or under cifar-10-batches-bin/.
std::string resolve_cifar_dir(const DataConfig& cfg);

/// Train and eval splits for the configured dataset.
Split load_dataset(const DataConfig& cfg, std::uint64_t seed);

} // namespace triqdef::data
