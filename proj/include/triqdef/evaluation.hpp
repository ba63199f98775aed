#pragma once

// Evaluation campaigns over a trained ensemble: clean accuracy, patch
// transfer across bit-widths, and feature/gradient alignment between
// variants.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "triqdef/attacks.hpp"
#include "triqdef/curriculum.hpp"
#include "triqdef/datasets.hpp"
#include "triqdef/losses.hpp"

namespace triqdef::evaluation {

/// Top-1 accuracy per requested bit-width. Throws InvalidArgument for a
/// bit-width without quantization specs.
std::map<int, double> evaluate_clean(const EnsembleState& e, const data::Dataset& d, const std::vector<int>& bits);

struct TransferCell {
    std::string patch_id;
    int source_bits = 32;
    int target_bits = 32;
    double asr = 0.0;
    bool seen = false;
    bool operator==(const TransferCell&) const = default;
};

struct SimilarityEntry {
    int bits_a = 32;
    int bits_b = 32;
    std::string kind;      // "feature" or "gradient"
    std::string tap;       // tap name, "input" for gradients
    std::string metric;    // "cosine", "edge-iou" or "hog-cosine"
    double value = 0.0;
    bool operator==(const SimilarityEntry&) const = default;
};

struct TransferReport {
    bool targeted = true;
    std::vector<TransferCell> cells;
    std::map<int, double> clean_accuracy;
    std::vector<SimilarityEntry> similarity;
    bool operator==(const TransferReport&) const = default;

    /// Mean ASR per (source, target) over the cells matching `split`
    /// ("all", "seen" or "unseen").
    std::map<std::pair<int, int>, double> mean_asr(const std::string& split = "all") const;
    /// Mean ASR over cells with source != target; NaN when there are none.
    double mean_cross_bit_asr(const std::string& split = "all") const;
};

/// ASR of every (patch, target bit-width) pair on d, with each patch marked
/// seen or unseen against the training manifest.
TransferReport transfer_matrix(const EnsembleState& e, const std::vector<attacks::PatchSpec>& pool,
                               const data::Dataset& d, const std::vector<int>& bits, bool targeted,
                               const std::vector<attacks::PatchKey>& training_manifest);

/// Pairwise raw cosine, hard edge IoU and hard HOG cosine between variants,
/// for tap features and for input gradients of the cross-entropy, averaged
/// over the batch. Inputs are patched when `patch` is given. A bit-width
/// listed twice is compared with itself. Requires at least two entries.
std::vector<SimilarityEntry> alignment_report(const EnsembleState& e, const data::Dataset& batch,
                                              const std::vector<int>& bits, const std::vector<std::string>& taps,
                                              const attacks::PatchSpec* patch = nullptr,
                                              const losses::MetricParams& m = {});

/// Mean of the entries of one (kind, metric) over all pairs and taps.
double mean_similarity(const std::vector<SimilarityEntry>& entries, const std::string& kind,
                       const std::string& metric);

} // namespace triqdef::evaluation
