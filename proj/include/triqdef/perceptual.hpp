#pragma once

// Edge- and orientation-based similarity metrics.
//
// Differentiable metrics take either a single map [H,W] or a batch of
// single-channel maps [N,1,H,W]; batch versions return one value per sample.
// The hard metrics operate on plain tensors and are used for analysis only.

#include <vector>

#include "triqdef/autograd.hpp"

namespace triqdef::perceptual {

struct SoftBinarizeParams {
    double q = 85.0;     // percentile in (0, 100)
    double k = 100.0;    // sigmoid sharpness
};

enum class HardBinning {
    nearest,   // whole magnitude to the closest bin centre (the soft limit)
    linear,    // split between the two closest centres
};

struct HogParams {
    std::size_t cell = 4;      // pixels per cell side
    std::size_t block = 2;     // cells per block side
    std::size_t bins = 9;      // unsigned orientation bins over [0, pi)
    double softness = 1.0;     // Gaussian width in units of the bin width
    HardBinning hard_binning = HardBinning::linear;
};

void validate(const SoftBinarizeParams& p);
void validate(const HogParams& p);

/// Linear-interpolation percentile of the flattened values, q in [0, 100].
double percentile(std::span<const double> values, double q);

/// sqrt(gx^2 + gy^2 + 1e-12) with 3x3 Sobel kernels and replicate padding.
ad::Var sobel_magnitude(const ad::Var& a);
Tensor sobel_magnitude(const Tensor& a);

/// Test hook: while active on this thread, records every binarization
/// threshold computed, and after replay() hands the recorded values back in
/// the same order instead of recomputing them. Lets finite-difference checks
/// hold thresholds fixed the way the analytic gradient does.
class ThresholdRecorder {
public:
    ThresholdRecorder();
    ~ThresholdRecorder();
    ThresholdRecorder(const ThresholdRecorder&) = delete;
    ThresholdRecorder& operator=(const ThresholdRecorder&) = delete;

    void replay() { replaying_ = true; next_ = 0; }
    double resolve(double computed);
    static ThresholdRecorder* active();

private:
    std::vector<double> values_;
    std::size_t next_ = 0;
    bool replaying_ = false;
    ThresholdRecorder* previous_;
};

/// sigmoid(k (a - tau)) for a given constant tau.
ad::Var binarize_at(const ad::Var& a, double tau, double k);
/// sigmoid(k (a - tau)) with tau the q-th percentile of a (held constant).
ad::Var soft_binarize(const ad::Var& a, const SoftBinarizeParams& p = {});
/// Same with a separate tau for each sample of a batch [N,...].
ad::Var soft_binarize_per_sample(const ad::Var& a, const SoftBinarizeParams& p = {});

inline constexpr double kDiceEps = 1e-6;
/// 2 sum(a b) / (sum a + sum b + 1e-6) over all elements.
ad::Var soft_dice(const ad::Var& a, const ad::Var& b);
/// Per-sample dice of two batches [N,...]; returns [N].
ad::Var soft_dice_per_sample(const ad::Var& a, const ad::Var& b);

/// Soft HOG descriptor: [H,W] -> [D], [N,1,H,W] -> [N,D].
ad::Var soft_hog(const ad::Var& a, const HogParams& p = {});
/// Hard-binned HOG descriptor with the same layout as soft_hog.
Tensor hard_hog(const Tensor& a, const HogParams& p = {});
/// Descriptor length for an H x W map.
std::size_t hog_length(std::size_t h, std::size_t w, const HogParams& p = {});

/// u.v / (|u| |v| + 1e-12) for vectors of equal size; [N,D] x [N,D] -> [N]
/// in the row-wise version.
ad::Var cosine_similarity(const ad::Var& u, const ad::Var& v);
ad::Var cosine_similarity_rows(const ad::Var& u, const ad::Var& v);
double cosine_similarity(const Tensor& u, const Tensor& v);

/// IoU of Sobel maps each binarized above its own q-th percentile. An empty
/// union counts as a perfect match.
double hard_edge_iou(const Tensor& a, const Tensor& b, double q = 85.0);
/// Cosine of hard HOG descriptors.
double hard_hog_cosine(const Tensor& a, const Tensor& b, const HogParams& p = {});

/// Mean over channels: [N,C,H,W] -> [N,1,H,W].
ad::Var channel_mean(const ad::Var& x);
Tensor channel_mean(const Tensor& x);

} // namespace triqdef::perceptual
