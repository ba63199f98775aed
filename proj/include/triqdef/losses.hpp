#pragma once

// Feature and gradient disalignment penalties and the combined objective.

#include <map>
#include <string>

#include "triqdef/autograd.hpp"
#include "triqdef/perceptual.hpp"

namespace triqdef::losses {

struct LossWeights {
    double alpha = 0.5;        // edge overlap (SoftDice) weight
    double beta = 1.0;         // HOG cosine weight
    double lambda_fdp = 0.8;
    double lambda_gpdp = 0.5;

    void validate() const;
};

struct MetricParams {
    perceptual::SoftBinarizeParams binarize;
    perceptual::HogParams hog;
};

/// Activations of each bit-width variant at each tap: bits -> tap -> [N,C,H,W].
using TapFeatures = std::map<int, std::map<std::string, ad::Var>>;
/// Input gradient of each variant's loss: bits -> [N,C,H,W].
using InputGrads = std::map<int, ad::Var>;

struct PenaltyResult {
    ad::Var value;             // scalar
    std::size_t pairs = 0;     // unordered bit pairs
    std::size_t terms = 0;     // pairs x taps
};

/// Batch mean of alpha * SoftDice(edges(a), edges(b)) + beta * cos(HOG(a), HOG(b))
/// for two batches [N,C,H,W]; channels are averaged first.
ad::Var pair_similarity(const ad::Var& a, const ad::Var& b, const LossWeights& w, const MetricParams& m = {});

/// Sum of pair_similarity over taps and unordered pairs of bit-widths.
/// Throws InvalidArgument with fewer than two bit-widths or mismatched taps.
PenaltyResult fdp_loss(const TapFeatures& features, const LossWeights& w, const MetricParams& m = {});

/// Same penalty over input gradients. Each gradient must be a graph node
/// (produced with grad_as_node) so the penalty can be differentiated.
PenaltyResult gpdp_loss(const InputGrads& grads, const LossWeights& w, const MetricParams& m = {});

/// sum_b clean_ce[b] + lambda_fdp * fdp + lambda_gpdp * gpdp. Undefined
/// penalties count as zero.
ad::Var total_loss(const std::map<int, ad::Var>& clean_ce, const ad::Var& fdp, const ad::Var& gpdp,
                   const LossWeights& w);

} // namespace triqdef::losses
