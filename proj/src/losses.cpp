#include "triqdef/losses.hpp"

#include <vector>

#include "triqdef/error.hpp"
#include "triqdef/ops.hpp"

namespace triqdef::losses {

using ad::Var;
namespace pc = perceptual;

void LossWeights::validate() const {
    if (alpha < 0 || beta < 0 || lambda_fdp < 0 || lambda_gpdp < 0) {
        throw InvalidArgument("loss weights must be non-negative");
    }
}

namespace {

// Per-variant metric inputs, computed once and shared by every pair.
struct Signature {
    Var edges;   // soft-binarized Sobel map [N,1,H,W]
    Var hog;     // [N,D]
};

Signature signature(const Var& x, const MetricParams& m) {
    if (x.shape().size() != 4) {
        throw ShapeError("perceptual penalty: expected [N,C,H,W] activations, got " + shape_str(x.shape()));
    }
    const Var mono = pc::channel_mean(x);
    return {pc::soft_binarize_per_sample(pc::sobel_magnitude(mono), m.binarize), pc::soft_hog(mono, m.hog)};
}

Var pair_term(const Signature& a, const Signature& b, const LossWeights& w) {
    const Var dice = pc::soft_dice_per_sample(a.edges, b.edges);
    const Var cos = pc::cosine_similarity_rows(a.hog, b.hog);
    return ad::mean(ad::add(ad::mul_scalar(dice, w.alpha), ad::mul_scalar(cos, w.beta)));
}

Var accumulate(const Var& acc, const Var& term) { return acc.defined() ? ad::add(acc, term) : term; }

} // namespace

Var pair_similarity(const Var& a, const Var& b, const LossWeights& w, const MetricParams& m) {
    if (a.shape() != b.shape()) {
        throw ShapeError("pair_similarity: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
    }
    return pair_term(signature(a, m), signature(b, m), w);
}

PenaltyResult fdp_loss(const TapFeatures& features, const LossWeights& w, const MetricParams& m) {
    w.validate();
    if (features.size() < 2) throw InvalidArgument("fdp_loss: need at least two bit-widths");
    const auto& taps0 = features.begin()->second;
    if (taps0.empty()) throw InvalidArgument("fdp_loss: no taps");
    std::map<int, std::map<std::string, Signature>> sig;
    for (const auto& [bits, taps] : features) {
        if (taps.size() != taps0.size()) throw InvalidArgument("fdp_loss: variants expose different tap sets");
        for (const auto& [name, f] : taps) {
            if (!taps0.count(name)) throw InvalidArgument("fdp_loss: tap '" + name + "' missing from some variant");
            sig[bits].emplace(name, signature(f, m));
        }
    }
    // Unordered pairs in ascending bit order, taps in name order.
    PenaltyResult r;
    Var total;
    for (auto i = sig.begin(); i != sig.end(); ++i) {
        for (auto j = std::next(i); j != sig.end(); ++j) {
            ++r.pairs;
            for (const auto& [name, s] : i->second) {
                total = accumulate(total, pair_term(s, j->second.at(name), w));
                ++r.terms;
            }
        }
    }
    r.value = total;
    return r;
}

PenaltyResult gpdp_loss(const InputGrads& grads, const LossWeights& w, const MetricParams& m) {
    w.validate();
    if (grads.size() < 2) throw InvalidArgument("gpdp_loss: need at least two bit-widths");
    std::map<int, Signature> sig;
    for (const auto& [bits, g] : grads) {
        if (!g.defined() || !g.requires_grad()) {
            throw InvalidArgument("gpdp_loss: gradient of the " + std::to_string(bits) +
                                  "-bit variant is not on an active tape (use grad_as_node)");
        }
        sig.emplace(bits, signature(g, m));
    }
    PenaltyResult r;
    Var total;
    for (auto i = sig.begin(); i != sig.end(); ++i) {
        for (auto j = std::next(i); j != sig.end(); ++j) {
            total = accumulate(total, pair_term(i->second, j->second, w));
            ++r.pairs;
            ++r.terms;
        }
    }
    r.value = total;
    return r;
}

Var total_loss(const std::map<int, Var>& clean_ce, const Var& fdp, const Var& gpdp, const LossWeights& w) {
    w.validate();
    if (clean_ce.empty()) throw InvalidArgument("total_loss: no clean loss terms");
    Var total;
    for (const auto& [bits, ce] : clean_ce) {
        if (ce.size() != 1) throw ShapeError("total_loss: clean loss must be scalar");
        total = accumulate(total, ce);
    }
    if (fdp.defined() && w.lambda_fdp != 0.0) total = ad::add(total, ad::mul_scalar(fdp, w.lambda_fdp));
    if (gpdp.defined() && w.lambda_gpdp != 0.0) total = ad::add(total, ad::mul_scalar(gpdp, w.lambda_gpdp));
    return total;
}

} // namespace triqdef::losses
