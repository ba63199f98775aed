#include "triqdef/evaluation.hpp"

#include <cmath>
#include <limits>

#include "triqdef/error.hpp"
#include "triqdef/ops.hpp"
#include "triqdef/perceptual.hpp"

namespace triqdef::evaluation {

using ad::Var;

namespace {

void require_variant(const EnsembleState& e, int bits) {
    if (!e.quant.count(bits)) {
        throw InvalidArgument("no quantization specs for the " + std::to_string(bits) + "-bit variant");
    }
}

// Sample n of a batch tensor [N,...] as its own tensor.
Tensor sample(const Tensor& t, std::size_t n) {
    const std::size_t per = t.size() / t.dim(0);
    Shape s = t.shape();
    s[0] = 1;
    return Tensor(s, std::vector<double>(t.data() + n * per, t.data() + (n + 1) * per));
}

// Per-sample raw cosine, edge IoU and HOG cosine of two [N,C,H,W] batches;
// the structural metrics use the channel mean.
void compare(const Tensor& a, const Tensor& b, const losses::MetricParams& m, double& cos, double& iou, double& hog) {
    const std::size_t N = a.dim(0);
    const Tensor ma = perceptual::channel_mean(a), mb = perceptual::channel_mean(b);
    const Shape map{a.dim(2), a.dim(3)};
    cos = iou = hog = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        cos += perceptual::cosine_similarity(sample(a, n), sample(b, n));
        const Tensor sa = sample(ma, n).reshaped(map), sb = sample(mb, n).reshaped(map);
        iou += perceptual::hard_edge_iou(sa, sb, m.binarize.q);
        hog += perceptual::hard_hog_cosine(sa, sb, m.hog);
    }
    cos /= static_cast<double>(N);
    iou /= static_cast<double>(N);
    hog /= static_cast<double>(N);
}

} // namespace

std::map<int, double> evaluate_clean(const EnsembleState& e, const data::Dataset& d, const std::vector<int>& bits) {
    std::map<int, double> out;
    if (d.size() == 0) throw InvalidArgument("evaluate_clean: empty dataset");
    for (int b : bits) {
        require_variant(e, b);
        const auto pred = attacks::predict(attacks::classifier(e.variant(b)), d.images);
        std::size_t hit = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == d.labels[i];
        out[b] = static_cast<double>(hit) / static_cast<double>(d.size());
    }
    return out;
}

std::map<std::pair<int, int>, double> TransferReport::mean_asr(const std::string& split) const {
    std::map<std::pair<int, int>, std::pair<double, std::size_t>> acc;
    for (const auto& c : cells) {
        if (split == "seen" && !c.seen) continue;
        if (split == "unseen" && c.seen) continue;
        auto& a = acc[{c.source_bits, c.target_bits}];
        a.first += c.asr;
        ++a.second;
    }
    std::map<std::pair<int, int>, double> out;
    for (const auto& [k, a] : acc) out[k] = a.first / static_cast<double>(a.second);
    return out;
}

double TransferReport::mean_cross_bit_asr(const std::string& split) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& c : cells) {
        if (c.source_bits == c.target_bits) continue;
        if (split == "seen" && !c.seen) continue;
        if (split == "unseen" && c.seen) continue;
        sum += c.asr;
        ++n;
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
}

TransferReport transfer_matrix(const EnsembleState& e, const std::vector<attacks::PatchSpec>& pool,
                               const data::Dataset& d, const std::vector<int>& bits, bool targeted,
                               const std::vector<attacks::PatchKey>& training_manifest) {
    TransferReport r;
    r.targeted = targeted;
    r.clean_accuracy = evaluate_clean(e, d, bits);
    for (const auto& p : pool) {
        const bool seen = attacks::is_seen(p, training_manifest);
        for (int b : bits) {
            const double asr = attacks::attack_success_rate(attacks::classifier(e.variant(b)), d.images, d.labels, p,
                                                            targeted && p.target_class.has_value());
            r.cells.push_back({p.id, p.source_bits, b, asr, seen});
        }
    }
    return r;
}

std::vector<SimilarityEntry> alignment_report(const EnsembleState& e, const data::Dataset& batch,
                                              const std::vector<int>& bits, const std::vector<std::string>& taps,
                                              const attacks::PatchSpec* patch, const losses::MetricParams& m) {
    if (bits.size() < 2) throw InvalidArgument("alignment_report: need at least two bit-widths");
    if (batch.size() == 0) throw InvalidArgument("alignment_report: empty batch");
    const Tensor inputs = patch ? attacks::apply_patch(batch.images, *patch) : batch.images;

    std::vector<std::map<std::string, Tensor>> features(bits.size());
    std::vector<Tensor> grads(bits.size());
    for (std::size_t i = 0; i < bits.size(); ++i) {
        require_variant(e, bits[i]);
        const Var x = ad::leaf(inputs);
        auto out = models::forward_with_taps(e.variant(bits[i]), x);
        for (const auto& t : taps) {
            auto it = out.taps.find(t);
            if (it == out.taps.end()) throw InvalidArgument("alignment_report: model has no tap '" + t + "'");
            features[i][t] = it->second.value();
        }
        grads[i] = ad::grad(models::clean_ce(out.logits, batch.labels), {x})[0].value();
    }

    std::vector<SimilarityEntry> out;
    auto push = [&](std::size_t i, std::size_t j, const std::string& kind, const std::string& tap, const Tensor& a,
                    const Tensor& b) {
        double cos, iou, hog;
        compare(a, b, m, cos, iou, hog);
        out.push_back({bits[i], bits[j], kind, tap, "cosine", cos});
        out.push_back({bits[i], bits[j], kind, tap, "edge-iou", iou});
        out.push_back({bits[i], bits[j], kind, tap, "hog-cosine", hog});
    };
    for (std::size_t i = 0; i < bits.size(); ++i) {
        for (std::size_t j = i + 1; j < bits.size(); ++j) {
            for (const auto& t : taps) push(i, j, "feature", t, features[i].at(t), features[j].at(t));
            push(i, j, "gradient", "input", grads[i], grads[j]);
        }
    }
    return out;
}

double mean_similarity(const std::vector<SimilarityEntry>& entries, const std::string& kind, const std::string& metric) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& s : entries) {
        if (s.kind == kind && s.metric == metric) {
            sum += s.value;
            ++n;
        }
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
}

} // namespace triqdef::evaluation
