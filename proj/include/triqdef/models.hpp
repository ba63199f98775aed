#pragma once

// Small CNNs with named feature taps, evaluated as fake-quantized variants
// of one set of master weights.

#include <map>
#include <string>
#include <vector>

#include "triqdef/autograd.hpp"
#include "triqdef/quant.hpp"
#include "triqdef/rng.hpp"

namespace triqdef {
struct EnsembleState;
}

namespace triqdef::models {

struct ParamDef {
    std::string name;
    Shape shape;
    bool quantize = true;       // false for biases
    std::size_t fan_in = 1;
};

struct ConvBlock {
    std::size_t out_channels;
    bool pool;                  // 2x2 max pool after the activation
};

struct ModelDef {
    std::string arch;
    std::size_t in_channels = 3;
    std::size_t image_size = 32;
    std::size_t classes = 4;
    std::vector<ConvBlock> blocks;
    std::vector<ParamDef> params;
    std::vector<std::string> taps;               // one per conv block
    std::vector<std::string> activation_sites;   // after each ReLU and after global pooling

    /// "tinycnn-s" or "tinycnn-m". Throws InvalidArgument for other names.
    static ModelDef make(const std::string& arch, std::size_t in_channels, std::size_t image_size,
                         std::size_t classes);
    std::size_t param_index(const std::string& name) const;
    std::size_t parameter_count() const;
    bool operator==(const ModelDef& o) const {
        return arch == o.arch && in_channels == o.in_channels && image_size == o.image_size && classes == o.classes;
    }
};

/// Parameter values, index-aligned with ModelDef::params.
using Weights = std::vector<Tensor>;

/// He-normal weights, zero biases.
Weights init_weights(const ModelDef& def, Rng& rng);
std::vector<quant::WeightEntry> weight_entries(const ModelDef& def, const Weights& w);

struct ForwardOutput {
    ad::Var logits;                          // [N, classes]
    std::map<std::string, ad::Var> taps;     // tap -> [N,C,H,W]
};

struct ForwardOptions {
    bool quantize_activations = true;
    /// Records max |activation| per site before quantization when set.
    quant::ActivationObserver* observer = nullptr;
};

/// Forward pass with each quantized weight and activation passed through
/// fake_quantize according to q.
ForwardOutput forward(const ModelDef& def, const std::vector<ad::Var>& params, const quant::ModelQuant& q,
                      const ad::Var& x, const ForwardOptions& opt = {});

/// One bit-width variant of an ensemble.
struct VariantHandle {
    const EnsembleState* state = nullptr;
    int bits = quant::kFullPrecision;
};

/// forward() of the variant. With params == nullptr the weights enter as
/// constants; otherwise params are the (shared) weight leaves to use.
ForwardOutput forward_with_taps(const VariantHandle& h, const ad::Var& x,
                                const std::vector<ad::Var>* params = nullptr, const ForwardOptions& opt = {});

/// Mean softmax cross-entropy over the batch. Throws on out-of-range labels.
ad::Var clean_ce(const ad::Var& logits, const std::vector<int>& labels);
ad::Var clean_ce(const VariantHandle& h, const ad::Var& x, const std::vector<int>& labels,
                 const std::vector<ad::Var>* params = nullptr);

/// Argmax per row of a [N,K] tensor (first index on ties).
std::vector<int> predict(const Tensor& logits);
/// Predictions of a variant on a batch, without building a graph.
std::vector<int> predict(const VariantHandle& h, const Tensor& x);

} // namespace triqdef::models
