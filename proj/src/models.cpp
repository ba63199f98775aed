#include "triqdef/models.hpp"

#include <cmath>

#include "triqdef/curriculum.hpp"
#include "triqdef/error.hpp"
#include "triqdef/ops.hpp"

namespace triqdef::models {

using ad::Var;

ModelDef ModelDef::make(const std::string& arch, std::size_t in_channels, std::size_t image_size,
                        std::size_t classes) {
    ModelDef d;
    d.arch = arch;
    d.in_channels = in_channels;
    d.image_size = image_size;
    d.classes = classes;
    if (arch == "tinycnn-s") {
        d.blocks = {{16, true}, {32, true}, {64, false}};
    } else if (arch == "tinycnn-m") {
        d.blocks = {{32, true}, {64, true}, {128, false}};
    } else {
        throw InvalidArgument("unknown architecture '" + arch + "' (expected tinycnn-s or tinycnn-m)");
    }
    if (in_channels == 0 || classes < 2) throw InvalidArgument("model: need at least one channel and two classes");
    std::size_t side = image_size;
    for (const auto& b : d.blocks) {
        if (b.pool) side /= 2;
    }
    if (side == 0) throw InvalidArgument("model: image too small for the pooling stages");

    std::size_t c = in_channels;
    for (std::size_t i = 0; i < d.blocks.size(); ++i) {
        const std::string n = std::to_string(i + 1);
        const std::size_t o = d.blocks[i].out_channels;
        d.params.push_back({"conv" + n + ".weight", {o, c, 3, 3}, true, c * 9});
        d.params.push_back({"conv" + n + ".bias", {o}, false, c * 9});
        d.taps.push_back("block" + n);
        d.activation_sites.push_back("act" + n);
        c = o;
    }
    d.activation_sites.push_back("gap");
    d.params.push_back({"fc.weight", {classes, c}, true, c});
    d.params.push_back({"fc.bias", {classes}, false, c});
    return d;
}

std::size_t ModelDef::param_index(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].name == name) return i;
    throw InvalidArgument("model: no parameter named '" + name + "'");
}

std::size_t ModelDef::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += shape_numel(p.shape);
    return n;
}

Weights init_weights(const ModelDef& def, Rng& rng) {
    Weights w;
    for (const auto& p : def.params) {
        std::vector<double> v(shape_numel(p.shape), 0.0);
        if (p.quantize) {
            const double sd = std::sqrt(2.0 / static_cast<double>(p.fan_in));
            for (auto& x : v) x = sd * rng.normal();
        }
        w.emplace_back(p.shape, std::move(v));
    }
    return w;
}

std::vector<quant::WeightEntry> weight_entries(const ModelDef& def, const Weights& w) {
    if (w.size() != def.params.size()) throw InvalidArgument("model: weight count does not match the architecture");
    std::vector<quant::WeightEntry> out;
    for (std::size_t i = 0; i < w.size(); ++i) out.push_back({def.params[i].name, w[i], def.params[i].quantize});
    return out;
}

namespace {

const quant::QuantSpec& lookup(const std::map<std::string, quant::QuantSpec>& specs, const std::string& name,
                               int bits) {
    static const quant::QuantSpec identity = quant::QuantSpec::identity();
    if (bits == quant::kFullPrecision) return identity;
    auto it = specs.find(name);
    if (it == specs.end()) {
        throw InvalidArgument("model: no " + std::to_string(bits) + "-bit quantization spec for '" + name + "'");
    }
    return it->second;
}

} // namespace

ForwardOutput forward(const ModelDef& def, const std::vector<Var>& params, const quant::ModelQuant& q, const Var& x,
                      const ForwardOptions& opt) {
    if (params.size() != def.params.size()) throw InvalidArgument("forward: parameter count mismatch");
    const Shape& xs = x.shape();
    if (xs.size() != 4 || xs[1] != def.in_channels || xs[2] != def.image_size || xs[3] != def.image_size) {
        throw ShapeError("forward: input " + shape_str(xs) + " does not match " + def.arch + " input [N," +
                         std::to_string(def.in_channels) + "," + std::to_string(def.image_size) + "," +
                         std::to_string(def.image_size) + "]");
    }
    auto weight = [&](std::size_t i) {
        const auto& p = def.params[i];
        if (!p.quantize) return params[i];
        return quant::fake_quantize(params[i], lookup(q.weights, p.name, q.bits));
    };
    auto activation = [&](const Var& a, const std::string& site) {
        if (opt.observer) opt.observer->observe(site, a.value());
        if (!opt.quantize_activations) return a;
        return quant::fake_quantize(a, lookup(q.activations, site, q.bits));
    };

    ForwardOutput out;
    const std::size_t n = xs[0];
    Var h = x;
    for (std::size_t i = 0; i < def.blocks.size(); ++i) {
        const std::size_t o = def.blocks[i].out_channels;
        h = ad::conv2d(h, weight(2 * i), {1, 1});
        h = ad::add(h, ad::reshape(params[2 * i + 1], {1, o, 1, 1}));
        h = activation(ad::relu(h), def.activation_sites[i]);
        if (def.blocks[i].pool) h = ad::max_pool2d(h, 2);
        out.taps.emplace(def.taps[i], h);
    }
    const Shape& hs = h.shape();
    h = ad::reshape(ad::mul_scalar(ad::sum_to(h, {n, hs[1], 1, 1}), 1.0 / static_cast<double>(hs[2] * hs[3])),
                    {n, hs[1]});
    h = activation(h, "gap");
    const std::size_t fc = def.params.size() - 2;
    out.logits = ad::add(ad::matmul(h, ad::transpose(weight(fc))), params[fc + 1]);
    return out;
}

ForwardOutput forward_with_taps(const VariantHandle& h, const Var& x, const std::vector<Var>* params,
                                const ForwardOptions& opt) {
    if (!h.state) throw InvalidArgument("forward_with_taps: empty variant handle");
    const EnsembleState& s = *h.state;
    auto qi = s.quant.find(h.bits);
    if (qi == s.quant.end()) {
        throw InvalidArgument("forward_with_taps: " + std::to_string(h.bits) + "-bit variant is not active");
    }
    if (params) return forward(s.def, *params, qi->second, x, opt);
    std::vector<Var> consts;
    for (const auto& w : s.weights_for(h.bits)) consts.push_back(ad::constant(w));
    return forward(s.def, consts, qi->second, x, opt);
}

Var clean_ce(const Var& logits, const std::vector<int>& labels) {
    const std::size_t k = logits.shape().at(1);
    if (labels.size() != logits.shape()[0]) throw ShapeError("clean_ce: label count does not match the batch");
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw InvalidArgument("clean_ce: label " + std::to_string(y) + " out of range for " + std::to_string(k) +
                                  " classes");
        }
    }
    return ad::mean(ad::softmax_cross_entropy(logits, ad::one_hot(labels, k)));
}

Var clean_ce(const VariantHandle& h, const Var& x, const std::vector<int>& labels, const std::vector<Var>* params) {
    return clean_ce(forward_with_taps(h, x, params).logits, labels);
}

std::vector<int> predict(const Tensor& logits) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (logits[i * k + j] > logits[i * k + best]) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

std::vector<int> predict(const VariantHandle& h, const Tensor& x) {
    ad::NoGradGuard ng;
    return predict(forward_with_taps(h, ad::constant(x)).logits.value());
}

} // namespace triqdef::models
