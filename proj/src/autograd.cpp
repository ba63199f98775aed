#include "triqdef/autograd.hpp"

#include <algorithm>
#include <atomic>

#include "triqdef/error.hpp"
#include "triqdef/ops.hpp"

namespace triqdef::ad {

namespace {

std::atomic<std::uint64_t> g_seq{0};
thread_local bool t_grad_enabled = true;
thread_local GradientTape* t_tape = nullptr;

std::shared_ptr<Node> new_node() {
    auto n = std::make_shared<Node>();
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    return n;
}

const Tensor& undefined_tensor() {
    static const Tensor t;
    return t;
}

} // namespace

const Tensor& Var::value() const {
    if (!node_) throw InvalidArgument("Var: access to undefined variable");
    return node_->value;
}
bool Var::requires_grad() const { return node_ && node_->requires_grad; }
bool Var::is_leaf() const { return node_ && !node_->op; }
std::string_view Var::op_name() const { return node_ && node_->op ? node_->op->name() : "leaf"; }
const Tensor& Var::grad() const { return node_ ? node_->grad : undefined_tensor(); }
std::uint64_t Var::id() const { return node_ ? node_->seq : ~0ULL; }

Var leaf(Tensor value, bool requires_grad) {
    if (!value.defined()) throw InvalidArgument("leaf: undefined tensor");
    if (!value.all_finite()) throw InvalidArgument("leaf: non-finite value in tensor " + shape_str(value.shape()));
    auto n = new_node();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    Var v(std::move(n));
    if (t_tape) t_tape->record(v);
    return v;
}

Var constant(Tensor value) {
    auto n = new_node();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var apply_with_value(OpPtr op, std::vector<Var> inputs, Tensor value) {
    bool needs = false;
    if (t_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    auto n = new_node();
    n->value = std::move(value);
    if (needs) {
        n->op = std::move(op);
        n->inputs = std::move(inputs);
        n->requires_grad = true;
    }
    Var v(std::move(n));
    if (needs && t_tape) t_tape->record(v);
    return v;
}

Var apply(OpPtr op, std::vector<Var> inputs) {
    std::vector<Tensor> vals;
    vals.reserve(inputs.size());
    for (const auto& in : inputs) vals.push_back(in.value());
    Tensor out = op->forward(vals);
    return apply_with_value(std::move(op), std::move(inputs), std::move(out));
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
GradModeGuard::GradModeGuard(bool enabled) : previous_(t_grad_enabled) { t_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { t_grad_enabled = previous_; }

GradientTape::GradientTape() : previous_(t_tape) { t_tape = this; }
GradientTape::~GradientTape() { t_tape = previous_; }
GradientTape* GradientTape::active() { return t_tape; }

void GradientTape::record(const Var& v) {
    index_.emplace(v.node(), nodes_.size());
    nodes_.push_back(v);
}

bool GradientTape::contains(const Var& v) const { return index_.count(v.node()) != 0; }

std::vector<Tensor> GradientTape::replay() const {
    std::vector<Tensor> out(nodes_.size());
    std::unordered_map<const Node*, std::size_t> pos;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const Node* n = nodes_[i].node();
        pos.emplace(n, i);
        if (!n->op) {
            out[i] = n->value;
            continue;
        }
        std::vector<Tensor> ins;
        ins.reserve(n->inputs.size());
        for (const auto& in : n->inputs) {
            auto it = pos.find(in.node());
            ins.push_back(it != pos.end() ? out[it->second] : in.value());
        }
        out[i] = n->op->forward(ins);
    }
    return out;
}

void GradientMap::set(const Var& leaf, Tensor grad) { grads_[leaf.node()] = std::move(grad); }

Tensor GradientMap::operator()(const Var& leaf) const {
    auto it = grads_.find(leaf.node());
    if (it != grads_.end()) return it->second;
    return Tensor::zeros(leaf.shape());
}

bool GradientMap::contains(const Var& leaf) const { return grads_.count(leaf.node()) != 0; }

namespace {

using NodeRef = std::shared_ptr<Node>;

// Nodes reachable from root through requires_grad edges, sorted so that every
// node precedes its inputs.
std::vector<NodeRef> reverse_topo(const Var& root) {
    std::vector<NodeRef> order;
    std::unordered_map<const Node*, bool> seen;
    std::vector<NodeRef> stack{root.node_ptr()};
    seen[root.node()] = true;
    while (!stack.empty()) {
        NodeRef n = std::move(stack.back());
        stack.pop_back();
        for (const auto& in : n->inputs) {
            if (!in.requires_grad()) continue;
            if (seen.emplace(in.node(), true).second) stack.push_back(in.node_ptr());
        }
        order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(), [](const NodeRef& a, const NodeRef& b) { return a->seq > b->seq; });
    return order;
}

using GradLookup = std::unordered_map<const Node*, Var>;

// Propagate seed from root. If `targets` is non-empty only paths leading to
// one of them are followed.
GradLookup run_backward(const Var& root, const Var& seed, const std::vector<Var>& targets,
                        bool create_graph, std::vector<NodeRef>* leaves_out) {
    auto order = reverse_topo(root);

    std::unordered_map<const Node*, bool> relevant;
    if (!targets.empty()) {
        for (const auto& t : targets) relevant[t.node()] = true;
        // Ascending creation order: inputs are decided before their consumers.
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            const Node* n = it->get();
            if (relevant.count(n)) continue;
            bool r = false;
            for (const auto& in : n->inputs) {
                auto jt = relevant.find(in.node());
                if (in.requires_grad() && jt != relevant.end() && jt->second) {
                    r = true;
                    break;
                }
            }
            relevant[n] = r;
        }
    }
    auto is_relevant = [&](const Node* n) {
        if (targets.empty()) return true;
        auto it = relevant.find(n);
        return it != relevant.end() && it->second;
    };

    GradModeGuard mode(create_graph);
    GradLookup grads;
    grads[root.node()] = seed;
    for (const NodeRef& n : order) {
        auto it = grads.find(n.get());
        if (it == grads.end()) continue;
        if (!n->op) {
            if (leaves_out) leaves_out->push_back(n);
            continue;
        }
        if (!is_relevant(n.get())) continue;
        std::vector<bool> needs(n->inputs.size());
        bool any = false;
        for (std::size_t i = 0; i < n->inputs.size(); ++i) {
            needs[i] = n->inputs[i].requires_grad() && is_relevant(n->inputs[i].node());
            any = any || needs[i];
        }
        if (!any) continue;
        const Var self(n);
        const Var g_out = it->second;
        auto in_grads = n->op->backward(self, g_out, n->inputs, needs);
        for (std::size_t i = 0; i < n->inputs.size(); ++i) {
            if (!needs[i]) continue;
            const Var& gi = in_grads.at(i);
            if (!gi.defined()) continue;
            if (gi.shape() != n->inputs[i].shape()) {
                throw ShapeError(std::string("backward of ") + std::string(n->op->name()) +
                                 ": gradient shape " + shape_str(gi.shape()) +
                                 " does not match input shape " + shape_str(n->inputs[i].shape()));
            }
            const Node* key = n->inputs[i].node();
            auto jt = grads.find(key);
            if (jt == grads.end()) {
                grads.emplace(key, gi);
            } else {
                jt->second = add(jt->second, gi);
            }
        }
        // Gradient of an interior node is no longer needed once propagated.
        if (targets.empty()) grads.erase(n.get());
    }
    return grads;
}

void require_scalar(const Var& loss, const char* who) {
    if (!loss.defined()) throw InvalidArgument(std::string(who) + ": undefined loss");
    if (loss.size() != 1) {
        throw ShapeError(std::string(who) + ": loss must be scalar, got shape " + shape_str(loss.shape()));
    }
}

} // namespace

GradientMap backward(const Var& loss) {
    require_scalar(loss, "backward");
    GradientMap out;
    if (!loss.requires_grad()) return out;
    std::vector<NodeRef> leaves;
    auto grads = run_backward(loss, constant(Tensor::full(loss.shape(), 1.0)), {}, false, &leaves);
    for (const NodeRef& n : leaves) {
        const Tensor& g = grads.at(n.get()).value();
        if (n->grad.defined()) {
            std::vector<double> acc = n->grad.to_vector();
            auto gv = g.values();
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gv[i];
            n->grad = Tensor(n->value.shape(), std::move(acc));
        } else {
            n->grad = g;
        }
        out.set(Var(n), g);
    }
    return out;
}

std::vector<Var> grad(const Var& loss, const std::vector<Var>& wrt, bool create_graph) {
    require_scalar(loss, "grad");
    std::vector<Var> out(wrt.size());
    if (!loss.requires_grad()) {
        for (std::size_t i = 0; i < wrt.size(); ++i) out[i] = constant(Tensor::zeros(wrt[i].shape()));
        return out;
    }
    auto grads = run_backward(loss, constant(Tensor::full(loss.shape(), 1.0)), wrt, create_graph, nullptr);
    for (std::size_t i = 0; i < wrt.size(); ++i) {
        auto it = grads.find(wrt[i].node());
        out[i] = it != grads.end() ? it->second : constant(Tensor::zeros(wrt[i].shape()));
    }
    return out;
}

Var grad_as_node(const Var& loss, const Var& wrt) {
    require_scalar(loss, "grad_as_node");
    if (!wrt.defined() || !wrt.requires_grad()) {
        throw InvalidArgument("grad_as_node: target does not require grad and is not on the tape");
    }
    if (!loss.requires_grad()) throw InvalidArgument("grad_as_node: loss is not on the tape");
    auto grads = run_backward(loss, constant(Tensor::full(loss.shape(), 1.0)), {wrt}, true, nullptr);
    auto it = grads.find(wrt.node());
    if (it == grads.end()) {
        throw InvalidArgument("grad_as_node: target node " + std::to_string(wrt.id()) +
                              " is not on the tape of the loss");
    }
    return it->second;
}

} // namespace triqdef::ad
