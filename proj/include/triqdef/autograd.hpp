#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every op's backward rule is itself written with differentiable ops, so when
// a gradient is requested with create_graph the result is an ordinary graph
// node that can be differentiated again (double backward).

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "triqdef/tensor.hpp"

namespace triqdef::ad {

class Node;
class Var;

/// One differentiable operation kind. Stateless apart from its attributes.
class Op {
public:
    virtual ~Op() = default;
    virtual std::string_view name() const = 0;
    /// Recompute the output value from input values (used by tape replay).
    virtual Tensor forward(std::span<const Tensor> inputs) const = 0;
    /// Vector-Jacobian product. Entries of the result for which needs[i] is
    /// false may be left undefined.
    virtual std::vector<Var> backward(const Var& output, const Var& grad_output,
                                      std::span<const Var> inputs,
                                      const std::vector<bool>& needs) const = 0;
};

using OpPtr = std::shared_ptr<const Op>;

/// Graph handle. Cheap to copy; shares the underlying node.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    bool requires_grad() const;
    bool is_leaf() const;
    std::string_view op_name() const;
    /// Gradient accumulated on this leaf by backward(); undefined tensor if none.
    const Tensor& grad() const;
    std::uint64_t id() const;

    const Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

class Node {
public:
    OpPtr op;                   // null for leaves
    std::vector<Var> inputs;    // kept even when they do not require grad
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::uint64_t seq = 0;      // creation order, used as topological key
};

/// Leaf node. Rejects non-finite values.
Var leaf(Tensor value, bool requires_grad = true);
/// Constant (non-differentiable) node; no finiteness check.
Var constant(Tensor value);
/// Run `op` on the inputs and record the result in the graph.
Var apply(OpPtr op, std::vector<Var> inputs);
/// Same as apply() but with a precomputed forward value.
Var apply_with_value(OpPtr op, std::vector<Var> inputs, Tensor value);

/// True while ops record parents (default). Thread-local.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled);
    ~GradModeGuard();
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool previous_;
};

/// Ordered record of nodes created while the tape is active on this thread.
///
/// replay() re-executes every recorded op from the current leaf values in
/// creation order, which for unchanged leaves reproduces the forward pass
/// bit for bit.
class GradientTape {
public:
    GradientTape();
    ~GradientTape();
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;

    const std::vector<Var>& nodes() const { return nodes_; }
    bool contains(const Var& v) const;
    /// Recomputed values, index-aligned with nodes().
    std::vector<Tensor> replay() const;

    static GradientTape* active();
    void record(const Var& v);

private:
    std::vector<Var> nodes_;
    std::unordered_map<const Node*, std::size_t> index_;
    GradientTape* previous_;
};

/// Gradients keyed by leaf. Lookup of a leaf that received no gradient
/// yields zeros of the leaf's shape.
class GradientMap {
public:
    void set(const Var& leaf, Tensor grad);
    Tensor operator()(const Var& leaf) const;
    bool contains(const Var& leaf) const;
    std::size_t size() const { return grads_.size(); }

private:
    std::unordered_map<const Node*, Tensor> grads_;
};

/// Gradients of a scalar loss with respect to every reachable leaf that
/// requires grad. Also accumulates into each leaf's grad().
GradientMap backward(const Var& loss);

/// Gradients of scalar loss w.r.t. the given nodes. When create_graph is set
/// the returned Vars are differentiable graph nodes.
std::vector<Var> grad(const Var& loss, const std::vector<Var>& wrt, bool create_graph = false);

/// d loss / d wrt as a differentiable node (create_graph semantics).
/// Throws if wrt does not take part in the computation of loss.
Var grad_as_node(const Var& loss, const Var& wrt);

} // namespace triqdef::ad
