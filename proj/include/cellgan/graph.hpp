#pragma once

#include <deque>
#include <memory>
#include <utility>
#include <vector>

#include "cellgan/params.hpp"
#include "cellgan/tensor.hpp"

namespace cellgan {

template <typename T>
class Graph;

/// Lightweight handle to a graph node.
struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// One differentiable operation. Forward results are computed eagerly when
/// the node is emitted; these hooks run the reverse pass and, for the ops on
/// the R1 path, the forward-over-reverse tangent pass.
template <typename T>
struct Op {
    virtual ~Op() = default;
    virtual const char* name() const = 0;

    /// Accumulate d(out)/d(input_i) into grad(in[i]) from grad(node).
    /// When with_params is false, gradient work that only feeds parameter
    /// leaves is skipped (input-gradient-only passes).
    virtual void backward(Graph<T>& g, int node, bool with_params) = 0;

    /// Forward-mode: tangent(node) from tangents of inputs.
    virtual void jvp(Graph<T>& g, int node) {
        (void)g;
        (void)node;
        throw state_error(std::string("op ") + name() + ": jvp not implemented");
    }

    /// Tangent of the reverse pass: accumulate gtan(in[i]) (and parameter
    /// grad-tangents) from gtan(node), grad(node) and input tangents.
    virtual void backward_tangent(Graph<T>& g, int node) {
        (void)g;
        (void)node;
        throw state_error(std::string("op ") + name() + ": backward_tangent not implemented");
    }
};

/// Dynamic tape. Nodes are appended in topological order; backward walks the
/// tape in reverse over the subgraph that actually reaches the seed node.
///
/// Besides plain reverse-mode, the tape supports one forward-over-reverse
/// sweep: seed a tangent direction at an input leaf, propagate it forward
/// (jvp), then run backward_tangent to obtain d/d(eps) of every parameter
/// gradient. This yields exact Hessian-vector products, which is how the R1
/// penalty contributes parameter gradients without finite differences.
template <typename T>
class Graph {
public:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;
        Tensor<T> tan;
        Tensor<T> gtan;
        std::unique_ptr<Op<T>> op;  // null for leaves
        std::vector<int> in;
        ParamStore<T>* store = nullptr;  // set for parameter leaves
        int param_id = -1;
        bool needs_grad = false;
        bool reach = false;  // feeds the current backward seed
        bool carries_tan = false;
        bool gtan_nz = false;  // gtan has (potentially) nonzero content
    };

    Value constant(Tensor<T> v) { return add_leaf(std::move(v), false); }

    /// Leaf whose gradient the caller wants (e.g. images for R1).
    Value input(Tensor<T> v) { return add_leaf(std::move(v), true); }

    /// Parameter leaf. Shares storage with the store; one node per (store,id).
    Value param(ParamStore<T>& store, int id) {
        for (int i : param_nodes_)
            if (nodes_[i].store == &store && nodes_[i].param_id == id) return Value{i};
        Value v = add_leaf(store.at(id).value, true);
        nodes_[v.id].store = &store;
        nodes_[v.id].param_id = id;
        param_nodes_.push_back(v.id);
        return v;
    }

    Value emit(std::unique_ptr<Op<T>> op, std::vector<int> inputs, Tensor<T> value) {
        Node n;
        n.val = std::move(value);
        n.op = std::move(op);
        n.in = std::move(inputs);
        for (int i : n.in) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
        nodes_.push_back(std::move(n));
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Tensor<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    const Tensor<T>& val(Value v) const { return val(v.id); }

    Tensor<T>& grad(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.grad.defined()) n.grad = Tensor<T>(n.val.shape());
        return n.grad;
    }

    Tensor<T>& tan(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.tan.defined()) n.tan = Tensor<T>(n.val.shape());
        return n.tan;
    }

    Tensor<T>& gtan(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.gtan.defined()) n.gtan = Tensor<T>(n.val.shape());
        return n.gtan;
    }

    bool wants(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
    bool on_tangent_path(int id) const { return nodes_[static_cast<size_t>(id)].carries_tan; }

    /// Grad-tangent bookkeeping: ops mark an input when they accumulate a
    /// nonzero contribution, and skip propagation from all-zero sources.
    /// For the conv/relu stacks R1 runs over, activation grad-tangents stay
    /// exactly zero, so this prunes most of the reverse-tangent work.
    void mark_gtan(int id) { nodes_[static_cast<size_t>(id)].gtan_nz = true; }
    bool gtan_nonzero(int id) const { return nodes_[static_cast<size_t>(id)].gtan_nz; }

    /// Reverse pass from a scalar node. Gradients accumulate, so clear_grads()
    /// between independent passes over the same tape.
    void backward(Value out, bool with_params = true) {
        Node& o = nodes_[static_cast<size_t>(out.id)];
        if (o.val.size() != 1) throw domain_error("backward: seed must be scalar");
        mark_reach(out.id);
        grad(out.id)[0] += T(1);
        for (int id = out.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.reach && n.op && n.grad.defined()) n.op->backward(*this, id, with_params);
        }
    }

    /// Forward-over-reverse sweep. Requires a prior backward(out, ...) so node
    /// grads are in place. Seeds tangent `dir` at leaf x, propagates tangents
    /// forward across the x->out subgraph, then walks backward filling gtan.
    /// Afterwards gtan at each parameter leaf holds d/d(eps) of that
    /// parameter's gradient for input perturbation x + eps*dir.
    void tangent_sweep(Value out, Value x, const Tensor<T>& dir) {
        if (!nodes_[static_cast<size_t>(out.id)].reach)
            throw state_error("tangent_sweep: run backward(out) first");
        // forward tangent propagation (pruned to nodes that feed `out`)
        tan(x.id) = dir.clone();
        nodes_[static_cast<size_t>(x.id)].carries_tan = true;
        for (int id = x.id + 1; id <= out.id; ++id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.op || !n.reach) continue;
            bool touched = false;
            for (int i : n.in) touched = touched || nodes_[static_cast<size_t>(i)].carries_tan;
            if (!touched) continue;
            n.op->jvp(*this, id);
            n.carries_tan = true;
        }
        // reverse tangent propagation; also visit nodes whose grad was pruned
        // (e.g. weight subgraphs under with_params=false) once they hold a
        // nonzero grad-tangent to push down
        gtan(out.id);  // seed tangent of d(out)/d(out) = 1 is exactly zero
        for (int id = out.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.reach && n.op && (n.grad.defined() || n.gtan_nz))
                n.op->backward_tangent(*this, id);
        }
    }

    void clear_grads() {
        for (Node& n : nodes_) {
            if (n.grad.defined()) n.grad.fill(T(0));
            if (n.tan.defined()) n.tan.fill(T(0));
            if (n.gtan.defined()) n.gtan.fill(T(0));
            n.reach = false;
            n.carries_tan = false;
            n.gtan_nz = false;
        }
    }

    /// store.grad += scale * leaf.grad for every bound parameter leaf.
    void add_param_grads(T scale = T(1)) {
        for (int id : param_nodes_) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.defined()) axpy(scale, n.grad, n.store->at(n.param_id).grad);
        }
    }

    /// store.grad += scale * leaf.gtan (the R1 Hessian-vector contribution).
    void add_param_grad_tangents(T scale) {
        for (int id : param_nodes_) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.gtan.defined() && n.gtan_nz) axpy(scale, n.gtan, n.store->at(n.param_id).grad);
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    Value add_leaf(Tensor<T> v, bool needs_grad) {
        Node n;
        n.val = std::move(v);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    void mark_reach(int out) {
        std::vector<int> stack{out};
        nodes_[static_cast<size_t>(out)].reach = true;
        while (!stack.empty()) {
            int id = stack.back();
            stack.pop_back();
            for (int i : nodes_[static_cast<size_t>(id)].in) {
                Node& m = nodes_[static_cast<size_t>(i)];
                if (!m.reach && m.needs_grad) {
                    m.reach = true;
                    stack.push_back(i);
                }
            }
        }
    }

    // deque: node references (g.val, g.grad, ...) stay valid while the
    // graph grows, so callers may hold them across emits
    std::deque<Node> nodes_;
    std::vector<int> param_nodes_;
};

}  // namespace cellgan
