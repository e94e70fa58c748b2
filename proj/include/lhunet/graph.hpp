#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lhunet/tensor.hpp"

namespace lhunet {

using VarId = int32_t;

// Define-by-run reverse-mode tape. Nodes are created in topological order,
// so backward() is a single reverse sweep. Closures capture VarIds only and
// fetch tensors through the graph, never references into the node vector.
template <class T>
class Graph {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;                         // empty until touched
        std::function<void(Graph&)> backward;   // null for leaves / no-grad
        std::string label;
        bool requires_grad = false;
        bool recorded = false;                  // grad mode at creation time
        bool released = false;
    };

    // ---- node creation ----

    VarId leaf(Tensor<T> v, const std::string& label = "leaf") {
        return push(std::move(v), false, label);
    }

    VarId param(Tensor<T> v, const std::string& label = "param") {
        return push(std::move(v), true, label);
    }

    // Output of an op. requires_grad is inherited from parents by the caller.
    VarId make(Tensor<T> v, bool requires_grad, const std::string& label) {
        return push(std::move(v), requires_grad && grad_enabled_, label);
    }

    void set_backward(VarId id, std::function<void(Graph&)> fn) {
        nodes_[id].backward = std::move(fn);
    }

    bool recording() const { return grad_enabled_; }
    bool wants_grad(VarId id) const { return nodes_[id].requires_grad; }

    // ---- access ----

    Tensor<T>& val(VarId id) {
        Node& n = nodes_[id];
        require(!n.released, "read of released node " + n.label);
        return n.value;
    }
    const Tensor<T>& val(VarId id) const {
        const Node& n = nodes_[id];
        require(!n.released, "read of released node " + n.label);
        return n.value;
    }

    // Allocates a zero gradient on first touch.
    Tensor<T>& grad(VarId id) {
        Node& n = nodes_[id];
        if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
        return n.grad;
    }

    bool has_grad(VarId id) const { return !nodes_[id].grad.data.empty(); }
    const std::string& label(VarId id) const { return nodes_[id].label; }
    size_t size() const { return nodes_.size(); }

    // ---- backward ----

    void backward(VarId root) {
        require(val(root).numel() == 1, "backward root must be scalar");
        grad(root).data[0] = T(1);
        run_backward(root);
    }

    void backward(VarId root, const Tensor<T>& seed) {
        require(seed.same_shape(val(root)), "backward seed shape mismatch");
        Tensor<T>& g = grad(root);
        for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += seed.data[i];
        run_backward(root);
    }

    void zero_grad() {
        for (auto& n : nodes_) n.grad = Tensor<T>();
    }

    // ---- tape lifecycle ----

    size_t mark() const { return nodes_.size(); }

    // Drop everything created after `m` (activations of one step); parameter
    // nodes created before the mark survive with values and grads intact.
    void reset_to(size_t m) {
        require(m <= nodes_.size(), "bad tape mark");
        nodes_.resize(m);
    }

    // Free a consumed intermediate. Legal only for nodes created outside of
    // recording: recorded nodes may be read by some consumer's backward.
    void release(VarId id) {
        Node& n = nodes_[id];
        require(!grad_enabled_ && !n.recorded, "release inside recorded region");
        n.value = Tensor<T>();
        n.released = true;
    }

    // ---- modes ----

    void set_grad_enabled(bool on) { grad_enabled_ = on; }
    bool grad_enabled() const { return grad_enabled_; }

    void set_finite_checks(bool on) { finite_checks_ = on; }
    bool finite_checks() const { return finite_checks_; }

    // ---- scopes and flop metering ----

    void push_scope(const std::string& s) {
        scope_.push_back(s);
        path_ = join_scope();
    }
    void pop_scope() {
        scope_.pop_back();
        path_ = join_scope();
    }
    const std::string& scope_path() const { return path_; }

    void count_flops(double f) {
        flops_ += f;
        if (metering_by_scope_) scope_flops_[path_] += f;
    }
    void reset_flops() {
        flops_ = 0;
        scope_flops_.clear();
    }
    double flops() const { return flops_; }
    void set_scope_metering(bool on) { metering_by_scope_ = on; }
    const std::map<std::string, double>& flops_by_scope() const { return scope_flops_; }

private:
    VarId push(Tensor<T> v, bool rg, const std::string& label) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = rg;
        n.recorded = grad_enabled_;
        n.label = path_.empty() ? label : path_ + "/" + label;
        if (finite_checks_)
            require(n.value.all_finite(), "non-finite value at " + n.label);
        nodes_.push_back(std::move(n));
        return static_cast<VarId>(nodes_.size() - 1);
    }

    void run_backward(VarId root) {
        for (VarId i = root; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.data.empty()) continue;
            n.backward(*this);
            if (finite_checks_)
                require(nodes_[i].grad.all_finite(), "non-finite grad at " + nodes_[i].label);
        }
    }

    std::string join_scope() const {
        std::string s;
        for (size_t i = 0; i < scope_.size(); ++i) {
            if (i) s += "/";
            s += scope_[i];
        }
        return s;
    }

    std::vector<Node> nodes_;
    std::vector<std::string> scope_;
    std::string path_;
    std::map<std::string, double> scope_flops_;
    double flops_ = 0;
    bool grad_enabled_ = true;
    bool finite_checks_ = false;
    bool metering_by_scope_ = false;
};

template <class T>
struct NoGradGuard {
    explicit NoGradGuard(Graph<T>& g) : g_(g), prev_(g.grad_enabled()) {
        g_.set_grad_enabled(false);
    }
    ~NoGradGuard() { g_.set_grad_enabled(prev_); }
    Graph<T>& g_;
    bool prev_;
};

template <class T>
struct ScopeGuard {
    ScopeGuard(Graph<T>& g, const std::string& s) : g_(g) { g_.push_scope(s); }
    ~ScopeGuard() { g_.pop_scope(); }
    Graph<T>& g_;
};

}  // namespace lhunet
