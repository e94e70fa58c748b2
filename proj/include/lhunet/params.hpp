#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "lhunet/graph.hpp"
#include "lhunet/rng.hpp"
#include "lhunet/tensor.hpp"

namespace lhunet {

// Named registry of learnable tensors (graph leaves) plus non-learnable
// buffers such as batch-norm running statistics. Enumeration order is
// creation order, which is fixed by the network plan, so checkpoints and
// seeded initialization are reproducible byte for byte.
template <class T>
class ParamStore {
  public:
    struct Entry {
        std::string name;
        Shape shape;
        bool buffer = false;
        VarId id = -1;                      // params only
        std::shared_ptr<Tensor<T>> buf;     // buffers only
    };

    explicit ParamStore(Graph<T>& g) : g_(&g) {}

    VarId add_param(const std::string& name, Tensor<T> init) {
        check_new(name);
        Entry e;
        e.name = name;
        e.shape = init.shape;
        e.id = g_->param(std::move(init), name);
        index_[name] = entries_.size();
        entries_.push_back(std::move(e));
        return entries_.back().id;
    }

    std::shared_ptr<Tensor<T>> add_buffer(const std::string& name, Tensor<T> init) {
        check_new(name);
        Entry e;
        e.name = name;
        e.shape = init.shape;
        e.buffer = true;
        e.buf = std::make_shared<Tensor<T>>(std::move(init));
        index_[name] = entries_.size();
        entries_.push_back(std::move(e));
        return entries_.back().buf;
    }

    const std::vector<Entry>& entries() const { return entries_; }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const Entry& entry(const std::string& name) const {
        auto it = index_.find(name);
        require(it != index_.end(), "unknown parameter: " + name);
        return entries_[it->second];
    }

    Tensor<T>& tensor(const Entry& e) {
        return e.buffer ? *e.buf : g_->val(e.id);
    }
    const Tensor<T>& tensor(const Entry& e) const {
        return e.buffer ? *e.buf : g_->val(e.id);
    }

    Tensor<T>& tensor(const std::string& name) { return tensor(entry(name)); }

    int64_t n_learnable() const {
        int64_t n = 0;
        for (const auto& e : entries_)
            if (!e.buffer) n += numel_of(e.shape);
        return n;
    }

    int64_t n_values() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += numel_of(e.shape);
        return n;
    }

    std::vector<VarId> param_ids() const {
        std::vector<VarId> ids;
        for (const auto& e : entries_)
            if (!e.buffer) ids.push_back(e.id);
        return ids;
    }

    // Every value (params and buffers, in creation order) serialized into
    // one flat vector; the inverse checks the total size.
    std::vector<T> flatten() const {
        std::vector<T> out;
        out.reserve(n_values());
        for (const auto& e : entries_) {
            const Tensor<T>& t = tensor(e);
            out.insert(out.end(), t.data.begin(), t.data.end());
        }
        return out;
    }

    void unflatten(const std::vector<T>& flat) {
        require((int64_t)flat.size() == n_values(),
                "checkpoint size mismatch: got " + std::to_string(flat.size()) +
                    " values, expected " + std::to_string(n_values()));
        size_t off = 0;
        for (auto& e : entries_) {
            Tensor<T>& t = tensor(e);
            std::copy(flat.begin() + off, flat.begin() + off + t.numel(), t.data.begin());
            off += t.numel();
        }
    }

    Graph<T>& graph() { return *g_; }

  private:
    void check_new(const std::string& name) {
        require(index_.find(name) == index_.end(), "duplicate parameter name: " + name);
    }

    Graph<T>* g_;
    std::vector<Entry> entries_;
    std::map<std::string, size_t> index_;
};

// --------------------------------------------------------------------------
// initializers
// --------------------------------------------------------------------------

namespace init {

// He-style normal draw, std = sqrt(2 / fan_in).
template <class T>
Tensor<T> he_normal(Rng& rng, const Shape& shape, int64_t fan_in) {
    Tensor<T> t(shape);
    double s = std::sqrt(2.0 / std::max<int64_t>(fan_in, 1));
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * s);
    return t;
}

template <class T>
Tensor<T> uniform(Rng& rng, const Shape& shape, double lo, double hi) {
    Tensor<T> t(shape);
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <class T>
Tensor<T> constant(const Shape& shape, double v) {
    return Tensor<T>(shape, static_cast<T>(v));
}

}  // namespace init

}  // namespace lhunet
