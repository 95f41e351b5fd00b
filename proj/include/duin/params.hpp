#pragma once

#include "duin/graph.hpp"
#include "duin/rng.hpp"

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace duin {

/// One named model tensor. Trainable entries are optimizer targets; the rest
/// (running stats, codex state) ride along for checkpointing.
template <typename T>
struct ParamEntry {
    std::string name;
    Var<T> var;
    bool trainable = true;
};

/// Ordered registry of every tensor a model owns. Order is construction
/// order, which makes checkpoints byte-stable for a given config.
template <typename T>
class ParamStore {
public:
    Var<T> add(const std::string& name, Tensor<T> init, bool trainable = true) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        Var<T> v(std::move(init), trainable);
        index_[name] = entries_.size();
        entries_.push_back({name, v, trainable});
        return v;
    }

    const std::vector<ParamEntry<T>>& entries() const { return entries_; }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Var<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return entries_[it->second].var;
    }

    const Var<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return entries_[it->second].var;
    }

    std::vector<Var<T>> trainable() const {
        std::vector<Var<T>> out;
        for (const auto& e : entries_) {
            if (e.trainable) out.push_back(e.var);
        }
        return out;
    }

    void zero_grads() {
        for (auto& e : entries_) e.var.zero_grad();
    }

    /// Marks every tensor non-trainable and stops graph capture through it;
    /// used for the frozen stage-1 model in masked-modeling training.
    void freeze_all() {
        for (auto& e : entries_) {
            e.trainable = false;
            e.var.node()->requires_grad = false;
        }
    }

    Index total_size() const {
        Index n = 0;
        for (const auto& e : entries_) n += e.var.value().size();
        return n;
    }

private:
    std::vector<ParamEntry<T>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Weight init helpers. Truncated normal std 0.02 for projections, zeros for
// biases, ones for norm gains.

template <typename T>
Tensor<T> trunc_normal_init(std::vector<Index> dims, Rng& rng, double std = 0.02) {
    Tensor<T> t(std::move(dims));
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.truncated_normal(std));
    return t;
}

template <typename T>
Tensor<T> normal_init(std::vector<Index> dims, Rng& rng, double mean, double std) {
    Tensor<T> t(std::move(dims));
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal(mean, std));
    return t;
}

template <typename T>
Tensor<T> ones(std::vector<Index> dims) {
    return Tensor<T>::full(std::move(dims), T(1));
}

}  // namespace duin
