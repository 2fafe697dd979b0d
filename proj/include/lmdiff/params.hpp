// Ordered registry of named parameter tensors. Registration order is the
// canonical order used by the optimizer and by checkpoint serialization, so
// every run visits parameters identically.
#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmdiff/tensor.hpp"

namespace lmdiff::nn {

template <class T>
class ParamStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw std::runtime_error("duplicate parameter name: " + name);
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(t)});
        return entries_.back().tensor;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
        return entries_[it->second].tensor;
    }

    const Tensor<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
        return entries_[it->second].tensor;
    }

    struct Entry {
        std::string name;
        Tensor<T> tensor;
    };

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    // Only parameters with requires_grad participate in optimization.
    std::vector<Tensor<T>*> trainable() {
        std::vector<Tensor<T>*> out;
        for (auto& e : entries_)
            if (e.tensor.requires_grad) out.push_back(&e.tensor);
        return out;
    }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace lmdiff::nn
