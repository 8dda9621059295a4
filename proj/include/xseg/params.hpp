#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "xseg/tensor.hpp"

namespace xseg {

/// One trainable tensor with its gradient and Adam moment buffers.
template <typename T>
struct Param {
    std::string name;
    std::vector<std::size_t> dims;  // logical shape, rank 1..4
    Tensor4<T> value;               // dims padded with trailing 1s
    Tensor4<T> grad;
    std::vector<T> m;
    std::vector<T> v;

    std::size_t size() const { return value.size(); }
    std::span<const T> values() const { return value.span(); }
};

/// Named parameter store. Names are unique and insertion order is the canonical
/// iteration order (checkpoints, optimiser, reports).
template <typename T>
class ParamStore {
public:
    /// Adds a zero-filled entry; throws ConfigError on a duplicate name.
    std::size_t add(const std::string& name, std::vector<std::size_t> dims) {
        if (index_.contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
        if (dims.empty() || dims.size() > 4) throw ConfigError("parameter '" + name + "' must have rank 1..4");
        Shape4 s{};
        std::size_t* slots[4] = {&s.n, &s.c, &s.h, &s.w};
        for (std::size_t i = 0; i < dims.size(); ++i) *slots[i] = dims[i];
        Param<T> p{name, std::move(dims), Tensor4<T>(s), Tensor4<T>(s), {}, {}};
        p.m.assign(p.value.size(), T(0));
        p.v.assign(p.value.size(), T(0));
        entries_.push_back(std::move(p));
        index_.emplace(name, entries_.size() - 1);
        return entries_.size() - 1;
    }

    Param<T>& operator[](std::size_t i) { return entries_[i]; }
    const Param<T>& operator[](std::size_t i) const { return entries_[i]; }

    const Param<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &entries_[it->second];
    }
    Param<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &entries_[it->second];
    }

    std::vector<Param<T>>& entries() { return entries_; }
    const std::vector<Param<T>>& entries() const { return entries_; }
    std::size_t count() const { return entries_.size(); }

    std::size_t total_size() const {
        std::size_t total = 0;
        for (const auto& p : entries_) total += p.size();
        return total;
    }

    void zero_grad() {
        for (auto& p : entries_) p.grad.fill(T(0));
    }

private:
    std::vector<Param<T>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace xseg
