#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "msd/errors.hpp"

namespace msd {

// Ordered, named parameter arrays. Order is part of the public contract:
// checkpoints and optimizer state are serialized entry by entry.
template <class S>
struct ParamSet {
    struct Entry {
        std::string name;
        std::vector<int> shape;
        std::vector<S> value;
        std::size_t size() const { return value.size(); }
    };

    std::vector<Entry> entries;

    Entry& add(std::string name, std::vector<int> shape) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d);
        index_[name] = static_cast<int>(entries.size());
        entries.push_back(Entry{std::move(name), std::move(shape), std::vector<S>(n, S(0))});
        return entries.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Entry& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter: " + name);
        return entries[static_cast<std::size_t>(it->second)];
    }
    const Entry& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter: " + name);
        return entries[static_cast<std::size_t>(it->second)];
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& e : entries) n += e.size();
        return n;
    }

    template <class T>
    ParamSet<T> cast() const {
        ParamSet<T> out;
        for (const auto& e : entries) {
            auto& ne = out.add(e.name, e.shape);
            for (std::size_t i = 0; i < e.value.size(); ++i)
                ne.value[i] = static_cast<T>(e.value[i]);
        }
        return out;
    }

private:
    std::unordered_map<std::string, int> index_;
};

}  // namespace msd
