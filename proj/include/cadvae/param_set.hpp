#pragma once

#include <map>
#include <string>

#include "cadvae/tensor.hpp"

namespace cadvae {

// Named collection of trainable tensors. Names are unique and shapes are
// fixed for the lifetime of the set; an optimizer step rebinds an entry to a
// fresh tensor of the same shape rather than mutating data in place.
//
// The frozen flag implements the freeze contracts of the alternating
// schedule: while a set is frozen, use() hands out detached value snapshots,
// so no graph built from them can route gradients back into the parameters.
class ParamSet {
  public:
    Tensor& add(const std::string& name, Tensor t) {
        if (!t.requires_grad()) {
            throw ContractError("ParamSet: '" + name + "' must require gradients");
        }
        auto [it, inserted] = entries_.emplace(name, std::move(t));
        if (!inserted) throw UsageError("ParamSet: duplicate name '" + name + "'");
        return it->second;
    }

    const Tensor& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw UsageError("ParamSet: unknown name '" + name + "'");
        return it->second;
    }

    // Tensor to build forward graphs from; detached when the set is frozen.
    Tensor use(const std::string& name) const {
        const Tensor& t = at(name);
        return frozen_ ? stop_gradient(t) : t;
    }

    void rebind(const std::string& name, Tensor t) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw UsageError("ParamSet: unknown name '" + name + "'");
        if (t.shape() != it->second.shape()) {
            throw DimensionError("ParamSet: shape change on '" + name + "'");
        }
        it->second = std::move(t);
    }

    // Frozen-ness is schedule state, not part of the parameter values, so it
    // may be toggled on const views (evaluation paths freeze temporarily).
    void set_frozen(bool f) const { frozen_ = f; }
    bool frozen() const { return frozen_; }

    std::size_t size() const { return entries_.size(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    void zero_grads() {
        for (auto& [name, t] : entries_) t.zero_grad();
    }

    bool all_grads_zero() const {
        for (const auto& [name, t] : entries_) {
            for (double g : t.grad())
                if (g != 0.0) return false;
        }
        return true;
    }

  private:
    std::map<std::string, Tensor> entries_;  // ordered: serialization is deterministic
    mutable bool frozen_ = false;
};

// Scoped freeze for the two-step schedule.
class FreezeGuard {
  public:
    explicit FreezeGuard(const ParamSet& set) : set_(&set), prev_(set.frozen()) {
        set.set_frozen(true);
    }
    ~FreezeGuard() { set_->set_frozen(prev_); }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

  private:
    const ParamSet* set_;
    bool prev_;
};

}  // namespace cadvae
