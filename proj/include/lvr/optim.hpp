#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lvr/tensor.hpp"

namespace lvr {

/// Ordered, uniquely named parameter registry. Registration order is the
/// iteration order everywhere (optimizer, checkpoints), which keeps runs
/// reproducible.
template <typename S>
class ParamStore {
  public:
    Tensor<S>& add(const std::string& name, Tensor<S> t) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    Tensor<S>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &items_[it->second].second;
    }
    const Tensor<S>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &items_[it->second].second;
    }

    std::size_t size() const { return items_.size(); }
    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    void zero_grad() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

    void set_trainable(bool v) {
        for (auto& [name, t] : items_) t.set_requires_grad(v);
    }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

  private:
    std::vector<std::pair<std::string, Tensor<S>>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

template <typename S>
struct AdamWState {
    std::vector<std::vector<S>> m, v;
    std::uint64_t t = 0;

    void init(const ParamStore<S>& params) {
        m.clear();
        v.clear();
        t = 0;
        for (const auto& [name, p] : params) {
            m.emplace_back(p.numel(), S(0));
            v.emplace_back(p.numel(), S(0));
        }
    }
};

/// One AdamW update over the store, in registration order. Weight decay is
/// decoupled (applied directly to the parameter, not through the moments);
/// moment estimates are bias-corrected.
template <typename S>
void adamw_step(ParamStore<S>& params, AdamWState<S>& state, S lr, S beta1, S beta2, S eps, S weight_decay) {
    if (state.m.size() != params.size()) throw std::invalid_argument("adamw_step: state not initialized for store");
    state.t += 1;
    S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1), static_cast<double>(state.t)));
    S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2), static_cast<double>(state.t)));
    std::size_t pi = 0;
    for (auto& [name, p] : params) {
        auto& data = p.values();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        const S* g = p.has_grad() ? p.grad().data() : nullptr;
        for (std::size_t i = 0; i < data.size(); ++i) {
            S gi = g ? g[i] : S(0);
            data[i] -= lr * weight_decay * data[i];
            m[i] = beta1 * m[i] + (S(1) - beta1) * gi;
            v[i] = beta2 * v[i] + (S(1) - beta2) * gi * gi;
            S mhat = m[i] / bc1;
            S vhat = v[i] / bc2;
            data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
        ++pi;
    }
}

/// Linear warmup to base_lr, then cosine decay to zero. Step is 0-based.
inline double cosine_warmup_lr(double base_lr, std::size_t step, std::size_t warmup_steps, std::size_t total_steps) {
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return base_lr;
    double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

}  // namespace lvr
