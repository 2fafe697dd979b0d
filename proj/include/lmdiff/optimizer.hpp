// Adam with bias correction. Moment buffers are keyed by parameter name so
// they can be carried through checkpoints for exact training resume.
#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmdiff/params.hpp"

namespace lmdiff::nn {

template <class T>
class Adam {
public:
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long long step_count = 0;

    struct Slot {
        std::vector<T> m, v;
    };

    explicit Adam(double learning_rate = 1e-3) : lr(learning_rate) {}

    void step(ParamStore<T>& store) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (auto& e : store.entries()) {
            if (!e.tensor.requires_grad) continue;
            Slot& slot = slots_[e.name];
            if (slot.m.empty()) {
                slot.m.assign(e.tensor.numel(), T(0));
                slot.v.assign(e.tensor.numel(), T(0));
            }
            const std::size_t n = e.tensor.numel();
            T* p = e.tensor.ptr();
            const T* g = e.tensor.gptr();
            for (std::size_t i = 0; i < n; ++i) {
                const double gi = static_cast<double>(g[i]);
                const double mi = beta1 * static_cast<double>(slot.m[i]) + (1.0 - beta1) * gi;
                const double vi = beta2 * static_cast<double>(slot.v[i]) + (1.0 - beta2) * gi * gi;
                slot.m[i] = static_cast<T>(mi);
                slot.v[i] = static_cast<T>(vi);
                const double mh = mi / bc1;
                const double vh = vi / bc2;
                p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mh / (std::sqrt(vh) + eps));
            }
        }
    }

    std::unordered_map<std::string, Slot>& slots() { return slots_; }
    const std::unordered_map<std::string, Slot>& slots() const { return slots_; }

private:
    std::unordered_map<std::string, Slot> slots_;
};

}  // namespace lmdiff::nn
