// Central-difference verification of analytic gradients. Used by tests on
// f64 miniatures of every model; too slow for anything larger, on purpose.
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmdiff/params.hpp"
#include "lmdiff/tensor.hpp"

namespace lmdiff::nn {

struct GradReport {
    struct Row {
        std::string name;
        double max_rel_err = 0.0;
        double analytic_at_worst = 0.0;
        double numeric_at_worst = 0.0;
    };
    std::vector<Row> rows;
    double step = 0.0;

    double max_rel_err() const {
        double m = 0.0;
        for (const auto& r : rows) m = std::max(m, r.max_rel_err);
        return m;
    }

    bool all_below(double tol) const { return max_rel_err() <= tol; }
};

// loss_fn must be a pure function of the current parameter values: it is
// invoked repeatedly while elements are nudged by ±step.
template <class T>
GradReport grad_check(const std::function<Tensor<T>()>& loss_fn, ParamStore<T>& params, double step) {
    GradReport report;
    report.step = step;

    // analytic pass
    params.zero_grad();
    Tensor<T> loss = loss_fn();
    if (!all_finite(loss)) throw std::runtime_error("grad_check: non-finite loss");
    backward(loss);

    std::vector<std::vector<T>> analytic;
    for (auto& e : params.entries()) {
        if (!e.tensor.requires_grad) continue;
        analytic.push_back(*e.tensor.grad);
    }

    // numeric pass, one element at a time
    NoGradGuard guard;
    std::size_t slot = 0;
    for (auto& e : params.entries()) {
        if (!e.tensor.requires_grad) continue;
        GradReport::Row row;
        row.name = e.name;
        for (std::size_t i = 0; i < e.tensor.numel(); ++i) {
            const T saved = (*e.tensor.data)[i];
            (*e.tensor.data)[i] = saved + static_cast<T>(step);
            const double up = static_cast<double>((*loss_fn().data)[0]);
            (*e.tensor.data)[i] = saved - static_cast<T>(step);
            const double down = static_cast<double>((*loss_fn().data)[0]);
            (*e.tensor.data)[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw std::runtime_error("grad_check: non-finite loss while perturbing " + e.name);
            const double numeric = (up - down) / (2.0 * step);
            const double a = static_cast<double>(analytic[slot][i]);
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            if (rel >= row.max_rel_err) {
                row.max_rel_err = rel;
                row.analytic_at_worst = a;
                row.numeric_at_worst = numeric;
            }
        }
        report.rows.push_back(row);
        ++slot;
    }
    return report;
}

}  // namespace lmdiff::nn
