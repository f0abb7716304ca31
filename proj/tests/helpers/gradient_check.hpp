// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient oracle. Kept independent of the
// tape: it only re-evaluates a caller-supplied forward function at
// perturbed parameter values.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "amnet/tensor.hpp"

namespace amnet::testing {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

/// Compares tape gradients of `forward` (must return a scalar loss built
/// on the given tape) against central finite differences for every
/// element of every tensor in `leaves`.
inline GradCheckResult check_gradients(const std::function<Tensor(Tape&)>& forward,
                                       std::vector<Tensor> leaves, double h = 1e-5) {
    Tape tape;
    Tensor loss = forward(tape);
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    for (Tensor& t : leaves)
        analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));

    auto eval = [&]() {
        Tape t2;
        t2.set_enabled(false);
        return forward(t2).item();
    };

    GradCheckResult res;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& vals = leaves[li].values_mut();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double lp = eval();
            vals[i] = orig - h;
            const double lm = eval();
            vals[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double a = analytic[li][i];
            const double denom = std::max({std::fabs(a), std::fabs(fd), 1e-5});
            res.max_rel_err = std::max(res.max_rel_err, std::fabs(a - fd) / denom);
            ++res.checked;
        }
    }
    return res;
}

} // namespace amnet::testing
