#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mctd/autodiff.hpp"

namespace fd {

struct Mismatch {
    double worst = 0.0;  // largest relative error seen
    std::string where;   // "leaf[i] element k: analytic a, numeric n"
};

// |a - n| relative to the larger magnitude; gradients below `floor` are
// compared on an absolute scale of floor.
inline double relative_error(double a, double n, double floor = 1e-4) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Compares reverse-mode gradients of the scalar f() with respect to every
// element of every leaf against central differences with step h.
template <class F>
Mismatch check(std::vector<mctd::Tensor> leaves, F f, double h = 1e-5) {
    for (auto& leaf : leaves) leaf.zero_grad();
    const mctd::Tensor loss = f();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    for (const auto& leaf : leaves) analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());

    Mismatch out;
    mctd::NoGradGuard guard;
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        auto values = leaves[i].mutable_values();
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double saved = values[k];
            values[k] = saved + h;
            const double up = f().item();
            values[k] = saved - h;
            const double down = f().item();
            values[k] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double err = relative_error(analytic[i][k], numeric);
            if (err > out.worst) {
                out.worst = err;
                out.where = "leaf[" + std::to_string(i) + "] element " + std::to_string(k) + ": analytic " +
                            std::to_string(analytic[i][k]) + ", numeric " + std::to_string(numeric);
            }
        }
    }
    return out;
}

}  // namespace fd
