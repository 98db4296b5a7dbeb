#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "voxrel/tensor.hpp"

namespace voxrel {

// Central-difference gradient of a scalar function with respect to x.
// eval() must recompute the function from x's current contents; x is
// restored before returning.
template <typename T>
std::vector<double> finite_diff_grad(Tensor<T>& x, const std::function<double()>& eval,
                                     double h = 1e-5) {
    if (h <= 0.0) throw ValueError("finite_diff_grad: h must be > 0");
    const int64_t n = x.numel();
    std::vector<double> g(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const T orig = x[i];
        x[i] = static_cast<T>(static_cast<double>(orig) + h);
        const double fp = eval();
        x[i] = static_cast<T>(static_cast<double>(orig) - h);
        const double fm = eval();
        x[i] = orig;
        g[static_cast<size_t>(i)] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace voxrel
