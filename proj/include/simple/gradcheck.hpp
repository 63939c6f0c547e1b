#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

#include "simple/tensor.hpp"

namespace simple {

/// Differentiable scalar function for checking: returns f(x); when grad is
/// non-null it must also fill the analytic gradient df/dx.
template <typename T>
using CheckedFn = std::function<T(const Tensor<T>&, Tensor<T>* grad)>;

/// Compares the analytic gradient against central finite differences at
/// `point`. Returns the max relative error over coordinates,
/// |a - n| / max(|a| + |n|, 1). Non-finite values are reported with the
/// offending coordinate.
template <typename T>
T gradient_check(const CheckedFn<T>& fn, const Tensor<T>& point, T epsilon) {
    if (epsilon <= T(0)) throw std::invalid_argument("gradient_check: epsilon must be positive");
    Tensor<T> analytic(point.shape);
    const T f0 = fn(point, &analytic);
    if (!std::isfinite(static_cast<double>(f0)))
        throw std::runtime_error("gradient_check: non-finite function value at the base point");
    T worst = 0;
    Tensor<T> x = point;
    for (int64_t i = 0; i < point.numel(); ++i) {
        if (!std::isfinite(static_cast<double>(analytic[i])))
            throw std::runtime_error("gradient_check: non-finite analytic gradient at coordinate " +
                                     std::to_string(i));
        const T orig = x[i];
        x[i] = orig + epsilon;
        const T fp = fn(x, nullptr);
        x[i] = orig - epsilon;
        const T fm = fn(x, nullptr);
        x[i] = orig;
        if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm)))
            throw std::runtime_error("gradient_check: non-finite function value at coordinate " +
                                     std::to_string(i));
        const T numeric = (fp - fm) / (2 * epsilon);
        const T denom = std::max<T>(std::abs(analytic[i]) + std::abs(numeric), T(1));
        worst = std::max<T>(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace simple
