#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "scd/tensor.hpp"

// Finite-difference gradient checking. Always run at double precision: with
// h = 1e-5 the central-difference truncation error is O(h^2) = 1e-10, far
// below the 1e-4 relative tolerance used by the tests, while float would
// drown the signal in rounding noise.

namespace scd {

struct GradCheckResult {
    double max_rel_err = 0.0;  // worst element over all checked parameters
    double max_abs_err = 0.0;
    size_t num_elements = 0;
};

// Compares analytic gradients of `f` (a scalar-valued function of `params`)
// against central finite differences. `f` is re-invoked for every perturbed
// element, so keep the parameter count small.
inline GradCheckResult finite_diff_check(
    const std::function<Tensor<double>()>& f,
    const std::vector<Tensor<double>>& params, double h = 1e-5) {
    for (auto& p : params) p.impl()->grad.clear();
    Tensor<double> loss = f();
    backward(loss);

    GradCheckResult res;
    for (auto& p : params) {
        std::vector<double> analytic = p.impl()->grad;
        if (analytic.empty()) analytic.assign(p.data().size(), 0.0);
        auto& x = p.impl()->data;
        for (size_t i = 0; i < x.size(); ++i) {
            const double orig = x[i];
            double fp, fm;
            {
                NoGradGuard ng;
                x[i] = orig + h;
                fp = f().item();
                x[i] = orig - h;
                fm = f().item();
                x[i] = orig;
            }
            const double fd = (fp - fm) / (2.0 * h);
            const double abs_err = std::abs(analytic[i] - fd);
            const double rel_err = abs_err / (std::abs(fd) + 1e-8);
            res.max_abs_err = std::max(res.max_abs_err, abs_err);
            res.max_rel_err = std::max(res.max_rel_err, rel_err);
            ++res.num_elements;
        }
    }
    return res;
}

}  // namespace scd
