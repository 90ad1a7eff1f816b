#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "consisid/autograd.hpp"

namespace csid::testing {

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_grad = 0.0;
    std::size_t checked = 0;
};

// Compares analytic gradients of f() with central differences for every
// element of every parameter (or a strided subset when there are many).
inline GradCheckResult grad_check(const std::function<ag::Var()>& f, const std::vector<ag::Var>& params,
                                  double h = 1e-5, std::size_t max_per_param = 64) {
    for (auto p : params) p.zero_grad();
    ag::Var out = f();
    ag::backward(out);
    std::vector<std::vector<double>> analytic;
    for (const auto& p : params) {
        auto g = p.grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty()) analytic.back().assign(p.numel(), 0.0);
    }
    GradCheckResult res;
    ag::NoGradGuard ng;
    for (std::size_t k = 0; k < params.size(); ++k) {
        ag::Var p = params[k];
        const std::size_t n = p.numel();
        const std::size_t stride = std::max<std::size_t>(1, n / max_per_param);
        for (std::size_t i = 0; i < n; i += stride) {
            const double orig = p.value()[i];
            p.mutable_value()[i] = orig + h;
            const double fp = f().item();
            p.mutable_value()[i] = orig - h;
            const double fm = f().item();
            p.mutable_value()[i] = orig;
            const double num = (fp - fm) / (2 * h);
            const double ana = analytic[k][i];
            const double denom = std::max({std::abs(num), std::abs(ana), 1e-6});
            res.max_rel_err = std::max(res.max_rel_err, std::abs(num - ana) / denom);
            res.max_abs_grad = std::max(res.max_abs_grad, std::abs(ana));
            ++res.checked;
        }
    }
    return res;
}

inline std::vector<double> random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * standard_normal(rng);
    return v;
}

}  // namespace csid::testing
