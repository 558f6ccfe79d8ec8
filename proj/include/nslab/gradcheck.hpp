#pragma once

#include "nslab/autodiff.hpp"

namespace nslab {

// Central finite-difference check of a scalar-valued tensor function.
// `f` receives a fresh tape and a leaf var for the evaluation point and must
// return a scalar var on that tape. Returns the max over coordinates of
// |analytic - central difference| / max(1, |analytic|).
//
// Nondifferentiable points (relu kinks, lovasz sort ties) are excluded by
// contract: callers must evaluate away from them.
template <class F>
inline double grad_check(F&& f, const Tensor& point, double step) {
    Tensor analytic;
    {
        Tape t;
        Var x = t.leaf(point);
        Var y = f(t, x);
        if (t.val(y).numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
        t.backward(y);
        analytic = t.grad(x);
    }
    auto eval = [&](const Tensor& p) -> double {
        Tape t;
        Var x = t.leaf(p);
        return static_cast<double>(t.val(f(t, x)).v[0]);
    };
    double max_err = 0.0;
    Tensor probe = point;
    for (int64_t i = 0; i < point.numel(); ++i) {
        float orig = probe.v[static_cast<size_t>(i)];
        probe.v[static_cast<size_t>(i)] = orig + static_cast<float>(step);
        double fp = eval(probe);
        probe.v[static_cast<size_t>(i)] = orig - static_cast<float>(step);
        double fm = eval(probe);
        probe.v[static_cast<size_t>(i)] = orig;
        double fd = (fp - fm) / (2.0 * step);
        double a = static_cast<double>(analytic.v[static_cast<size_t>(i)]);
        double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace nslab
