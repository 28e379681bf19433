#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

#include "porl/tensor.hpp"

namespace porl::ad {

// Central-difference verification of reverse-mode gradients w.r.t. x.
// f must reduce to a scalar tensor and be deterministic. Returns the max
// over coordinates of |analytic - numeric| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
    if (!(eps >= 1e-7 && eps <= 1e-3))
        throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");

    const bool orig_rg = x.requires_grad();
    std::vector<double> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        x.set_requires_grad(true);
        x.zero_grad();
        Tensor y = f(x);
        if (y.size() != 1)
            throw std::invalid_argument("grad_check: f must be scalar-valued after reduction");
        tape.backward(y);
        analytic = x.grad();
        x.set_requires_grad(orig_rg);
    }

    double max_err = 0.0;
    {
        NoGradScope ng;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double orig = x.values()[i];
            x.values()[i] = orig + eps;
            const double fp = f(x).value();
            x.values()[i] = orig - eps;
            const double fm = f(x).value();
            x.values()[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw std::runtime_error("grad_check: non-finite value at coordinate " +
                                         std::to_string(i));
            const double numeric = (fp - fm) / (2.0 * eps);
            const double err =
                std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace porl::ad
