#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "eib/numerics/autograd.hpp"

namespace eib {

struct GradCheckOptions {
    Real epsilon = 1e-5;
    // Entries probed per parameter tensor; 0 probes every entry.
    std::size_t samples_per_param = 0;
    std::uint64_t seed = 0;
    // Richardson-extrapolate steps eps and eps/2: (4 D(eps/2) - D(eps)) / 3.
    // Cancels the eps^2 truncation term, so a larger eps can be used and the
    // rounding noise of the loss (~1 ulp / eps) shrinks accordingly.
    bool richardson = false;
};

struct GradCheckResult {
    Real max_rel_error = 0;
    std::string worst_param;
    std::size_t worst_index = 0;
    Real worst_analytic = 0;
    Real worst_numeric = 0;
    std::size_t probes = 0;
};

// Compares reverse-mode gradients of loss_fn against central differences
// (f(p + eps) - f(p - eps)) / (2 eps). The relative error of one entry is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult finite_diff_check(const std::function<Var(Tape&)>& loss_fn, std::span<Parameter* const> params,
                                  const GradCheckOptions& opts = {});

}  // namespace eib
