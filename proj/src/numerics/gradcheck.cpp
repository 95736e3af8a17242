#include "eib/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace eib {

namespace {

Real evaluate(const std::function<Var(Tape&)>& loss_fn) {
    Tape tape;
    return loss_fn(tape).value().item();
}

// Uses the step actually representable around x so rounding of x ± h does not
// leak into the quotient.
Real central(const std::function<Var(Tape&)>& loss_fn, Real& x, Real h) {
    const Real saved = x;
    const Real up = saved + h;
    const Real down = saved - h;
    x = up;
    const Real fp = evaluate(loss_fn);
    x = down;
    const Real fm = evaluate(loss_fn);
    x = saved;
    return (fp - fm) / (up - down);
}

}  // namespace

GradCheckResult finite_diff_check(const std::function<Var(Tape&)>& loss_fn, std::span<Parameter* const> params,
                                  const GradCheckOptions& opts) {
    std::vector<Tensor> analytic;
    {
        Tape tape;
        for (Parameter* p : params) tape.leaf(*p);
        Var loss = loss_fn(tape);
        tape.backward(loss);
        for (Parameter* p : params) analytic.push_back(tape.param_grad(*p));
    }

    GradCheckResult res;
    std::mt19937_64 rng(opts.seed);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        std::vector<std::size_t> idx(p.value.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        if (opts.samples_per_param != 0 && idx.size() > opts.samples_per_param) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(opts.samples_per_param);
            std::sort(idx.begin(), idx.end());
        }
        for (std::size_t i : idx) {
            const Real numeric = opts.richardson
                                     ? (4 * central(loss_fn, p.value[i], opts.epsilon / 2) -
                                        central(loss_fn, p.value[i], opts.epsilon)) / 3
                                     : central(loss_fn, p.value[i], opts.epsilon);
            const Real a = analytic[pi][i];
            const Real denom = std::max({std::abs(a), std::abs(numeric), Real{1e-8}});
            const Real rel = std::abs(a - numeric) / denom;
            ++res.probes;
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = p.name;
                res.worst_index = i;
                res.worst_analytic = a;
                res.worst_numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace eib
