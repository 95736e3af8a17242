#include "eib/distill/optimizer.hpp"

#include <cmath>

#include "eib/error.hpp"
#include "eib/numerics/precision.hpp"

namespace eib {

Adam::Adam(std::vector<Parameter*> params, Real lr, AdamConfig cfg)
    : params_(std::move(params)), lr_(lr), cfg_(cfg) {
    if (!(lr >= 0)) fail(ErrorKind::Spec, "learning rate must be non-negative");
    for (Parameter* p : params_) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
    }
}

void Adam::step(const Tape& tape) {
    std::vector<Tensor> grads;
    grads.reserve(params_.size());
    for (Parameter* p : params_) grads.push_back(tape.param_grad(*p));
    step(grads);
}

void Adam::step(const std::vector<Tensor>& grads) {
    if (grads.size() != params_.size()) fail(ErrorKind::InvalidShape, "one gradient per parameter expected");
    for (const Tensor& g : grads)
        if (!g.all_finite()) fail(ErrorKind::Training, "non-finite gradient");
    if (lr_ == 0) return;
    ++t_;
    const Real c1 = 1 - std::pow(cfg_.beta1, static_cast<Real>(t_));
    const Real c2 = 1 - std::pow(cfg_.beta2, static_cast<Real>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& w = params_[i]->value;
        const Tensor& g = grads[i];
        require_same_shape(w, g, "adam");
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * g[j] * g[j];
            w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
        }
        round_to_precision(w);
    }
}

}  // namespace eib
