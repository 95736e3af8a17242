#pragma once

#include <vector>

#include "eib/numerics/autograd.hpp"

namespace eib {

struct AdamConfig {
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
};

// Adam without weight decay over a fixed parameter list. Updated values are
// rounded to the active precision. A zero learning rate skips the update
// entirely (parameters stay bit-identical).
class Adam {
  public:
    Adam(std::vector<Parameter*> params, Real lr, AdamConfig cfg = {});

    // Gradients taken from the tape the loss was differentiated on.
    void step(const Tape& tape);
    void step(const std::vector<Tensor>& grads);

    Real lr() const noexcept { return lr_; }
    void set_lr(Real lr) noexcept { lr_ = lr; }
    std::size_t steps() const noexcept { return t_; }
    const std::vector<Parameter*>& params() const noexcept { return params_; }

  private:
    std::vector<Parameter*> params_;
    Real lr_;
    AdamConfig cfg_;
    std::vector<std::vector<Real>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace eib
