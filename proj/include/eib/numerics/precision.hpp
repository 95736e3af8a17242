#pragma once

#include <span>

#include "eib/numerics/tensor.hpp"

namespace eib {

enum class Precision { F32, F64 };

// Process-wide precision switch. Training defaults to F32; gradient checks
// and determinism audits run in F64.
Precision precision();
void set_precision(Precision p);

// Rounds values to float when the global precision is F32.
void round_to_precision(std::span<Real> values);
inline void round_to_precision(Tensor& t) { round_to_precision(t.data()); }
Real round_to_precision(Real v);

// Restores the previous precision on scope exit.
class PrecisionScope {
  public:
    explicit PrecisionScope(Precision p) : saved_(precision()) { set_precision(p); }
    ~PrecisionScope() { set_precision(saved_); }
    PrecisionScope(const PrecisionScope&) = delete;
    PrecisionScope& operator=(const PrecisionScope&) = delete;

  private:
    Precision saved_;
};

}  // namespace eib
