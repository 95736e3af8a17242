#include "eib/numerics/precision.hpp"

#include <atomic>

namespace eib {

namespace {
std::atomic<Precision> g_precision{Precision::F32};
}

Precision precision() { return g_precision.load(std::memory_order_relaxed); }
void set_precision(Precision p) { g_precision.store(p, std::memory_order_relaxed); }

void round_to_precision(std::span<Real> values) {
    if (precision() == Precision::F64) return;
    for (Real& v : values) v = static_cast<Real>(static_cast<float>(v));
}

Real round_to_precision(Real v) {
    return precision() == Precision::F64 ? v : static_cast<Real>(static_cast<float>(v));
}

}  // namespace eib
