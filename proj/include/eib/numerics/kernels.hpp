#pragma once

// Dense compute kernels. Every kernel has a straightforward serial reference
// in `serial` and an OpenMP version in `parallel`; the unqualified entry
// points dispatch to the parallel ones. Parallel kernels split work over
// output elements only, so each output is reduced in a fixed order and the
// result does not depend on the thread count.

#include <cstddef>
#include <cstdint>
#include <span>

#include "eib/numerics/tensor.hpp"

namespace eib::kernels {

enum class Trans { No, Yes };

// C[M x N] = op(A)[M x K] * op(B)[K x N], added onto C when accumulate is set.
// A is stored M x K (or K x M when transposed); B is K x N (or N x K).
struct GemmArgs {
    Trans trans_a = Trans::No;
    Trans trans_b = Trans::No;
    std::size_t m = 0, n = 0, k = 0;
    bool accumulate = false;
};

// C_int32[M x N] = A_int8[M x K] * B_int8[K x N]
struct IGemmArgs {
    std::size_t m = 0, n = 0, k = 0;
};

namespace serial {
void gemm(const GemmArgs& g, std::span<const Real> a, std::span<const Real> b, std::span<Real> c);
void igemm(const IGemmArgs& g, std::span<const std::int8_t> a, std::span<const std::int8_t> b,
           std::span<std::int32_t> c);
void softmax_rows(std::span<const Real> in, std::span<Real> out, std::size_t rows, std::size_t cols);
void layernorm_rows(std::span<const Real> in, std::span<const Real> gamma, std::span<const Real> beta,
                    std::span<Real> out, std::span<Real> mean, std::span<Real> rstd, std::size_t rows,
                    std::size_t cols, Real eps);
void gelu(std::span<const Real> in, std::span<Real> out);
}  // namespace serial

namespace parallel {
void gemm(const GemmArgs& g, std::span<const Real> a, std::span<const Real> b, std::span<Real> c);
void igemm(const IGemmArgs& g, std::span<const std::int8_t> a, std::span<const std::int8_t> b,
           std::span<std::int32_t> c);
void softmax_rows(std::span<const Real> in, std::span<Real> out, std::size_t rows, std::size_t cols);
void layernorm_rows(std::span<const Real> in, std::span<const Real> gamma, std::span<const Real> beta,
                    std::span<Real> out, std::span<Real> mean, std::span<Real> rstd, std::size_t rows,
                    std::size_t cols, Real eps);
void gelu(std::span<const Real> in, std::span<Real> out);
}  // namespace parallel

using parallel::gelu;
using parallel::gemm;
using parallel::igemm;
using parallel::layernorm_rows;
using parallel::softmax_rows;

// d/dx of the tanh-approximated GELU.
Real gelu_grad(Real x);
Real gelu_scalar(Real x);

// Caps OpenMP worker threads (0 leaves the runtime default). Reads
// EIB_THREADS when called with no argument.
void configure_threads_from_env();
void set_max_threads(int n);
int max_threads();

}  // namespace eib::kernels
