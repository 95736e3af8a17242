#include "eib/numerics/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdlib>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace eib::kernels {

namespace {

constexpr Real kSqrt2OverPi = 0.7978845608028654;
constexpr Real kGeluCoeff = 0.044715;

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = std::size_t{1} << 15;

// Eight doubles; lowered to whatever vector width the target has.
typedef Real V8 __attribute__((vector_size(8 * sizeof(Real))));

void check_gemm(const GemmArgs& g, std::size_t a, std::size_t b, std::size_t c) {
    if (a != g.m * g.k || b != g.k * g.n || c != g.m * g.n) {
        fail(ErrorKind::InvalidShape, "gemm operand sizes do not match m=" + std::to_string(g.m) +
                                          " n=" + std::to_string(g.n) + " k=" + std::to_string(g.k));
    }
}

Real op_a(const GemmArgs& g, std::span<const Real> a, std::size_t i, std::size_t p) {
    return g.trans_a == Trans::No ? a[i * g.k + p] : a[p * g.m + i];
}

Real op_b(const GemmArgs& g, std::span<const Real> b, std::size_t p, std::size_t j) {
    return g.trans_b == Trans::No ? b[p * g.n + j] : b[j * g.k + p];
}

}  // namespace

Real gelu_scalar(Real x) {
    const Real u = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

Real gelu_grad(Real x) {
    const Real u = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
    const Real t = std::tanh(u);
    const Real du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// ---------------------------------------------------------------------------
// serial reference
// ---------------------------------------------------------------------------
namespace serial {

void gemm(const GemmArgs& g, std::span<const Real> a, std::span<const Real> b, std::span<Real> c) {
    check_gemm(g, a.size(), b.size(), c.size());
    for (std::size_t i = 0; i < g.m; ++i) {
        for (std::size_t j = 0; j < g.n; ++j) {
            Real acc = 0;
            for (std::size_t p = 0; p < g.k; ++p) acc += op_a(g, a, i, p) * op_b(g, b, p, j);
            c[i * g.n + j] = g.accumulate ? c[i * g.n + j] + acc : acc;
        }
    }
}

void igemm(const IGemmArgs& g, std::span<const std::int8_t> a, std::span<const std::int8_t> b,
           std::span<std::int32_t> c) {
    for (std::size_t i = 0; i < g.m; ++i) {
        for (std::size_t j = 0; j < g.n; ++j) {
            std::int32_t acc = 0;
            for (std::size_t p = 0; p < g.k; ++p) {
                acc += static_cast<std::int32_t>(a[i * g.k + p]) * static_cast<std::int32_t>(b[p * g.n + j]);
            }
            c[i * g.n + j] = acc;
        }
    }
}

void softmax_rows(std::span<const Real> in, std::span<Real> out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* x = in.data() + r * cols;
        Real* y = out.data() + r * cols;
        Real mx = x[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        Real sum = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (std::size_t j = 0; j < cols; ++j) y[j] /= sum;
    }
}

void layernorm_rows(std::span<const Real> in, std::span<const Real> gamma, std::span<const Real> beta,
                    std::span<Real> out, std::span<Real> mean, std::span<Real> rstd, std::size_t rows,
                    std::size_t cols, Real eps) {
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* x = in.data() + r * cols;
        Real mu = 0;
        for (std::size_t j = 0; j < cols; ++j) mu += x[j];
        mu /= static_cast<Real>(cols);
        Real var = 0;
        for (std::size_t j = 0; j < cols; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<Real>(cols);
        const Real rs = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        rstd[r] = rs;
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = (x[j] - mu) * rs * gamma[j] + beta[j];
    }
}

void gelu(std::span<const Real> in, std::span<Real> out) {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = gelu_scalar(in[i]);
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP
// ---------------------------------------------------------------------------
namespace parallel {

void gemm(const GemmArgs& g, std::span<const Real> a, std::span<const Real> b, std::span<Real> c) {
    check_gemm(g, a.size(), b.size(), c.size());
    const std::size_t m = g.m, n = g.n, k = g.k;

    // Bring both operands to row-major op() layout so the inner loop is a
    // unit-stride axpy over a row of B.
    std::vector<Real> at_buf, bt_buf;
    const Real* ap = a.data();
    const Real* bp = b.data();
    if (g.trans_a == Trans::Yes) {
        at_buf.resize(m * k);
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t i = 0; i < m; ++i) at_buf[i * k + p] = a[p * m + i];
        ap = at_buf.data();
    }
    if (g.trans_b == Trans::Yes) {
        bt_buf.resize(k * n);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) bt_buf[p * n + j] = b[j * k + p];
        bp = bt_buf.data();
    }

    Real* cp = c.data();
    const bool acc = g.accumulate;
    // Register tiles of kRows x kCols outputs; each output is still summed
    // over p in order from zero and only then added to C, exactly like the
    // serial reference.
    constexpr std::size_t kRows = 4, kCols = 16;
    const long long blocks = static_cast<long long>((m + kRows - 1) / kRows);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
    for (long long bb = 0; bb < blocks; ++bb) {
        const std::size_t i0 = static_cast<std::size_t>(bb) * kRows;
        const std::size_t rows = std::min(kRows, m - i0);
        for (std::size_t j0 = 0; j0 < n; j0 += kCols) {
            const std::size_t cols = std::min(kCols, n - j0);
            Real t[kRows][kCols] = {};
            if (rows == kRows && cols == kCols) {
                // Eight accumulators of eight lanes stay in registers.
                V8 acc0[kRows] = {}, acc1[kRows] = {};
                for (std::size_t p = 0; p < k; ++p) {
                    const Real* brow = bp + p * n + j0;
                    V8 b0, b1;
                    std::memcpy(&b0, brow, sizeof b0);
                    std::memcpy(&b1, brow + 8, sizeof b1);
                    for (std::size_t r = 0; r < kRows; ++r) {
                        const Real av = ap[(i0 + r) * k + p];
                        acc0[r] += av * b0;
                        acc1[r] += av * b1;
                    }
                }
                for (std::size_t r = 0; r < kRows; ++r) {
                    std::memcpy(t[r], &acc0[r], sizeof(V8));
                    std::memcpy(t[r] + 8, &acc1[r], sizeof(V8));
                }
            } else {
                for (std::size_t p = 0; p < k; ++p) {
                    const Real* brow = bp + p * n + j0;
                    for (std::size_t r = 0; r < rows; ++r) {
                        const Real av = ap[(i0 + r) * k + p];
                        for (std::size_t j = 0; j < cols; ++j) t[r][j] += av * brow[j];
                    }
                }
            }
            for (std::size_t r = 0; r < rows; ++r) {
                Real* crow = cp + (i0 + r) * n + j0;
                for (std::size_t j = 0; j < cols; ++j) crow[j] = acc ? crow[j] + t[r][j] : t[r][j];
            }
        }
    }
}

void igemm(const IGemmArgs& g, std::span<const std::int8_t> a, std::span<const std::int8_t> b,
           std::span<std::int32_t> c) {
    const std::size_t m = g.m, n = g.n, k = g.k;
    const long long rows = static_cast<long long>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
    for (long long ii = 0; ii < rows; ++ii) {
        const std::size_t i = static_cast<std::size_t>(ii);
        std::int32_t* crow = c.data() + i * n;
        std::fill(crow, crow + n, 0);
        for (std::size_t p = 0; p < k; ++p) {
            const std::int32_t av = a[i * k + p];
            const std::int8_t* brow = b.data() + p * n;
#pragma omp simd
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * static_cast<std::int32_t>(brow[j]);
        }
    }
}

void softmax_rows(std::span<const Real> in, std::span<Real> out, std::size_t rows, std::size_t cols) {
    const long long nr = static_cast<long long>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
    for (long long r = 0; r < nr; ++r) {
        serial::softmax_rows(in.subspan(static_cast<std::size_t>(r) * cols, cols),
                             out.subspan(static_cast<std::size_t>(r) * cols, cols), 1, cols);
    }
}

void layernorm_rows(std::span<const Real> in, std::span<const Real> gamma, std::span<const Real> beta,
                    std::span<Real> out, std::span<Real> mean, std::span<Real> rstd, std::size_t rows,
                    std::size_t cols, Real eps) {
    const long long nr = static_cast<long long>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
    for (long long rr = 0; rr < nr; ++rr) {
        const auto r = static_cast<std::size_t>(rr);
        serial::layernorm_rows(in.subspan(r * cols, cols), gamma, beta, out.subspan(r * cols, cols),
                               mean.subspan(r, 1), rstd.subspan(r, 1), 1, cols, eps);
    }
}

void gelu(std::span<const Real> in, std::span<Real> out) {
    const long long n = static_cast<long long>(in.size());
#pragma omp parallel for schedule(static) if (in.size() > kParallelWork)
    for (long long i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = gelu_scalar(in[static_cast<std::size_t>(i)]);
}

}  // namespace parallel

void set_max_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void configure_threads_from_env() {
    if (const char* env = std::getenv("EIB_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) set_max_threads(n);
    }
}

}  // namespace eib::kernels
