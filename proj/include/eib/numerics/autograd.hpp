#pragma once

// Reverse-mode differentiation over whole-tensor operations. A Tape records
// every op of one forward pass; backward() walks it in reverse. Tapes are
// single-writer: one per training step, never shared across threads.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "eib/numerics/tensor.hpp"

namespace eib {

// A named trainable tensor owned by a model.
struct Parameter {
    std::string name;
    Tensor value;
};

class Tape;

// Handle to a node recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = std::numeric_limits<std::size_t>::max();
    std::uint64_t generation = 0;

    bool valid() const noexcept { return tape != nullptr; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    // Leaf bound to a parameter. Repeated calls for one parameter within a
    // pass return the same node, so shared weights accumulate one gradient.
    Var leaf(const Parameter& p, bool requires_grad = true);

    Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

    const Tensor& value(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    // Gradient buffer of a node, allocated (zeroed) on first use.
    Tensor& grad(std::size_t id);
    bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

    // Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
    void backward(Var loss);

    // Gradient of the loss with respect to a parameter; zero when the
    // parameter was never used or is unreachable from the loss.
    Tensor param_grad(const Parameter& p) const;
    bool used(const Parameter& p) const { return leaf_ids_.count(&p) != 0; }

    // Drops all nodes; outstanding Vars become stale.
    void reset();

    std::uint64_t generation() const noexcept { return generation_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    void check(const Var& v) const;

  private:
    struct Node {
        Tensor value;
        const Tensor* ref = nullptr;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> leaf_ids_;
    std::uint64_t generation_ = 1;
    bool backward_done_ = false;
};

// Stateless tensor-level primitives used by the losses below and by the
// importance scorer; each matches the corresponding tape op's value exactly.
Tensor softmax_rows(const Tensor& logits);
Real kl_divergence(const Tensor& p, const Tensor& q);
Real mse(const Tensor& a, const Tensor& b);
Real cross_entropy(const Tensor& logits, std::span<const int> labels);

inline constexpr Real kKlFloor = 1e-12;
inline constexpr Real kMaskedScore = -1e9;

namespace ag {

Var matmul(Var a, Var b);
// a[m x k] * b[n x k]^T (tied output embeddings).
Var matmul_bt(Var a, Var b);
// x[n x in] * w[in x out] + bias[out] (bias may be invalid for none).
Var linear(Var x, Var w, Var bias);
Var add(Var a, Var b);
Var scale(Var a, Real c);
// Weighted sum of scalar nodes; terms with a zero weight are not recorded.
Var weighted_sum(std::span<const Var> terms, std::span<const Real> weights);
Var gelu(Var x);
Var tanh(Var x);
Var layernorm(Var x, Var gamma, Var beta, Real eps = 1e-12);
Var gather_rows(Var table, std::vector<std::size_t> ids);
Var select_rows(Var x, std::vector<std::size_t> rows);
// x viewed as [batch x seq x d]; mean over unmasked positions -> [batch x d].
Var masked_mean(Var x, const std::vector<int>& mask, std::size_t batch, std::size_t seq);

struct AttentionShape {
    std::size_t batch = 0, seq = 0, heads = 0;
};
// Multi-head scaled dot-product attention over q, k, v [batch*seq x d].
// Keys with mask 0 receive kMaskedScore before the softmax. When
// probs_out is non-null it receives the maps as [batch x heads x seq x seq].
Var attention(Var q, Var k, Var v, const std::vector<int>& mask, AttentionShape s, Tensor* probs_out = nullptr);

// Losses (scalar outputs).
Var cross_entropy(Var logits, std::vector<int> labels);
// KL(softmax(target/T) || softmax(pred/T)), mean over rows.
Var kl_logits(Var target_logits, Var pred_logits, Real temperature);
Var mse(Var a, Var b);
// Mean over rows of -ln softmax(logits)[label] for rows with label >= 0;
// rows with a negative label are ignored. Zero when no row is selected.
Var masked_cross_entropy(Var logits, std::vector<int> labels);

// Straight-through fake quantization s * clamp(round(w / s), -qmax, qmax).
// d/dw passes through inside the clamp range; d/ds follows the LSQ split.
Var fake_quant(Var w, Var step, int qmax = 127);
// Activation fake quantization with a fixed scale; identity gradient inside
// the representable range.
Var fake_quant_fixed(Var x, Real scale, int qmax = 127);

}  // namespace ag

// Round half away from zero then clamp into [-qmax, qmax].
int quantize_code(Real x, int qmax = 127);

}  // namespace eib
