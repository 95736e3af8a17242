#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "eib/numerics/autograd.hpp"

namespace eib {

struct ModelSpec {
    std::size_t vocab_size = 2000;
    std::size_t max_seq_len = 32;
    std::size_t embed_dim = 64;
    std::size_t hidden_dim = 64;
    std::size_t intermediate_dim = 256;
    std::size_t num_layers = 2;
    std::size_t num_heads = 4;
    bool share_layers = true;
    bool factorized_embedding = false;
    std::size_t num_classes = 4;
    std::uint64_t seed = 0;

    // Throws ErrorKind::Spec on an inconsistent configuration.
    void validate() const;
    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct Linear {
    Parameter weight;               // [in x out]
    std::optional<Parameter> bias;  // [out]

    std::size_t in() const { return weight.value.rows(); }
    std::size_t out() const { return weight.value.cols(); }
};

struct LayerNormParams {
    Parameter gamma;
    Parameter beta;
};

// Post-norm encoder layer. The key projection has no bias: a key bias
// shifts every score of a query row equally and cancels in the softmax.
struct EncoderBlock {
    Linear query, key, value, output;
    LayerNormParams attn_norm;
    Linear ffn_in, ffn_out;
    LayerNormParams ffn_norm;
};

// A token-batch: ids and mask are batch x seq, row-major.
struct Batch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<int> ids;
    std::vector<int> mask;
    std::vector<int> labels;  // one per row (may be empty)
};

struct TransformerModel {
    ModelSpec spec;
    Parameter token_embedding;               // [vocab x embed]
    std::optional<Linear> embed_projection;  // [embed x hidden], factorized only
    Parameter position_embedding;            // [max_seq x hidden]
    LayerNormParams embed_norm;
    std::vector<EncoderBlock> blocks;        // one entry when layers are shared
    std::optional<Linear> projector;         // [hidden x head_dim] bridge to a teacher's width
    bool head_uses_projector = false;
    Linear pooler;                           // [head_dim x head_dim], tanh
    Linear classifier;                       // [head_dim x classes]

    std::size_t head_dim() const { return pooler.in(); }
    std::size_t d_k() const { return spec.hidden_dim / spec.num_heads; }
    const EncoderBlock& block_for_layer(std::size_t layer) const {
        return blocks[spec.share_layers ? 0 : layer];
    }

    // Every trainable parameter in a fixed canonical order.
    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    std::size_t parameter_count() const;
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
};

// Closed-form parameter count for a freshly built model of this spec.
std::size_t expected_parameter_count(const ModelSpec& spec);

// Seeded build: truncated normal (std 0.02, cut at 2 std) weights, zero
// biases, layer norms at identity.
TransformerModel build_model(const ModelSpec& spec);

// Resolves each parameter to a tape node. The default binds trainable leaves.
using ParamBinder = std::function<Var(Tape&, const Parameter&)>;
// Optional rewrite of every matmul input, keyed by activation-site name.
using ActivationHook = std::function<Var(Var, const std::string& site)>;
// Replaces a whole linear layer (input hook and weight binding included);
// used by the integer inference path.
using LinearOverride = std::function<Var(Tape&, Var x, const Linear&, const std::string& site)>;

struct ForwardOptions {
    bool capture_hidden = false;
    bool capture_attention = false;
    bool last_layer_attention_only = false;
    bool capture_layer_outputs = false;
    bool trainable = true;
    const ParamBinder* binder = nullptr;
    const ActivationHook* activation_hook = nullptr;
    const LinearOverride* linear_override = nullptr;
};

struct ForwardVars {
    Var logits;               // [batch x classes]
    Var sequence_output;      // [batch*seq x hidden], pre-pooler
    Var embedding_output;     // [batch*seq x hidden]
    std::vector<Var> layer_outputs;
    std::vector<Tensor> attention;  // per captured layer: [batch x heads x seq x seq]
};

// Tape-level forward pass; building block for training and calibration.
ForwardVars forward_on_tape(const TransformerModel& model, Tape& tape, const Batch& batch,
                            const ForwardOptions& opts = {});

// Pieces of the forward pass, used by module-wise calibration.
Var bind_param(Tape& tape, const Parameter& p, const ForwardOptions& opts);
Var embed_on_tape(const TransformerModel& model, Tape& tape, const Batch& batch, const ForwardOptions& opts);
Var block_on_tape(const TransformerModel& model, std::size_t layer, Tape& tape, Var x, const Batch& batch,
                  const ForwardOptions& opts, Tensor* attention_out = nullptr);
Var head_on_tape(const TransformerModel& model, Tape& tape, Var sequence_output, const Batch& batch,
                 const ForwardOptions& opts);

// Masked mean over positions, passed through the projector when present.
// This is the hidden representation aligned by the distillation MSE.
Var aligned_hidden(const TransformerModel& model, Tape& tape, Var sequence_output, const Batch& batch,
                   const ForwardOptions& opts);

struct ForwardTrace {
    Tensor logits;                   // [batch x classes]
    Tensor hidden;                   // [batch x seq x hidden], when requested
    std::vector<Tensor> attention;   // [batch x heads x seq x seq] per captured layer
    std::vector<int> mask;
};

struct CaptureFlags {
    bool hidden = false;
    bool attention = false;
    bool last_layer_only = false;
};

// Inference forward pass (no gradients kept).
ForwardTrace forward(const TransformerModel& model, const Batch& batch, CaptureFlags capture = {});

// Copies the teacher's pooler and classifier into the student. A projector
// [student_hidden x teacher_hidden] is inserted in front of the pooler when
// the widths differ or force_projector is set; it starts as a (partial)
// identity map.
void integrate_head(const TransformerModel& teacher, TransformerModel& student, bool force_projector = false);

// Adds a projector used only for hidden-state alignment (KD baseline, where
// the student keeps its own head).
void attach_alignment_projector(TransformerModel& student, std::size_t teacher_hidden);

// Validates ids against the vocabulary and mask values.
void validate_batch(const TransformerModel& model, const Batch& batch);

}  // namespace eib
