#pragma once

// Module-wise post-training int8 quantization. The model is cut into an
// embedding module, groups of encoder layers and a head module; each
// module's weights and per-tensor step sizes are tuned to reproduce the
// full-precision module outputs.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "eib/model/checkpoint.hpp"
#include "eib/model/transformer.hpp"

namespace eib {

inline constexpr int kQMax = 127;
inline constexpr Real kMinStep = 1e-8;

enum class ModuleKind { Embedding, Blocks, Head };

struct QuantModuleSpec {
    std::string name;
    ModuleKind kind = ModuleKind::Embedding;
    std::size_t layer_begin = 0, layer_end = 0;  // [begin, end), block modules only
    std::vector<std::string> params;             // quantizable weight names
};

struct QuantPartition {
    std::size_t group_size = 1;
    std::vector<QuantModuleSpec> modules;
};

QuantPartition partition(const TransformerModel& model, std::size_t group_size);

// clamp(round_half_away(w / s), -127, 127). Throws ErrorKind::Step for s <= 0.
IntTensor quantize_project(const Tensor& w, Real step);
Tensor dequantize(const IntTensor& codes, Real step);
// max|w| / 127, floored at kMinStep.
Real init_step(const Tensor& w);

struct QuantConfig {
    std::size_t group_size = 1;
    std::size_t iters = 200;
    Real lr = 1e-4;
    std::size_t batch_size = 32;
    bool compensate = true;           // false: every module sees full-precision inputs
    bool quantize_activations = true;

    void validate() const;
};

struct QuantTensor {
    IntTensor codes;
    Real step = 0;
};

struct QuantizedModel {
    TransformerModel model;  // quantized weights hold step * code; the rest stays float
    std::map<std::string, QuantTensor> weights;
    std::map<std::string, Real> activation_scales;  // empty: activations stay float
};

// Max-abs / 127 at every matmul input of the full-precision model.
std::map<std::string, Real> activation_scales(const TransformerModel& model, std::span<const Batch> batches);

// Cached inputs and full-precision targets of one module, per batch.
struct ModuleData {
    std::vector<Tensor> inputs;                // hidden states (unused by the embedding module)
    std::vector<std::vector<Tensor>> targets;  // per batch, one per output in the module
};

struct ModuleCalibration {
    std::vector<Tensor> weights;  // tuned w_n, in module.params order
    std::vector<Real> steps;      // tuned s_n
    std::vector<Real> trace;      // error before the first and after every iteration
    std::size_t accepted = 0;
    std::string warning;

    Real initial_err() const { return trace.front(); }
    Real final_err() const { return trace.back(); }
};

// Minimizes the summed mean-squared output error of one module with Adam
// through a straight-through quantizer. Steps that raise the error are
// rejected and halve the learning rate, so the trace never increases. A
// non-finite error restores the initial state and sets `warning`.
// `model` holds the starting weights; `steps` the starting step sizes.
ModuleCalibration calibrate_module(const TransformerModel& model, const QuantModuleSpec& module,
                                   std::span<const Batch> batches, const ModuleData& data,
                                   const std::map<std::string, Real>& act_scales, std::vector<Real> steps,
                                   std::size_t iters, Real lr);

// Module error of the given weights/steps without optimizing.
Real module_error(const TransformerModel& model, const QuantModuleSpec& module, std::span<const Batch> batches,
                  const ModuleData& data, const std::map<std::string, Real>& act_scales,
                  const std::vector<Real>& steps);

struct ModuleReport {
    std::string module;
    Real initial_err = 0, final_err = 0;
    std::size_t iterations = 0, accepted = 0;
    std::vector<Real> trace;
    std::string warning;
};

struct QuantReport {
    std::vector<ModuleReport> modules;
    std::string csv() const;  // module,initial_err,final_err,iterations
};

struct QuantResult {
    QuantizedModel qmodel;
    QuantReport report;
};

// Calibrates modules in forward order. With `compensate`, module n sees the
// outputs of the already-quantized modules before it; targets always come
// from the full-precision model.
QuantResult quantize_model(const TransformerModel& model, const QuantPartition& part,
                           std::span<const Batch> calib, const QuantConfig& cfg);

enum class MatmulPath { Integer, FloatSim };

// Logits of the quantized model. Integer: int8 x int8 products accumulated
// in int32 and rescaled by activation * weight scale. FloatSim: the same
// network evaluated in floating point on dequantized weights and
// fake-quantized activations.
Tensor quantized_forward(const QuantizedModel& q, const Batch& batch, MatmulPath path = MatmulPath::Integer);

// int8 codes x with scale a times weight codes with step s, as floats.
Tensor integer_linear(const Tensor& x, Real act_scale, const QuantTensor& w, const Tensor* bias);

Checkpoint qmodel_to_checkpoint(const QuantizedModel& q);
QuantizedModel qmodel_from_checkpoint(const Checkpoint& ckpt);

}  // namespace eib
