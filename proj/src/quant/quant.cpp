#include "eib/quant/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <unordered_map>

#include "eib/distill/optimizer.hpp"
#include "eib/numerics/kernels.hpp"
#include "eib/numerics/precision.hpp"

namespace eib {

namespace {

Real to_f32(Real v) { return static_cast<Real>(static_cast<float>(v)); }

void add_weight(QuantModuleSpec& m, const Linear& l) { m.params.push_back(l.weight.name); }

void add_block(QuantModuleSpec& m, const EncoderBlock& b) {
    for (const Linear* l : {&b.query, &b.key, &b.value, &b.output, &b.ffn_in, &b.ffn_out}) add_weight(m, *l);
}

Parameter& param(TransformerModel& m, const std::string& name) {
    Parameter* p = m.find(name);
    if (!p) fail(ErrorKind::Spec, "model has no parameter '" + name + "'");
    return *p;
}

ActivationHook quant_hook(const std::map<std::string, Real>& scales) {
    return [&scales](Var x, const std::string& site) {
        auto it = scales.find(site);
        if (it == scales.end()) fail(ErrorKind::Spec, "no activation scale for site '" + site + "'");
        return ag::fake_quant_fixed(x, it->second, kQMax);
    };
}

// Outputs of one module on a tape, in target order.
std::vector<Var> module_outputs(const TransformerModel& model, const QuantModuleSpec& mod, Tape& tape,
                                const Batch& batch, const Tensor* input, const ForwardOptions& opts) {
    std::vector<Var> out;
    switch (mod.kind) {
        case ModuleKind::Embedding: out.push_back(embed_on_tape(model, tape, batch, opts)); break;
        case ModuleKind::Blocks: {
            Var x = tape.constant(*input);
            for (std::size_t l = mod.layer_begin; l < mod.layer_end; ++l) {
                x = block_on_tape(model, l, tape, x, batch, opts);
                out.push_back(x);
            }
            break;
        }
        case ModuleKind::Head: out.push_back(head_on_tape(model, tape, tape.constant(*input), batch, opts)); break;
    }
    return out;
}

struct Evaluation {
    Real loss = 0;
    std::vector<Tensor> grads;  // weights then steps
};

// Module error (and gradients) over every calibration batch. Batches run in
// parallel; the reduction is in batch order.
class ModuleObjective {
  public:
    ModuleObjective(const TransformerModel& model, const QuantModuleSpec& mod, std::span<const Batch> batches,
                    const ModuleData& data, const std::map<std::string, Real>& scales,
                    std::vector<const Parameter*> weights, std::vector<const Parameter*> steps)
        : model_(model), mod_(mod), batches_(batches), data_(data), scales_(scales),
          weights_(std::move(weights)), steps_(std::move(steps)) {
        for (std::size_t i = 0; i < weights_.size(); ++i) step_of_[weights_[i]] = steps_[i];
        if (data_.targets.size() != batches_.size()) fail(ErrorKind::InvalidShape, "one target set per batch");
        if (mod_.kind != ModuleKind::Embedding && data_.inputs.size() != batches_.size()) {
            fail(ErrorKind::InvalidShape, "one cached input per batch");
        }
    }

    Evaluation operator()(bool with_grads) const {
        const std::size_t nb = batches_.size();
        std::vector<Evaluation> parts(nb);
        std::vector<std::exception_ptr> errors(nb);
        const long long n = static_cast<long long>(nb);
#pragma omp parallel for schedule(static) if (nb > 1 && kernels::max_threads() > 1)
        for (long long i = 0; i < n; ++i) {
            try {
                parts[static_cast<std::size_t>(i)] = run_batch(static_cast<std::size_t>(i), with_grads);
            } catch (...) {
                errors[static_cast<std::size_t>(i)] = std::current_exception();
            }
        }
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
        Evaluation total = std::move(parts[0]);
        for (std::size_t b = 1; b < nb; ++b) {
            total.loss += parts[b].loss;
            for (std::size_t j = 0; j < total.grads.size(); ++j) {
                auto dst = total.grads[j].data();
                auto src = parts[b].grads[j].data();
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
            }
        }
        return total;
    }

  private:
    Evaluation run_batch(std::size_t b, bool with_grads) const {
        Tape tape;
        std::unordered_map<const Parameter*, Var> bound;
        ParamBinder binder = [&](Tape& t, const Parameter& p) {
            auto it = bound.find(&p);
            if (it != bound.end()) return it->second;
            auto s = step_of_.find(&p);
            Var v = s == step_of_.end() ? t.leaf(p, false) : ag::fake_quant(t.leaf(p), t.leaf(*s->second), kQMax);
            bound.emplace(&p, v);
            return v;
        };
        ActivationHook hook = quant_hook(scales_);
        ForwardOptions opts;
        opts.binder = &binder;
        if (!scales_.empty()) opts.activation_hook = &hook;
        const Tensor* input = mod_.kind == ModuleKind::Embedding ? nullptr : &data_.inputs[b];
        const std::vector<Var> outs = module_outputs(model_, mod_, tape, batches_[b], input, opts);
        const auto& targets = data_.targets[b];
        if (targets.size() != outs.size()) fail(ErrorKind::InvalidShape, "module output/target count mismatch");
        std::vector<Var> terms;
        for (std::size_t l = 0; l < outs.size(); ++l) terms.push_back(ag::mse(outs[l], tape.constant(targets[l])));
        const std::vector<Real> w(terms.size(), 1.0 / static_cast<Real>(batches_.size()));
        Var loss = ag::weighted_sum(terms, w);
        Evaluation e;
        e.loss = loss.value().item();
        if (with_grads) {
            tape.backward(loss);
            for (const Parameter* p : weights_) e.grads.push_back(tape.param_grad(*p));
            for (const Parameter* p : steps_) e.grads.push_back(tape.param_grad(*p));
        }
        return e;
    }

    const TransformerModel& model_;
    const QuantModuleSpec& mod_;
    std::span<const Batch> batches_;
    const ModuleData& data_;
    const std::map<std::string, Real>& scales_;
    std::vector<const Parameter*> weights_, steps_;
    std::unordered_map<const Parameter*, const Parameter*> step_of_;
};

bool finite(const Evaluation& e) {
    if (!std::isfinite(e.loss)) return false;
    for (const Tensor& g : e.grads)
        for (Real v : g.data())
            if (!std::isfinite(v)) return false;
    return true;
}

// Copy of the model with the module's weights and step sizes as parameters.
struct Working {
    TransformerModel model;
    std::vector<Parameter*> weights;
    std::vector<Parameter> step_store;
    std::vector<Parameter*> steps;

    Working(const TransformerModel& m, const QuantModuleSpec& mod, const std::vector<Real>& s) : model(m) {
        if (s.size() != mod.params.size()) fail(ErrorKind::InvalidShape, "one step size per module weight");
        step_store.reserve(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!(s[i] > 0)) fail(ErrorKind::Step, "step size for '" + mod.params[i] + "' must be positive");
            weights.push_back(&param(model, mod.params[i]));
            step_store.push_back(Parameter{mod.params[i] + ".step", Tensor({1}, {s[i]})});
        }
        for (Parameter& p : step_store) steps.push_back(&p);
    }
    Working(const Working&) = delete;
    Working& operator=(const Working&) = delete;
};

ModuleObjective objective(const Working& w, const QuantModuleSpec& mod, std::span<const Batch> batches,
                          const ModuleData& data, const std::map<std::string, Real>& scales) {
    return ModuleObjective(w.model, mod, batches, data, scales,
                           std::vector<const Parameter*>(w.weights.begin(), w.weights.end()),
                           std::vector<const Parameter*>(w.steps.begin(), w.steps.end()));
}

void check_overflow(std::size_t k) {
    const long long worst = static_cast<long long>(k) * kQMax * kQMax;
    if (worst >= (1LL << 31)) {
        fail(ErrorKind::Spec, "int32 accumulator may overflow for inner dimension " + std::to_string(k));
    }
}

}  // namespace

QuantPartition partition(const TransformerModel& model, std::size_t g) {
    if (g == 0) fail(ErrorKind::Spec, "group size must be positive");
    QuantPartition part;
    part.group_size = g;

    QuantModuleSpec emb{"embeddings", ModuleKind::Embedding, 0, 0, {model.token_embedding.name}};
    if (model.embed_projection) add_weight(emb, *model.embed_projection);
    emb.params.push_back(model.position_embedding.name);
    part.modules.push_back(std::move(emb));

    const std::size_t L = model.spec.num_layers;
    // Shared weights can only be quantized once, so a shared encoder is one module.
    const std::size_t step = model.spec.share_layers ? L : g;
    for (std::size_t b = 0; b < L; b += step) {
        const std::size_t e = std::min(L, b + step);
        QuantModuleSpec m{"blocks[" + std::to_string(b) + "," + std::to_string(e) + ")", ModuleKind::Blocks, b, e, {}};
        if (model.spec.share_layers) {
            add_block(m, model.blocks[0]);
        } else {
            for (std::size_t l = b; l < e; ++l) add_block(m, model.blocks[l]);
        }
        part.modules.push_back(std::move(m));
    }

    QuantModuleSpec head{"head", ModuleKind::Head, L, L, {}};
    if (model.projector) add_weight(head, *model.projector);
    add_weight(head, model.pooler);
    add_weight(head, model.classifier);
    part.modules.push_back(std::move(head));
    return part;
}

IntTensor quantize_project(const Tensor& w, Real s) {
    if (!(s > 0)) fail(ErrorKind::Step, "step size must be positive, got " + std::to_string(s));
    std::vector<std::int8_t> codes(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) codes[i] = static_cast<std::int8_t>(quantize_code(w[i] / s, kQMax));
    return IntTensor(w.shape(), std::move(codes));
}

Tensor dequantize(const IntTensor& q, Real s) {
    Tensor out(q.shape());
    for (std::size_t i = 0; i < q.size(); ++i) out[i] = s * q[i];
    return out;
}

Real init_step(const Tensor& w) {
    if (w.size() == 0) fail(ErrorKind::InvalidShape, "cannot size a step for an empty tensor");
    Real mx = 0;
    for (Real v : w.data()) mx = std::max(mx, std::abs(v));
    return std::max(mx / kQMax, kMinStep);
}

void QuantConfig::validate() const {
    if (group_size == 0) fail(ErrorKind::Config, "quant group_size must be positive");
    if (!(lr >= 0) || !std::isfinite(lr)) fail(ErrorKind::Config, "quant lr must be a finite non-negative number");
    if (batch_size == 0) fail(ErrorKind::Config, "quant batch_size must be positive");
}

std::map<std::string, Real> activation_scales(const TransformerModel& model, std::span<const Batch> batches) {
    std::map<std::string, Real> maxabs;
    ActivationHook probe = [&](Var x, const std::string& site) {
        Real& m = maxabs[site];
        for (Real v : x.value().data()) m = std::max(m, std::abs(v));
        return x;
    };
    ForwardOptions opts;
    opts.trainable = false;
    opts.activation_hook = &probe;
    for (const Batch& b : batches) {
        Tape tape;
        forward_on_tape(model, tape, b, opts);
    }
    std::map<std::string, Real> out;
    for (const auto& [site, m] : maxabs) out[site] = to_f32(std::max(m / kQMax, kMinStep));
    return out;
}

Real module_error(const TransformerModel& model, const QuantModuleSpec& mod, std::span<const Batch> batches,
                  const ModuleData& data, const std::map<std::string, Real>& scales, const std::vector<Real>& steps) {
    const Working w(model, mod, steps);
    return objective(w, mod, batches, data, scales)(false).loss;
}

ModuleCalibration calibrate_module(const TransformerModel& model, const QuantModuleSpec& mod,
                                   std::span<const Batch> batches, const ModuleData& data,
                                   const std::map<std::string, Real>& scales, std::vector<Real> steps,
                                   std::size_t iters, Real lr) {
    if (batches.empty()) fail(ErrorKind::Corpus, "calibration needs at least one batch");
    Working w(model, mod, steps);
    const ModuleObjective f = objective(w, mod, batches, data, scales);

    auto snapshot = [&] {
        std::vector<Tensor> v;
        for (Parameter* p : w.weights) v.push_back(p->value);
        for (Parameter* p : w.steps) v.push_back(p->value);
        return v;
    };
    auto restore = [&](const std::vector<Tensor>& v) {
        std::size_t i = 0;
        for (Parameter* p : w.weights) p->value = v[i++];
        for (Parameter* p : w.steps) p->value = v[i++];
    };
    auto result = [&](ModuleCalibration& c) {
        for (Parameter* p : w.weights) c.weights.push_back(p->value);
        for (Parameter* p : w.steps) c.steps.push_back(p->value[0]);
    };

    ModuleCalibration cal;
    const auto initial = snapshot();
    Evaluation cur = f(iters > 0);
    cal.trace.push_back(cur.loss);
    if (iters == 0 || lr == 0) {
        result(cal);
        return cal;
    }

    std::vector<Parameter*> all = w.weights;
    all.insert(all.end(), w.steps.begin(), w.steps.end());
    Adam adam(all, lr);
    const Real min_lr = lr * std::ldexp(1.0, -20);
    for (std::size_t it = 0; it < iters; ++it) {
        if (!finite(cur)) {
            cal.warning = "non-finite reconstruction error before iteration " + std::to_string(it + 1) +
                          "; module kept at its initial quantization";
            break;
        }
        const auto saved = snapshot();
        const Adam saved_adam = adam;
        adam.step(cur.grads);
        for (Parameter* s : w.steps) s->value[0] = to_f32(std::max(s->value[0], kMinStep));
        Evaluation next = f(true);
        if (!finite(next)) {
            restore(initial);
            cal.warning = "non-finite reconstruction error at iteration " + std::to_string(it + 1) +
                          "; module reverted to its initial quantization";
            cal.trace.push_back(cal.trace.front());
            break;
        }
        if (next.loss <= cur.loss) {
            cur = std::move(next);
            ++cal.accepted;
        } else {
            restore(saved);
            adam = saved_adam;
            adam.set_lr(adam.lr() / 2);
        }
        cal.trace.push_back(cur.loss);
        if (adam.lr() < min_lr) break;
    }
    result(cal);
    return cal;
}

std::string QuantReport::csv() const {
    std::string out = "module,initial_err,final_err,iterations\n";
    char buf[128];
    for (const ModuleReport& m : modules) {
        std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%zu\n", m.initial_err, m.final_err, m.iterations);
        out += m.module + buf;
    }
    return out;
}

QuantResult quantize_model(const TransformerModel& model, const QuantPartition& part, std::span<const Batch> calib,
                           const QuantConfig& cfg) {
    cfg.validate();
    if (calib.empty()) fail(ErrorKind::Corpus, "calibration set is empty");

    QuantResult res;
    QuantizedModel& q = res.qmodel;
    q.model = model;
    if (cfg.quantize_activations) q.activation_scales = activation_scales(model, calib);
    const ActivationHook hook = quant_hook(q.activation_scales);
    const std::size_t nb = calib.size(), L = model.spec.num_layers;

    // Full-precision references.
    std::vector<Tensor> emb(nb), logits(nb);
    std::vector<std::vector<Tensor>> layers(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        Tape tape;
        ForwardOptions opts;
        opts.trainable = false;
        opts.capture_layer_outputs = true;
        const ForwardVars fv = forward_on_tape(model, tape, calib[b], opts);
        emb[b] = fv.embedding_output.value();
        logits[b] = fv.logits.value();
        for (const Var& v : fv.layer_outputs) layers[b].push_back(v.value());
    }

    std::vector<Tensor> stream = emb;  // input of the next module
    for (const QuantModuleSpec& mod : part.modules) {
        ModuleData data;
        data.targets.resize(nb);
        for (std::size_t b = 0; b < nb; ++b) {
            switch (mod.kind) {
                case ModuleKind::Embedding: data.targets[b] = {emb[b]}; break;
                case ModuleKind::Blocks:
                    for (std::size_t l = mod.layer_begin; l < mod.layer_end; ++l) data.targets[b].push_back(layers[b][l]);
                    data.inputs.push_back(cfg.compensate ? stream[b]
                                                         : (mod.layer_begin == 0 ? emb[b] : layers[b][mod.layer_begin - 1]));
                    break;
                case ModuleKind::Head:
                    data.targets[b] = {logits[b]};
                    data.inputs.push_back(cfg.compensate ? stream[b] : layers[b][L - 1]);
                    break;
            }
        }

        std::vector<Real> steps;
        for (const std::string& name : mod.params) steps.push_back(to_f32(init_step(param(q.model, name).value)));
        ModuleCalibration cal =
            calibrate_module(q.model, mod, calib, data, q.activation_scales, steps, cfg.iters, cfg.lr);
        for (std::size_t i = 0; i < mod.params.size(); ++i) {
            QuantTensor qt{quantize_project(cal.weights[i], cal.steps[i]), cal.steps[i]};
            param(q.model, mod.params[i]).value = dequantize(qt.codes, qt.step);
            q.weights[mod.params[i]] = std::move(qt);
        }
        res.report.modules.push_back(ModuleReport{mod.name, cal.initial_err(), cal.final_err(), cal.trace.size() - 1,
                                                  cal.accepted, cal.trace, cal.warning});

        if (cfg.compensate && mod.kind != ModuleKind::Head) {
            ForwardOptions opts;
            opts.trainable = false;
            if (!q.activation_scales.empty()) opts.activation_hook = &hook;
            for (std::size_t b = 0; b < nb; ++b) {
                Tape tape;
                const Tensor* in = mod.kind == ModuleKind::Embedding ? nullptr : &stream[b];
                stream[b] = module_outputs(q.model, mod, tape, calib[b], in, opts).back().value();
            }
        }
    }
    return res;
}

Tensor integer_linear(const Tensor& x, Real a, const QuantTensor& w, const Tensor* bias) {
    const std::size_t m = x.rows(), k = x.cols(), n = w.codes.cols();
    if (w.codes.rows() != k) fail(ErrorKind::InvalidShape, "integer linear: inner dimensions differ");
    if (bias && bias->size() != n) fail(ErrorKind::InvalidShape, "integer linear: bias width differs");
    check_overflow(k);
    std::vector<std::int8_t> qx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) qx[i] = static_cast<std::int8_t>(quantize_code(x[i] / a, kQMax));
    std::vector<std::int32_t> acc(m * n);
    kernels::igemm({m, n, k}, qx, w.codes.data(), acc);
    Tensor y({m, n});
    const Real scale = a * w.step;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] = acc[i * n + j] * scale + (bias ? (*bias)[j] : 0);
    return y;
}

Tensor quantized_forward(const QuantizedModel& q, const Batch& batch, MatmulPath path) {
    validate_batch(q.model, batch);
    Tape tape;
    ForwardOptions opts;
    opts.trainable = false;
    const ActivationHook hook = quant_hook(q.activation_scales);
    const LinearOverride integer = [&q](Tape& t, Var x, const Linear& l, const std::string& site) {
        auto s = q.activation_scales.find(site);
        if (s == q.activation_scales.end()) fail(ErrorKind::Spec, "no activation scale for site '" + site + "'");
        auto w = q.weights.find(l.weight.name);
        if (w == q.weights.end()) fail(ErrorKind::Spec, "weight '" + l.weight.name + "' is not quantized");
        return t.constant(integer_linear(x.value(), s->second, w->second, l.bias ? &l.bias->value : nullptr));
    };
    if (path == MatmulPath::Integer) {
        if (q.activation_scales.empty()) fail(ErrorKind::Spec, "integer path needs activation scales");
        opts.linear_override = &integer;
    } else if (!q.activation_scales.empty()) {
        opts.activation_hook = &hook;
    }
    return forward_on_tape(q.model, tape, batch, opts).logits.value();
}

Checkpoint qmodel_to_checkpoint(const QuantizedModel& q) {
    Checkpoint c = model_to_checkpoint(q.model);
    c.metadata["kind"] = "quantized";
    c.metadata["activation_scales"] = q.activation_scales;
    std::vector<StoredTensor> tensors;
    for (StoredTensor& st : c.tensors) {
        auto w = q.weights.find(st.name);
        if (w == q.weights.end()) {
            tensors.push_back(std::move(st));
            continue;
        }
        const auto codes = w->second.codes.data();
        const std::string step_name = st.name + ".step";
        tensors.push_back(StoredTensor{st.name, st.shape, std::vector<std::int8_t>(codes.begin(), codes.end()), step_name});
        tensors.push_back(StoredTensor{step_name, {1}, std::vector<float>{static_cast<float>(w->second.step)}, ""});
    }
    c.tensors = std::move(tensors);
    return c;
}

QuantizedModel qmodel_from_checkpoint(const Checkpoint& ckpt) {
    try {
        if (ckpt.metadata.at("kind").get<std::string>() != "quantized") {
            fail(ErrorKind::Format, "checkpoint does not hold a quantized model");
        }
        QuantizedModel q;
        Checkpoint flt;
        flt.metadata = ckpt.metadata;
        flt.metadata["kind"] = "float";
        std::vector<std::string> step_names;
        for (const StoredTensor& st : ckpt.tensors)
            if (st.dtype() == DType::I8) step_names.push_back(st.step);
        for (const StoredTensor& st : ckpt.tensors) {
            if (st.dtype() == DType::I8) {
                const StoredTensor& s = ckpt.at(st.step);
                const Tensor sv = load_real(s);
                if (sv.size() != 1 || !(sv[0] > 0)) fail(ErrorKind::Format, "bad step scalar '" + st.step + "'");
                const auto& codes = std::get<std::vector<std::int8_t>>(st.data);
                QuantTensor qt{IntTensor(st.shape, codes), sv[0]};
                // f64 keeps step * code exact
                flt.tensors.push_back(StoredTensor{st.name, st.shape, dequantize(qt.codes, qt.step).vec(), ""});
                q.weights[st.name] = std::move(qt);
            } else if (std::find(step_names.begin(), step_names.end(), st.name) == step_names.end()) {
                flt.tensors.push_back(st);
            }
        }
        q.model = model_from_checkpoint(flt);
        q.activation_scales = ckpt.metadata.at("activation_scales").get<std::map<std::string, Real>>();
        return q;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, std::string("bad quantized checkpoint metadata: ") + e.what());
    } catch (const std::bad_variant_access&) {
        fail(ErrorKind::Format, "quantized checkpoint tensor has an unexpected dtype");
    }
}

}  // namespace eib
