#include "eib/model/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "eib/numerics/precision.hpp"

namespace eib {

void ModelSpec::validate() const {
    auto bad = [](const std::string& m) { fail(ErrorKind::Spec, m); };
    if (vocab_size == 0 || max_seq_len == 0 || embed_dim == 0 || hidden_dim == 0 || intermediate_dim == 0 ||
        num_layers == 0 || num_heads == 0 || num_classes == 0) {
        bad("all model dimensions must be positive");
    }
    if (hidden_dim % num_heads != 0) bad("hidden_dim must be divisible by num_heads");
    if (factorized_embedding && embed_dim > hidden_dim) bad("factorized embedding needs embed_dim <= hidden_dim");
    if (!factorized_embedding && embed_dim != hidden_dim) bad("unfactorized embedding needs embed_dim == hidden_dim");
}

namespace {

class Initializer {
  public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    Parameter normal(std::string name, Shape shape) {
        Parameter p{std::move(name), Tensor(std::move(shape))};
        std::normal_distribution<double> dist(0.0, 1.0);
        for (Real& v : p.value.data()) {
            double z;
            do {
                z = dist(rng_);
            } while (std::abs(z) > 2.0);
            v = 0.02 * z;
        }
        return p;
    }

    static Parameter constant(std::string name, Shape shape, Real v) {
        return Parameter{std::move(name), Tensor(std::move(shape), v)};
    }

    Linear linear(const std::string& name, std::size_t in, std::size_t out, bool bias = true) {
        Linear l{normal(name + ".weight", {in, out}), std::nullopt};
        if (bias) l.bias = constant(name + ".bias", {out}, 0.0);
        return l;
    }

    static LayerNormParams norm(const std::string& name, std::size_t d) {
        return LayerNormParams{constant(name + ".gamma", {d}, 1.0), constant(name + ".beta", {d}, 0.0)};
    }

  private:
    std::mt19937_64 rng_;
};

void push_linear(std::vector<Parameter*>& out, Linear& l) {
    out.push_back(&l.weight);
    if (l.bias) out.push_back(&*l.bias);
}

void push_norm(std::vector<Parameter*>& out, LayerNormParams& n) {
    out.push_back(&n.gamma);
    out.push_back(&n.beta);
}

std::size_t linear_count(std::size_t in, std::size_t out, bool bias = true) { return in * out + (bias ? out : 0); }

std::string layer_site(std::size_t layer, const char* what) {
    return "layer" + std::to_string(layer) + "." + what;
}

}  // namespace

std::vector<Parameter*> TransformerModel::parameters() {
    std::vector<Parameter*> out;
    out.push_back(&token_embedding);
    if (embed_projection) push_linear(out, *embed_projection);
    out.push_back(&position_embedding);
    push_norm(out, embed_norm);
    for (EncoderBlock& b : blocks) {
        push_linear(out, b.query);
        push_linear(out, b.key);
        push_linear(out, b.value);
        push_linear(out, b.output);
        push_norm(out, b.attn_norm);
        push_linear(out, b.ffn_in);
        push_linear(out, b.ffn_out);
        push_norm(out, b.ffn_norm);
    }
    if (projector) push_linear(out, *projector);
    push_linear(out, pooler);
    push_linear(out, classifier);
    return out;
}

std::vector<const Parameter*> TransformerModel::parameters() const {
    auto ps = const_cast<TransformerModel*>(this)->parameters();
    return {ps.begin(), ps.end()};
}

std::size_t TransformerModel::parameter_count() const {
    std::size_t n = 0;
    for (const Parameter* p : parameters()) n += p->value.size();
    return n;
}

Parameter* TransformerModel::find(const std::string& name) {
    for (Parameter* p : parameters())
        if (p->name == name) return p;
    return nullptr;
}

const Parameter* TransformerModel::find(const std::string& name) const {
    return const_cast<TransformerModel*>(this)->find(name);
}

std::size_t expected_parameter_count(const ModelSpec& s) {
    const std::size_t h = s.hidden_dim, i = s.intermediate_dim;
    std::size_t n = s.vocab_size * s.embed_dim;
    if (s.factorized_embedding) n += linear_count(s.embed_dim, h);
    n += s.max_seq_len * h + 2 * h;
    const std::size_t block = 4 * linear_count(h, h) - h + 2 * h + linear_count(h, i) + linear_count(i, h) + 2 * h;
    n += (s.share_layers ? 1 : s.num_layers) * block;
    n += linear_count(h, h) + linear_count(h, s.num_classes);
    return n;
}

TransformerModel build_model(const ModelSpec& spec) {
    spec.validate();
    Initializer init(spec.seed);
    TransformerModel m;
    m.spec = spec;
    const std::size_t h = spec.hidden_dim;
    m.token_embedding = init.normal("embeddings.token", {spec.vocab_size, spec.embed_dim});
    if (spec.factorized_embedding) m.embed_projection = init.linear("embeddings.projection", spec.embed_dim, h);
    m.position_embedding = init.normal("embeddings.position", {spec.max_seq_len, h});
    m.embed_norm = Initializer::norm("embeddings.norm", h);
    const std::size_t nblocks = spec.share_layers ? 1 : spec.num_layers;
    for (std::size_t b = 0; b < nblocks; ++b) {
        const std::string p = "blocks." + std::to_string(b);
        EncoderBlock blk{init.linear(p + ".attn.query", h, h),
                         init.linear(p + ".attn.key", h, h, false),
                         init.linear(p + ".attn.value", h, h),
                         init.linear(p + ".attn.output", h, h),
                         Initializer::norm(p + ".attn.norm", h),
                         init.linear(p + ".ffn.in", h, spec.intermediate_dim),
                         init.linear(p + ".ffn.out", spec.intermediate_dim, h),
                         Initializer::norm(p + ".ffn.norm", h)};
        m.blocks.push_back(std::move(blk));
    }
    m.pooler = init.linear("head.pooler", h, h);
    m.classifier = init.linear("head.classifier", h, spec.num_classes);
    for (Parameter* p : m.parameters()) round_to_precision(p->value);
    return m;
}

void validate_batch(const TransformerModel& model, const Batch& batch) {
    if (batch.ids.size() != batch.batch * batch.seq || batch.mask.size() != batch.ids.size()) {
        fail(ErrorKind::InvalidShape, "batch ids/mask do not match batch x seq");
    }
    if (batch.seq == 0 || batch.seq > model.spec.max_seq_len) {
        fail(ErrorKind::InvalidShape, "sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                                          std::to_string(model.spec.max_seq_len));
    }
    for (int id : batch.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= model.spec.vocab_size) {
            fail(ErrorKind::Vocab, "token id " + std::to_string(id) + " outside vocabulary of " +
                                       std::to_string(model.spec.vocab_size));
        }
    }
    for (int v : batch.mask)
        if (v != 0 && v != 1) fail(ErrorKind::InvalidShape, "mask values must be 0 or 1");
}

Var bind_param(Tape& tape, const Parameter& p, const ForwardOptions& opts) {
    if (opts.binder) return (*opts.binder)(tape, p);
    return tape.leaf(p, opts.trainable);
}

namespace {

Var hook(const ForwardOptions& opts, Var x, const std::string& site) {
    return opts.activation_hook ? (*opts.activation_hook)(x, site) : x;
}

Var apply_linear(Tape& tape, const Linear& l, Var x, const ForwardOptions& opts, const std::string& site) {
    if (opts.linear_override) return (*opts.linear_override)(tape, x, l, site);
    return ag::linear(hook(opts, x, site), bind_param(tape, l.weight, opts),
                      l.bias ? bind_param(tape, *l.bias, opts) : Var{});
}

}  // namespace

Var embed_on_tape(const TransformerModel& model, Tape& tape, const Batch& batch, const ForwardOptions& opts) {
    std::vector<std::size_t> ids(batch.ids.begin(), batch.ids.end());
    Var x = ag::gather_rows(bind_param(tape, model.token_embedding, opts), std::move(ids));
    if (model.embed_projection) x = apply_linear(tape, *model.embed_projection, x, opts, "embed.projection.in");
    std::vector<std::size_t> pos(batch.batch * batch.seq);
    for (std::size_t r = 0; r < pos.size(); ++r) pos[r] = r % batch.seq;
    Var p = ag::gather_rows(bind_param(tape, model.position_embedding, opts), std::move(pos));
    return ag::layernorm(ag::add(x, p), bind_param(tape, model.embed_norm.gamma, opts),
                         bind_param(tape, model.embed_norm.beta, opts));
}

Var block_on_tape(const TransformerModel& model, std::size_t layer, Tape& tape, Var x, const Batch& batch,
                  const ForwardOptions& opts, Tensor* attention_out) {
    const EncoderBlock& b = model.block_for_layer(layer);
    const std::string qkv_site = layer_site(layer, "qkv.in");
    Var xin = opts.linear_override ? x : hook(opts, x, qkv_site);
    auto proj = [&](const Linear& l) {
        if (opts.linear_override) return (*opts.linear_override)(tape, x, l, qkv_site);
        return ag::linear(xin, bind_param(tape, l.weight, opts), l.bias ? bind_param(tape, *l.bias, opts) : Var{});
    };
    Var q = proj(b.query), k = proj(b.key), v = proj(b.value);
    Var ctx = ag::attention(q, k, v, batch.mask, {batch.batch, batch.seq, model.spec.num_heads}, attention_out);
    Var attn = apply_linear(tape, b.output, ctx, opts, layer_site(layer, "attn_out.in"));
    Var h = ag::layernorm(ag::add(x, attn), bind_param(tape, b.attn_norm.gamma, opts),
                          bind_param(tape, b.attn_norm.beta, opts));
    Var f = ag::gelu(apply_linear(tape, b.ffn_in, h, opts, layer_site(layer, "ffn_in.in")));
    f = apply_linear(tape, b.ffn_out, f, opts, layer_site(layer, "ffn_out.in"));
    return ag::layernorm(ag::add(h, f), bind_param(tape, b.ffn_norm.gamma, opts),
                         bind_param(tape, b.ffn_norm.beta, opts));
}

Var head_on_tape(const TransformerModel& model, Tape& tape, Var sequence_output, const Batch& batch,
                 const ForwardOptions& opts) {
    std::vector<std::size_t> first(batch.batch);
    for (std::size_t b = 0; b < batch.batch; ++b) first[b] = b * batch.seq;
    Var x = ag::select_rows(sequence_output, std::move(first));
    if (model.head_uses_projector) {
        if (!model.projector) fail(ErrorKind::Integration, "head expects a projector but none is present");
        x = apply_linear(tape, *model.projector, x, opts, "head.projector.in");
    }
    x = ag::tanh(apply_linear(tape, model.pooler, x, opts, "head.pooler.in"));
    return apply_linear(tape, model.classifier, x, opts, "head.classifier.in");
}

Var aligned_hidden(const TransformerModel& model, Tape& tape, Var sequence_output, const Batch& batch,
                   const ForwardOptions& opts) {
    Var pooled = ag::masked_mean(sequence_output, batch.mask, batch.batch, batch.seq);
    if (model.projector) pooled = apply_linear(tape, *model.projector, pooled, opts, "align.projector.in");
    return pooled;
}

ForwardVars forward_on_tape(const TransformerModel& model, Tape& tape, const Batch& batch,
                            const ForwardOptions& opts) {
    validate_batch(model, batch);
    ForwardVars out;
    Var x = embed_on_tape(model, tape, batch, opts);
    out.embedding_output = x;
    const std::size_t L = model.spec.num_layers;
    for (std::size_t l = 0; l < L; ++l) {
        const bool capture = opts.capture_attention && (!opts.last_layer_attention_only || l + 1 == L);
        Tensor probs;
        x = block_on_tape(model, l, tape, x, batch, opts, capture ? &probs : nullptr);
        if (capture) out.attention.push_back(std::move(probs));
        if (opts.capture_layer_outputs) out.layer_outputs.push_back(x);
    }
    out.sequence_output = x;
    out.logits = head_on_tape(model, tape, x, batch, opts);
    return out;
}

ForwardTrace forward(const TransformerModel& model, const Batch& batch, CaptureFlags capture) {
    Tape tape;
    ForwardOptions opts;
    opts.trainable = false;
    opts.capture_attention = capture.attention;
    opts.last_layer_attention_only = capture.last_layer_only;
    ForwardVars v = forward_on_tape(model, tape, batch, opts);
    ForwardTrace t;
    t.logits = v.logits.value();
    if (capture.hidden) t.hidden = v.sequence_output.value().reshaped({batch.batch, batch.seq, model.spec.hidden_dim});
    t.attention = std::move(v.attention);
    t.mask = batch.mask;
    return t;
}

namespace {

Linear identity_projector(std::size_t in, std::size_t out) {
    Linear l{Parameter{"projector.weight", Tensor({in, out})}, Parameter{"projector.bias", Tensor({out})}};
    for (std::size_t i = 0; i < std::min(in, out); ++i) l.weight.value.at(i, i) = 1.0;
    return l;
}

Linear renamed_copy(const Linear& src, const std::string& name) {
    Linear l{Parameter{name + ".weight", src.weight.value}, std::nullopt};
    if (src.bias) l.bias = Parameter{name + ".bias", src.bias->value};
    return l;
}

}  // namespace

void integrate_head(const TransformerModel& teacher, TransformerModel& student, bool force_projector) {
    if (teacher.spec.num_classes != student.spec.num_classes) {
        fail(ErrorKind::Integration, "teacher has " + std::to_string(teacher.spec.num_classes) +
                                         " classes, student has " + std::to_string(student.spec.num_classes));
    }
    const std::size_t hs = student.spec.hidden_dim, ht = teacher.head_dim();
    student.pooler = renamed_copy(teacher.pooler, "head.pooler");
    student.classifier = renamed_copy(teacher.classifier, "head.classifier");
    if (hs != ht || force_projector) {
        student.projector = identity_projector(hs, ht);
        student.head_uses_projector = true;
    } else {
        student.projector.reset();
        student.head_uses_projector = false;
    }
}

void attach_alignment_projector(TransformerModel& student, std::size_t teacher_hidden) {
    student.projector = identity_projector(student.spec.hidden_dim, teacher_hidden);
    student.head_uses_projector = false;
}

}  // namespace eib
