#include "eib/model/accounting.hpp"

namespace eib {

Component component_of(const std::string& name) {
    if (name.rfind("embeddings.", 0) == 0) return Component::Embeddings;
    if (name.rfind("blocks.", 0) == 0) return Component::Blocks;
    return Component::Head;
}

bool is_quantizable(const Parameter& p) { return p.value.rank() == 2; }

StorageBreakdown storage_bytes(const TransformerModel& model, StoragePrecision precision) {
    StorageBreakdown out;
    for (const Parameter* p : model.parameters()) {
        std::uint64_t bytes = 4 * p->value.size();
        if (precision == StoragePrecision::Int8WithFp32Steps && is_quantizable(*p)) bytes = p->value.size() + 4;
        switch (component_of(p->name)) {
            case Component::Embeddings: out.embeddings += bytes; break;
            case Component::Blocks: out.blocks += bytes; break;
            case Component::Head: out.head += bytes; break;
        }
    }
    return out;
}

std::uint64_t count_ops(const ModelSpec& s, std::size_t head_dim, bool projector, std::size_t seq_len) {
    const std::uint64_t S = seq_len, H = s.hidden_dim, I = s.intermediate_dim, D = head_dim;
    std::uint64_t macs = 0;
    if (s.factorized_embedding) macs += S * s.embed_dim * H;
    const std::uint64_t layer = 4 * S * H * H + 2 * S * S * H + 2 * S * H * I;
    macs += s.num_layers * layer;
    if (projector) macs += H * D;
    macs += D * D + D * s.num_classes;
    return 2 * macs;
}

OpsCount count_ops(const TransformerModel& model, std::size_t seq_len, bool quantized) {
    if (seq_len > model.spec.max_seq_len) {
        fail(ErrorKind::InvalidShape, "seq_len " + std::to_string(seq_len) + " exceeds max_seq_len");
    }
    return OpsCount{count_ops(model.spec, model.head_dim(), model.head_uses_projector, seq_len), quantized};
}

double compression_ratio(double teacher_bytes, double model_bytes) {
    if (!(model_bytes > 0)) fail(ErrorKind::InvalidShape, "model size must be positive");
    return teacher_bytes / model_bytes;
}

EmbeddingShare embedding_share(const EncoderConfig& c) {
    auto lin = [](std::uint64_t in, std::uint64_t out) { return in * out + out; };
    const std::uint64_t h = c.hidden, i = c.intermediate;
    EmbeddingShare s;
    s.token_embedding = static_cast<std::uint64_t>(c.vocab) * c.embed;
    std::uint64_t total = s.token_embedding + static_cast<std::uint64_t>(c.positions) * c.embed +
                          static_cast<std::uint64_t>(c.token_types) * c.embed + 2 * c.embed;
    if (c.embed != c.hidden) total += lin(c.embed, h);
    const std::uint64_t block = 4 * lin(h, h) + 2 * h + lin(h, i) + lin(i, h) + 2 * h;
    total += (c.shared ? 1 : c.layers) * block;
    total += lin(h, h);  // pooler
    s.total = total;
    return s;
}

EncoderConfig albert_tiny_reference() {
    // Chinese ALBERT-tiny dimensions with unshared encoder weights, three
    // layers counted.
    return EncoderConfig{"albert-tiny (vocab 21128, embed 128, hidden 312, ffn 1248, 3 unshared layers)",
                         21128, 128, 312, 1248, 3, 512, 2, false};
}

}  // namespace eib
