#pragma once

#include <cstdint>
#include <string>

#include "eib/model/transformer.hpp"

namespace eib {

enum class StoragePrecision { Fp32, Int8WithFp32Steps };

struct StorageBreakdown {
    std::uint64_t embeddings = 0;
    std::uint64_t blocks = 0;
    std::uint64_t head = 0;

    std::uint64_t total() const { return embeddings + blocks + head; }
};

enum class Component { Embeddings, Blocks, Head };
Component component_of(const std::string& param_name);

// Weight matrices are quantized to int8; vectors (biases, norms) stay fp32.
bool is_quantizable(const Parameter& p);

// fp32: 4 bytes per parameter. int8: 1 byte per quantized weight plus a
// 4-byte step per quantized tensor; remaining parameters at 4 bytes.
StorageBreakdown storage_bytes(const TransformerModel& model, StoragePrecision precision);

struct OpsCount {
    std::uint64_t ops = 0;  // 2 x multiply-accumulates
    bool integer = false;
    const char* label() const { return integer ? "IOPs" : "FLOPs"; }
};

// Operation count for one sequence of seq_len tokens: every matmul
// (projections, attention scores and context, FFN, embedding projection,
// head on the first token).
OpsCount count_ops(const TransformerModel& model, std::size_t seq_len, bool quantized);
std::uint64_t count_ops(const ModelSpec& spec, std::size_t head_dim, bool projector, std::size_t seq_len);

// teacher_bytes / model_bytes.
double compression_ratio(double teacher_bytes, double model_bytes);

// Parameter-count breakdown of an ALBERT-style encoder, used to reproduce
// the embedding-share figure for a published small configuration.
struct EncoderConfig {
    std::string name;
    std::size_t vocab = 0, embed = 0, hidden = 0, intermediate = 0, layers = 0, positions = 0, token_types = 0;
    bool shared = true;
};

struct EmbeddingShare {
    std::uint64_t token_embedding = 0;
    std::uint64_t total = 0;
    double share() const { return total ? static_cast<double>(token_embedding) / static_cast<double>(total) : 0; }
};

EmbeddingShare embedding_share(const EncoderConfig& cfg);

// Assumed public small ALBERT configuration used in reports.
EncoderConfig albert_tiny_reference();

}  // namespace eib
