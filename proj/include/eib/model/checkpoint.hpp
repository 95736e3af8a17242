#pragma once

// "EIBT" checkpoint container:
//   magic "EIBT" | u32 LE format version | u64 LE header length |
//   UTF-8 JSON header | raw little-endian tensor data.
// The header lists every tensor with name, dtype, shape, byte offset into the
// data blob and, for i8 tensors, the name of its step-size scalar.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "eib/model/transformer.hpp"

namespace eib {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType { F32, F64, I8 };
const char* to_string(DType d);

struct StoredTensor {
    std::string name;
    Shape shape;
    std::variant<std::vector<float>, std::vector<double>, std::vector<std::int8_t>> data;
    std::string step;  // i8 tensors only

    DType dtype() const;
};

struct Checkpoint {
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<StoredTensor> tensors;

    const StoredTensor* find(const std::string& name) const;
    const StoredTensor& at(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws ErrorKind::Format (with the byte offset) on bad magic, unknown
// version, truncation or an inconsistent header.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Float model <-> checkpoint. Values are stored as f32 in 32-bit mode and
// f64 in 64-bit mode so the round trip is exact in both.
Checkpoint model_to_checkpoint(const TransformerModel& model);
TransformerModel model_from_checkpoint(const Checkpoint& ckpt);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

StoredTensor store_real(const std::string& name, const Tensor& t);
Tensor load_real(const StoredTensor& st);

}  // namespace eib
