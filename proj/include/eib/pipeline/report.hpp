#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "eib/distill/data.hpp"
#include "eib/model/accounting.hpp"
#include "eib/model/checkpoint.hpp"
#include "eib/quant/quant.hpp"

namespace eib {

// A float or quantized model loaded from a checkpoint, plus the vocabulary
// map of a pruned model (new id -> original id; empty when unpruned).
struct LoadedModel {
    bool quantized = false;
    TransformerModel model;   // float model, or the dequantized weights of `qmodel`
    QuantizedModel qmodel;
    std::vector<int> vocab_map;

    const TransformerModel& float_model() const { return quantized ? qmodel.model : model; }
};

// Throws Format (naming the offending tensor) on a corrupt or inconsistent file.
LoadedModel load_any(const std::filesystem::path& path);

// Metadata key holding a pruned model's new -> original id map.
inline constexpr const char* kVocabMapKey = "vocab_map";

// Re-encodes original-vocabulary ids for a pruned model (dropped ids -> UNK).
Dataset remap_dataset(const Dataset& data, const std::vector<int>& new_to_old, std::size_t original_vocab);

// Accuracy through the integer path for quantized models. `data` must already
// use the model's vocabulary (see remap_dataset).
EvalResult evaluate_any(const LoadedModel& m, const Dataset& data, std::size_t batch_size = 64);
EvalResult evaluate_quantized(const QuantizedModel& q, const Dataset& data, std::size_t batch_size = 64);

struct ReportRow {
    std::string variant;
    std::string checkpoint;
    bool quantized = false;
    double dev_accuracy = 0, test_accuracy = 0;
    StorageBreakdown bytes;
    double ratio = 0;  // teacher bytes / bytes
    OpsCount ops;
    double ops_ratio = 0;  // teacher ops / ops
};

struct MetricsReport {
    std::vector<ReportRow> rows;
    std::vector<std::string> notes;

    // variant,checkpoint,precision,dev_acc,test_acc,bytes_embeddings,bytes_blocks,bytes_head,bytes_total,
    // ratio,ops_label,ops,ops_ratio
    std::string csv() const;
    std::string table() const;
};

// Bytes come from storage_bytes on the loaded model; ratios are recomputed
// from them for every row (the first row is the reference).
// dev/test are in the original vocabulary and remapped here.
ReportRow make_row(const std::string& variant, const std::filesystem::path& path, const LoadedModel& m,
                   const Dataset& dev, const Dataset& test, std::size_t original_vocab, std::size_t seq_len,
                   std::size_t batch_size);
void fill_ratios(MetricsReport& r);

// Paper-accounting lines (compression ratio of the published sizes, ALBERT
// embedding share) with the configuration assumption spelled out.
std::vector<std::string> accounting_notes();

}  // namespace eib
