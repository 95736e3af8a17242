#include "eib/pipeline/report.hpp"

#include <algorithm>
#include <cstdio>

#include "eib/vocab/vocabulary.hpp"

namespace eib {

LoadedModel load_any(const std::filesystem::path& path) {
    const Checkpoint c = load_checkpoint(path);
    LoadedModel m;
    try {
        const std::string kind = c.metadata.at("kind").get<std::string>();
        if (kind == "quantized") {
            m.quantized = true;
            m.qmodel = qmodel_from_checkpoint(c);
        } else {
            m.model = model_from_checkpoint(c);
        }
        if (c.metadata.contains(kVocabMapKey)) m.vocab_map = c.metadata.at(kVocabMapKey).get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, path.string() + ": bad metadata: " + e.what());
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Format) fail(ErrorKind::Format, path.string() + ": " + e.what());
        throw;
    }
    if (!m.vocab_map.empty() && m.vocab_map.size() != m.float_model().spec.vocab_size) {
        fail(ErrorKind::Format, path.string() + ": vocab_map length does not match the embedding table");
    }
    return m;
}

Dataset remap_dataset(const Dataset& data, const std::vector<int>& new_to_old, std::size_t original_vocab) {
    if (new_to_old.empty()) return data;
    std::vector<int> old_to_new(original_vocab, Vocabulary::kUnk);
    for (std::size_t n = 0; n < new_to_old.size(); ++n) {
        const int old = new_to_old[n];
        if (old < 0 || static_cast<std::size_t>(old) >= original_vocab) {
            fail(ErrorKind::Vocab, "vocab_map entry " + std::to_string(old) + " outside the original vocabulary");
        }
        old_to_new[static_cast<std::size_t>(old)] = static_cast<int>(n);
    }
    Dataset out = data;
    for (Example& e : out)
        for (int& id : e.ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= original_vocab) {
                fail(ErrorKind::Vocab, "token id " + std::to_string(id) + " outside the original vocabulary");
            }
            id = old_to_new[static_cast<std::size_t>(id)];
        }
    return out;
}

EvalResult evaluate_quantized(const QuantizedModel& q, const Dataset& data, std::size_t batch_size) {
    if (data.empty()) fail(ErrorKind::Corpus, "cannot evaluate on an empty dataset");
    std::size_t correct = 0;
    double loss = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t end = std::min(data.size(), start + batch_size);
        std::vector<std::size_t> rows(end - start);
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = start + i;
        const Batch b = make_batch(data, rows, q.model.spec.max_seq_len);
        const Tensor logits = quantized_forward(q, b, MatmulPath::Integer);
        const std::size_t c = logits.cols();
        for (std::size_t r = 0; r < b.batch; ++r) {
            const Real* row = logits.data().data() + r * c;
            const auto best = static_cast<int>(std::max_element(row, row + c) - row);
            if (best == b.labels[r]) ++correct;
        }
        loss += cross_entropy(logits, b.labels) * static_cast<double>(b.batch);
    }
    const double n = static_cast<double>(data.size());
    return EvalResult{static_cast<double>(correct) / n, loss / n};
}

EvalResult evaluate_any(const LoadedModel& m, const Dataset& data, std::size_t batch_size) {
    return m.quantized ? evaluate_quantized(m.qmodel, data, batch_size) : evaluate(m.model, data, batch_size);
}

ReportRow make_row(const std::string& variant, const std::filesystem::path& path, const LoadedModel& m,
                   const Dataset& dev, const Dataset& test, std::size_t original_vocab, std::size_t seq_len,
                   std::size_t batch_size) {
    ReportRow r;
    r.variant = variant;
    r.checkpoint = path.filename().string();
    r.quantized = m.quantized;
    r.dev_accuracy = evaluate_any(m, remap_dataset(dev, m.vocab_map, original_vocab), batch_size).accuracy;
    r.test_accuracy = evaluate_any(m, remap_dataset(test, m.vocab_map, original_vocab), batch_size).accuracy;
    r.bytes = storage_bytes(m.float_model(), m.quantized ? StoragePrecision::Int8WithFp32Steps : StoragePrecision::Fp32);
    r.ops = count_ops(m.float_model(), seq_len, m.quantized);
    return r;
}

void fill_ratios(MetricsReport& rep) {
    if (rep.rows.empty()) return;
    const auto ref_bytes = static_cast<double>(rep.rows.front().bytes.total());
    const auto ref_ops = static_cast<double>(rep.rows.front().ops.ops);
    for (ReportRow& r : rep.rows) {
        r.ratio = compression_ratio(ref_bytes, static_cast<double>(r.bytes.total()));
        r.ops_ratio = compression_ratio(ref_ops, static_cast<double>(r.ops.ops));
    }
}

std::string MetricsReport::csv() const {
    std::string out =
        "variant,checkpoint,precision,dev_acc,test_acc,bytes_embeddings,bytes_blocks,bytes_head,bytes_total,"
        "ratio,ops_label,ops,ops_ratio\n";
    char buf[512];
    for (const ReportRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%s,%s,%.4f,%.4f,%llu,%llu,%llu,%llu,%.2f,%s,%llu,%.2f\n", r.variant.c_str(),
                      r.checkpoint.c_str(), r.quantized ? "int8" : "fp32", r.dev_accuracy, r.test_accuracy,
                      static_cast<unsigned long long>(r.bytes.embeddings),
                      static_cast<unsigned long long>(r.bytes.blocks), static_cast<unsigned long long>(r.bytes.head),
                      static_cast<unsigned long long>(r.bytes.total()), r.ratio, r.ops.label(),
                      static_cast<unsigned long long>(r.ops.ops), r.ops_ratio);
        out += buf;
    }
    return out;
}

std::string MetricsReport::table() const {
    std::string out;
    char buf[512];
    std::snprintf(buf, sizeof buf, "%-14s %-5s %8s %8s %12s %9s %14s %9s\n", "variant", "prec", "dev_acc", "test_acc",
                  "bytes", "ratio", "ops", "ops_ratio");
    out += buf;
    for (const ReportRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%-14s %-5s %8.4f %8.4f %12llu %8.2fx %9llu %-4s %8.2fx\n", r.variant.c_str(),
                      r.quantized ? "int8" : "fp32", r.dev_accuracy, r.test_accuracy,
                      static_cast<unsigned long long>(r.bytes.total()), r.ratio,
                      static_cast<unsigned long long>(r.ops.ops), r.ops.label(), r.ops_ratio);
        out += buf;
    }
    if (!notes.empty()) {
        out += "\n";
        for (const std::string& n : notes) out += n + "\n";
    }
    return out;
}

std::vector<std::string> accounting_notes() {
    std::vector<std::string> notes;
    char buf[512];
    std::snprintf(buf, sizeof buf, "published sizes: 407.0 MB / 1.91 MB -> compression ratio %.2fx",
                  compression_ratio(407.0, 1.91));
    notes.emplace_back(buf);
    const EncoderConfig cfg = albert_tiny_reference();
    const EmbeddingShare s = embedding_share(cfg);
    std::snprintf(buf, sizeof buf, "embedding share of %s: %.1f%% (%llu of %llu parameters; assumed configuration)",
                  cfg.name.c_str(), 100.0 * s.share(), static_cast<unsigned long long>(s.token_embedding),
                  static_cast<unsigned long long>(s.total));
    notes.emplace_back(buf);
    notes.emplace_back("ops ratio stands in for inference speedup; bytes count 4 per fp32 value, 1 per int8 code "
                       "plus 4 per step size");
    return notes;
}

}  // namespace eib
