#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eib/model/transformer.hpp"
#include "eib/vocab/vocabulary.hpp"

namespace eib {

// Which side of the last-layer attention map credits a token.
//   Received: I(w) += (1/n) sum_h sum_j A_h[j][pos(w)]  (column sums)
//   Emitted:  I(w) += (1/n) sum_h sum_j A_h[pos(w)][j]  (row sums; every
//             occurrence then contributes exactly H/n, so the score only
//             counts occurrences -- kept for comparison)
enum class ImportanceConvention { Received, Emitted };

const char* to_string(ImportanceConvention c);

struct ImportanceTable {
    std::vector<double> importance;    // per token id
    std::vector<std::uint64_t> count;  // occurrences per token id
    std::size_t sentences = 0;         // K
    std::size_t heads = 0;             // H
    std::size_t truncated = 0;         // sentences cut to max_seq_len
    ImportanceConvention convention = ImportanceConvention::Received;

    explicit ImportanceTable(std::size_t vocab = 0) : importance(vocab, 0.0), count(vocab, 0) {}
    std::size_t size() const noexcept { return importance.size(); }
    // Adds another table scored against the same vocabulary.
    void merge(const ImportanceTable& other);
};

// Credits one sentence of n tokens given its attention maps, laid out
// [heads x stride x stride] with query rows and key columns (stride >= n).
void accumulate_attention(ImportanceTable& table, std::span<const int> ids, std::span<const Real> attention,
                          std::size_t heads, std::size_t stride, ImportanceConvention convention);

struct ScoreOptions {
    ImportanceConvention convention = ImportanceConvention::Received;
    std::size_t batch_size = 32;
    // The corpus is split into this many contiguous shards, scored in
    // parallel and merged pairwise. Fixed independently of the thread count
    // so results do not depend on it.
    std::size_t shards = 8;
};

// Scores every token of a corpus of id sentences with the model's last-layer
// attention. Sentences longer than max_seq_len are truncated (and counted).
ImportanceTable score_importance(const TransformerModel& model, const std::vector<std::vector<int>>& corpus,
                                 const ScoreOptions& opts = {});
// As above; throws Vocab when the vocabulary and the model disagree in size.
ImportanceTable score_importance(const TransformerModel& model, const std::vector<std::vector<int>>& corpus,
                                 const Vocabulary& vocab, const ScoreOptions& opts = {});

struct PruneRemap {
    std::vector<int> old_to_new;  // -1 for dropped ids
    std::vector<int> new_to_old;
    std::size_t k = 0;
    bool clamped = false;  // requested k exceeded the vocabulary

    std::size_t old_size() const noexcept { return old_to_new.size(); }
    // Dropped tokens become UNK.
    int map(int old_id) const;
    bool is_identity() const;
};

// Keeps the k most important ids (reserved ids always, counted inside k);
// ties go to the lower id. New ids preserve the old order.
PruneRemap select_topk(const ImportanceTable& table, std::size_t k);

// Copy of the model with the token-embedding rows kept by remap. Throws
// Surgery when the remap was built for another vocabulary size.
TransformerModel apply_prune(const TransformerModel& model, const PruneRemap& remap);

Vocabulary prune_vocab(const Vocabulary& vocab, const PruneRemap& remap);
void remap_ids(std::vector<int>& ids, const PruneRemap& remap);

// "token\tid\timportance\tcount" rows for observed and reserved ids, sorted
// by importance descending then id ascending.
std::string importance_tsv(const ImportanceTable& table, const Vocabulary& vocab);

}  // namespace eib
