#include "eib/vocab/prune.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <numeric>

#include "eib/error.hpp"

namespace eib {

const char* to_string(ImportanceConvention c) {
    return c == ImportanceConvention::Received ? "received" : "emitted";
}

void ImportanceTable::merge(const ImportanceTable& other) {
    if (other.size() != size()) fail(ErrorKind::Vocab, "merging importance tables of different vocabularies");
    for (std::size_t i = 0; i < size(); ++i) {
        importance[i] += other.importance[i];
        count[i] += other.count[i];
    }
    sentences += other.sentences;
    truncated += other.truncated;
    heads = std::max(heads, other.heads);
}

void accumulate_attention(ImportanceTable& table, std::span<const int> ids, std::span<const Real> attention,
                          std::size_t heads, std::size_t stride, ImportanceConvention convention) {
    const std::size_t n = ids.size();
    if (n == 0) fail(ErrorKind::Corpus, "empty sentence");
    if (n > stride || attention.size() < heads * stride * stride)
        fail(ErrorKind::InvalidShape, "attention map smaller than the sentence");
    for (std::size_t p = 0; p < n; ++p) {
        const int w = ids[p];
        if (w < 0 || static_cast<std::size_t>(w) >= table.size())
            fail(ErrorKind::Vocab, "token id " + std::to_string(w) + " outside the vocabulary");
        double s = 0;
        for (std::size_t h = 0; h < heads; ++h) {
            const Real* base = attention.data() + h * stride * stride;
            for (std::size_t j = 0; j < n; ++j)
                s += convention == ImportanceConvention::Received ? base[j * stride + p] : base[p * stride + j];
        }
        table.importance[static_cast<std::size_t>(w)] += s / static_cast<double>(n);
        ++table.count[static_cast<std::size_t>(w)];
    }
    ++table.sentences;
}

namespace {

void score_range(const TransformerModel& model, const std::vector<std::vector<int>>& corpus, std::size_t begin,
                 std::size_t end, const ScoreOptions& opts, ImportanceTable& table) {
    const std::size_t max_len = model.spec.max_seq_len;
    const std::size_t H = model.spec.num_heads;
    for (std::size_t b0 = begin; b0 < end; b0 += opts.batch_size) {
        const std::size_t b1 = std::min(end, b0 + opts.batch_size);
        Batch batch;
        batch.batch = b1 - b0;
        for (std::size_t k = b0; k < b1; ++k) {
            if (corpus[k].empty()) fail(ErrorKind::Corpus, "empty sentence " + std::to_string(k));
            batch.seq = std::max(batch.seq, std::min(corpus[k].size(), max_len));
        }
        const std::size_t S = batch.seq;
        batch.ids.assign(batch.batch * S, Vocabulary::kPad);
        batch.mask.assign(batch.batch * S, 0);
        for (std::size_t k = b0; k < b1; ++k) {
            const std::size_t n = std::min(corpus[k].size(), max_len);
            if (corpus[k].size() > max_len) ++table.truncated;
            for (std::size_t j = 0; j < n; ++j) {
                batch.ids[(k - b0) * S + j] = corpus[k][j];
                batch.mask[(k - b0) * S + j] = 1;
            }
        }
        validate_batch(model, batch);
        const ForwardTrace trace = forward(model, batch, {.attention = true, .last_layer_only = true});
        const Tensor& A = trace.attention.back();  // [B x H x S x S]
        for (std::size_t r = 0; r < batch.batch; ++r) {
            const std::size_t n = std::min(corpus[b0 + r].size(), max_len);
            accumulate_attention(table, std::span(corpus[b0 + r]).first(n),
                                 std::span(A.data()).subspan(r * H * S * S, H * S * S), H, S, opts.convention);
        }
    }
}

}  // namespace

ImportanceTable score_importance(const TransformerModel& model, const std::vector<std::vector<int>>& corpus,
                                 const ScoreOptions& opts) {
    if (opts.batch_size == 0 || opts.shards == 0) fail(ErrorKind::Spec, "batch_size and shards must be positive");
    const std::size_t V = model.spec.vocab_size;
    const std::size_t shards = std::min(opts.shards, std::max<std::size_t>(corpus.size(), 1));
    std::vector<ImportanceTable> parts(shards, ImportanceTable(V));
    for (auto& p : parts) {
        p.heads = model.spec.num_heads;
        p.convention = opts.convention;
    }
    std::vector<std::exception_ptr> errors(shards);
    // Shards run concurrently; kernels inside each forward stay serial
    // (nested parallel regions are inactive).
#pragma omp parallel for schedule(dynamic, 1)
    for (std::size_t s = 0; s < shards; ++s) {
        const std::size_t begin = corpus.size() * s / shards;
        const std::size_t end = corpus.size() * (s + 1) / shards;
        try {
            score_range(model, corpus, begin, end, opts, parts[s]);
        } catch (...) {
            errors[s] = std::current_exception();
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    // Pairwise merge: a fixed tree, so the result depends only on the shard count.
    for (std::size_t stride = 1; stride < shards; stride *= 2)
        for (std::size_t i = 0; i + stride < shards; i += 2 * stride) parts[i].merge(parts[i + stride]);
    return std::move(parts[0]);
}

ImportanceTable score_importance(const TransformerModel& model, const std::vector<std::vector<int>>& corpus,
                                 const Vocabulary& vocab, const ScoreOptions& opts) {
    if (vocab.size() != model.spec.vocab_size)
        fail(ErrorKind::Vocab, "vocabulary has " + std::to_string(vocab.size()) + " tokens, model expects " +
                                   std::to_string(model.spec.vocab_size));
    return score_importance(model, corpus, opts);
}

int PruneRemap::map(int old_id) const {
    if (old_id < 0 || static_cast<std::size_t>(old_id) >= old_to_new.size())
        fail(ErrorKind::Vocab, "token id " + std::to_string(old_id) + " outside the vocabulary");
    const int n = old_to_new[static_cast<std::size_t>(old_id)];
    return n < 0 ? Vocabulary::kUnk : n;
}

bool PruneRemap::is_identity() const {
    for (std::size_t i = 0; i < old_to_new.size(); ++i)
        if (old_to_new[i] != static_cast<int>(i)) return false;
    return true;
}

PruneRemap select_topk(const ImportanceTable& table, std::size_t k) {
    const std::size_t V = table.size();
    if (k < Vocabulary::kReserved || V < Vocabulary::kReserved)
        fail(ErrorKind::Vocab, "k = " + std::to_string(k) + " is below the reserved-token count");
    PruneRemap remap;
    if (k > V) {
        k = V;
        remap.clamped = true;
    }
    std::vector<std::size_t> order(V - Vocabulary::kReserved);
    std::iota(order.begin(), order.end(), Vocabulary::kReserved);
    const std::size_t keep = k - Vocabulary::kReserved;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (table.importance[a] != table.importance[b])
                              return table.importance[a] > table.importance[b];
                          return a < b;
                      });
    std::vector<char> kept(V, 0);
    for (std::size_t i = 0; i < Vocabulary::kReserved; ++i) kept[i] = 1;
    for (std::size_t i = 0; i < keep; ++i) kept[order[i]] = 1;
    remap.old_to_new.assign(V, -1);
    for (std::size_t i = 0; i < V; ++i) {
        if (!kept[i]) continue;
        remap.old_to_new[i] = static_cast<int>(remap.new_to_old.size());
        remap.new_to_old.push_back(static_cast<int>(i));
    }
    remap.k = remap.new_to_old.size();
    return remap;
}

TransformerModel apply_prune(const TransformerModel& model, const PruneRemap& remap) {
    const std::size_t V = model.spec.vocab_size;
    if (remap.old_size() != V || remap.k != remap.new_to_old.size() || remap.k == 0)
        fail(ErrorKind::Surgery, "remap built for " + std::to_string(remap.old_size()) +
                                     " tokens applied to a model with " + std::to_string(V));
    for (std::size_t i = 0; i < Vocabulary::kReserved && i < V; ++i)
        if (remap.old_to_new[i] != static_cast<int>(i)) fail(ErrorKind::Surgery, "remap moves a reserved id");
    TransformerModel out = model;
    const std::size_t E = model.token_embedding.value.cols();
    Tensor table({remap.k, E});
    for (std::size_t n = 0; n < remap.k; ++n) {
        const int old = remap.new_to_old[n];
        if (old < 0 || static_cast<std::size_t>(old) >= V || remap.old_to_new[static_cast<std::size_t>(old)] != static_cast<int>(n))
            fail(ErrorKind::Surgery, "remap is not a consistent bijection on retained ids");
        auto src = model.token_embedding.value.row(static_cast<std::size_t>(old));
        std::copy(src.begin(), src.end(), table.row(n).begin());
    }
    out.token_embedding.value = std::move(table);
    out.spec.vocab_size = remap.k;
    return out;
}

Vocabulary prune_vocab(const Vocabulary& vocab, const PruneRemap& remap) {
    if (remap.old_size() != vocab.size()) fail(ErrorKind::Surgery, "remap does not match the vocabulary");
    Vocabulary out;
    for (std::size_t n = Vocabulary::kReserved; n < remap.k; ++n) out.add(vocab.token(remap.new_to_old[n]));
    return out;
}

void remap_ids(std::vector<int>& ids, const PruneRemap& remap) {
    for (int& id : ids) id = remap.map(id);
}

std::string importance_tsv(const ImportanceTable& table, const Vocabulary& vocab) {
    if (vocab.size() != table.size()) fail(ErrorKind::Vocab, "importance table does not match the vocabulary");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < table.size(); ++i)
        if (i < Vocabulary::kReserved || table.count[i] > 0) rows.push_back(i);
    std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
        if (table.importance[a] != table.importance[b]) return table.importance[a] > table.importance[b];
        return a < b;
    });
    std::string out = "token\tid\timportance\tcount\n";
    char buf[64];
    for (std::size_t i : rows) {
        std::snprintf(buf, sizeof buf, "\t%zu\t%.17g\t%llu\n", i, table.importance[i],
                      static_cast<unsigned long long>(table.count[i]));
        out += vocab.token(static_cast<int>(i));
        out += buf;
    }
    return out;
}

}  // namespace eib
