#pragma once

// Shared fixtures and independent oracles for the unit tests.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "eib/model/transformer.hpp"
#include "eib/vocab/vocabulary.hpp"

namespace eib::testing {

inline ModelSpec tiny_spec(std::size_t hidden = 32, std::size_t layers = 2, bool shared = false,
                           std::uint64_t seed = 7) {
    ModelSpec s;
    s.vocab_size = 40;
    s.max_seq_len = 8;
    s.embed_dim = hidden;
    s.hidden_dim = hidden;
    s.intermediate_dim = 2 * hidden;
    s.num_layers = layers;
    s.num_heads = 4;
    s.share_layers = shared;
    s.num_classes = 3;
    s.seed = seed;
    return s;
}

// Batch of CLS-led random sequences with a ragged mask and labels.
inline Batch random_batch(std::size_t batch, std::size_t seq, std::size_t vocab, std::size_t classes,
                          std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Batch b;
    b.batch = batch;
    b.seq = seq;
    b.ids.assign(batch * seq, 0);
    b.mask.assign(batch * seq, 0);
    for (std::size_t r = 0; r < batch; ++r) {
        const std::size_t len = 2 + rng() % (seq - 1);
        for (std::size_t s = 0; s < seq; ++s) {
            if (s < len) {
                b.ids[r * seq + s] = s == 0 ? 2 : static_cast<int>(4 + rng() % (vocab - 4));
                b.mask[r * seq + s] = 1;
            }
        }
        b.labels.push_back(static_cast<int>(rng() % classes));
    }
    return b;
}

// Redraws every parameter from N(0, std^2) so gradients are well away from
// zero for finite-difference checks (fresh models have near-uniform
// attention, whose query/key gradients sit at rounding level).
inline void scramble(TransformerModel& m, double std, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, std);
    for (Parameter* p : m.parameters()) {
        const bool is_gamma = p->name.find("gamma") != std::string::npos;
        for (Real& v : p->value.data()) v = (is_gamma ? 1.0 : 0.0) + d(rng);
    }
}

// Direct-summation oracles, evaluated in long double.
inline std::vector<double> oracle_softmax(const std::vector<double>& x) {
    long double s = 0;
    for (double v : x) s += std::exp(static_cast<long double>(v));
    std::vector<double> out;
    for (double v : x) out.push_back(static_cast<double>(std::exp(static_cast<long double>(v)) / s));
    return out;
}

inline double oracle_kl(const std::vector<double>& p, const std::vector<double>& q) {
    long double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0) s += p[i] * std::log(static_cast<long double>(p[i]) / q[i]);
    return static_cast<double>(s);
}

inline double oracle_nll(const std::vector<double>& logits, int label) {
    return -std::log(oracle_softmax(logits)[static_cast<std::size_t>(label)]);
}

inline std::vector<std::vector<int>> random_corpus(std::size_t sentences, std::size_t vocab, std::size_t max_len,
                                                   std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::vector<int>> out;
    for (std::size_t k = 0; k < sentences; ++k) {
        std::vector<int> s{Vocabulary::kCls};
        const std::size_t n = 1 + rng() % max_len;
        // Skew towards low ids so frequencies differ.
        for (std::size_t j = 0; j < n; ++j)
            s.push_back(static_cast<int>(4 + std::min(rng() % (vocab - 4), rng() % (vocab - 4))));
        out.push_back(std::move(s));
    }
    return out;
}

// One sentence at a time, no batching or sharding.
inline std::vector<long double> brute_force_importance(const TransformerModel& m, const std::vector<std::vector<int>>& corpus) {
    std::vector<long double> I(m.spec.vocab_size, 0.0L);
    for (const auto& sent : corpus) {
        const std::size_t n = std::min(sent.size(), m.spec.max_seq_len);
        Batch b{1, n, std::vector<int>(sent.begin(), sent.begin() + static_cast<std::ptrdiff_t>(n)),
                std::vector<int>(n, 1), {}};
        const Tensor A = forward(m, b, {.attention = true}).attention.back();
        const std::size_t H = m.spec.num_heads;
        for (std::size_t p = 0; p < n; ++p) {
            long double col = 0;
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t q = 0; q < n; ++q) col += A[(h * n + q) * n + p];
            I[static_cast<std::size_t>(sent[p])] += col / n;
        }
    }
    return I;
}


}  // namespace eib::testing
