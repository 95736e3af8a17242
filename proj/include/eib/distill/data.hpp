#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "eib/model/transformer.hpp"

namespace eib {

struct Example {
    int label = 0;
    std::vector<int> ids;  // CLS-led token ids
};

using Dataset = std::vector<Example>;

// Pads the selected examples to the longest one (cut at max_len).
Batch make_batch(const Dataset& data, std::span<const std::size_t> rows, std::size_t max_len);

// Epoch-wise shuffled mini-batches. Every epoch is a fresh permutation drawn
// from one seeded stream; the trailing partial batch is dropped.
class BatchSampler {
  public:
    BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);

    std::span<const std::size_t> next();
    std::size_t batches_per_epoch() const noexcept { return per_epoch_; }

  private:
    void reshuffle();

    std::vector<std::size_t> order_;
    std::size_t batch_size_;
    std::size_t per_epoch_;
    std::size_t pos_ = 0;
    std::mt19937_64 rng_;
};

struct EvalResult {
    double accuracy = 0;
    double loss = 0;  // mean cross-entropy
};

EvalResult evaluate(const TransformerModel& model, const Dataset& data, std::size_t batch_size = 64);

}  // namespace eib
