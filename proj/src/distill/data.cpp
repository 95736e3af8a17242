#include "eib/distill/data.hpp"

#include <algorithm>
#include <numeric>

#include "eib/error.hpp"

namespace eib {

Batch make_batch(const Dataset& data, std::span<const std::size_t> rows, std::size_t max_len) {
    Batch b;
    b.batch = rows.size();
    for (std::size_t r : rows) b.seq = std::max(b.seq, std::min(data.at(r).ids.size(), max_len));
    if (b.seq == 0) fail(ErrorKind::Corpus, "batch of empty sequences");
    b.ids.assign(b.batch * b.seq, 0);
    b.mask.assign(b.batch * b.seq, 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Example& ex = data[rows[i]];
        const std::size_t n = std::min(ex.ids.size(), max_len);
        std::copy_n(ex.ids.begin(), n, b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.seq));
        std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(i * b.seq), n, 1);
        b.labels.push_back(ex.label);
    }
    return b;
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : order_(n), batch_size_(batch_size), per_epoch_(batch_size ? n / batch_size : 0), rng_(seed) {
    if (batch_size == 0 || n < batch_size)
        fail(ErrorKind::Corpus, "dataset of " + std::to_string(n) + " rows is shorter than one batch of " +
                                    std::to_string(batch_size));
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
}

void BatchSampler::reshuffle() {
    // Fisher-Yates with an explicit draw so the order is identical across
    // standard libraries.
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
    pos_ = 0;
}

std::span<const std::size_t> BatchSampler::next() {
    if (pos_ + batch_size_ > order_.size()) reshuffle();
    std::span<const std::size_t> out(order_.data() + pos_, batch_size_);
    pos_ += batch_size_;
    return out;
}

EvalResult evaluate(const TransformerModel& model, const Dataset& data, std::size_t batch_size) {
    EvalResult res;
    if (data.empty()) return res;
    std::size_t correct = 0;
    double loss = 0;
    std::vector<std::size_t> rows;
    for (std::size_t b0 = 0; b0 < data.size(); b0 += batch_size) {
        rows.clear();
        for (std::size_t i = b0; i < std::min(data.size(), b0 + batch_size); ++i) rows.push_back(i);
        const Batch b = make_batch(data, rows, model.spec.max_seq_len);
        const Tensor z = forward(model, b).logits;
        loss += cross_entropy(z, b.labels) * static_cast<double>(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            auto row = z.row(r);
            const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            correct += pred == b.labels[r];
        }
    }
    res.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    res.loss = loss / static_cast<double>(data.size());
    return res;
}

}  // namespace eib
