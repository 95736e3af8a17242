#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eib/distill/data.hpp"
#include "eib/vocab/vocabulary.hpp"

namespace eib {

// Bag-of-tokens classification: C disjoint groups of class tokens plus a
// distractor group. The label is the class whose tokens occur most often
// (ties -> lowest class id).
struct SyntheticTask {
    std::size_t vocab_size = 2000;    // including the 4 reserved ids
    std::size_t num_classes = 4;
    double class_fraction = 0.5;      // share of non-reserved ids used as class tokens
    std::size_t min_len = 8;          // tokens per sentence, CLS excluded
    std::size_t max_len = 31;
    std::size_t max_rival_count = 2;  // other classes appear 0..this many times
    std::uint64_t seed = 0;

    // Throws Task when the vocabulary cannot hold the classes.
    void validate() const;
    std::size_t group_size() const;
    // -1 for reserved ids and distractors.
    int class_of(int id) const;
    // Token strings in id order (reserved first).
    std::vector<std::string> token_strings() const;
    Vocabulary vocabulary() const;
    // Majority rule over CLS-led or bare ids.
    int label_of(const std::vector<int>& ids) const;
};

struct SyntheticSplits {
    Dataset train, dev, test;
};

// Deterministic in the task seed; each split draws from its own stream and no
// sentence appears in two splits.
SyntheticSplits generate(const SyntheticTask& task, std::size_t n_train, std::size_t n_dev, std::size_t n_test);

// "label\ttok tok ..." rows (CLS omitted).
std::string dataset_tsv(const Dataset& data, const Vocabulary& vocab);
// Parses dataset_tsv output; throws Format on malformed rows.
Dataset parse_dataset_tsv(const std::string& text, const Vocabulary& vocab, std::size_t num_classes);

}  // namespace eib
