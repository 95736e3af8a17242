#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace eib {

enum class Tokenizer { Whitespace, Character };

// Token strings <-> contiguous ids. Ids 0..3 are reserved and never pruned.
class Vocabulary {
  public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kMask = 3;
    static constexpr std::size_t kReserved = 4;

    Vocabulary();

    // Id of an existing token or a fresh id appended at the end.
    int add(const std::string& token);
    // Unknown tokens encode to UNK.
    int id(std::string_view token) const;
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    bool contains(std::string_view token) const;
    std::size_t size() const noexcept { return tokens_.size(); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    // Token ids of one line, without CLS.
    std::vector<int> encode(std::string_view line, Tokenizer tok = Tokenizer::Whitespace) const;

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// Whitespace-separated tokens, or one token per UTF-8 code point (whitespace
// skipped) for inputs without word boundaries.
std::vector<std::string> tokenize(std::string_view line, Tokenizer tok = Tokenizer::Whitespace);

// Ids by first occurrence after the reserved ids. Throws Corpus on a corpus
// without any token.
Vocabulary build_vocab(std::string_view corpus, Tokenizer tok = Tokenizer::Whitespace);

}  // namespace eib
