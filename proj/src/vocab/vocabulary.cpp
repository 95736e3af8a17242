#include "eib/vocab/vocabulary.hpp"

#include "eib/error.hpp"

namespace eib {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

// Length of the UTF-8 sequence introduced by lead byte c (1 on malformed input).
std::size_t utf8_length(unsigned char c) {
    if (c >= 0xF0 && c < 0xF8) return 4;
    if (c >= 0xE0) return c < 0xF0 ? 3 : 1;
    if (c >= 0xC0) return 2;
    return 1;
}

}  // namespace

Vocabulary::Vocabulary() {
    for (const char* t : {"[PAD]", "[UNK]", "[CLS]", "[MASK]"}) add(t);
}

int Vocabulary::add(const std::string& token) {
    auto [it, inserted] = index_.try_emplace(token, static_cast<int>(tokens_.size()));
    if (inserted) tokens_.push_back(token);
    return it->second;
}

int Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

std::vector<int> Vocabulary::encode(std::string_view line, Tokenizer tok) const {
    std::vector<int> ids;
    for (const std::string& t : tokenize(line, tok)) ids.push_back(id(t));
    return ids;
}

std::vector<std::string> tokenize(std::string_view line, Tokenizer tok) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < line.size()) {
        if (is_space(line[i])) {
            ++i;
            continue;
        }
        std::size_t j = i;
        if (tok == Tokenizer::Whitespace) {
            while (j < line.size() && !is_space(line[j])) ++j;
        } else {
            j = std::min(line.size(), i + utf8_length(static_cast<unsigned char>(line[i])));
        }
        out.emplace_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

Vocabulary build_vocab(std::string_view corpus, Tokenizer tok) {
    Vocabulary v;
    std::size_t start = 0;
    while (start <= corpus.size()) {
        std::size_t end = corpus.find('\n', start);
        if (end == std::string_view::npos) end = corpus.size();
        for (const std::string& t : tokenize(corpus.substr(start, end - start), tok)) v.add(t);
        start = end + 1;
    }
    if (v.size() == Vocabulary::kReserved) fail(ErrorKind::Corpus, "corpus contains no tokens");
    return v;
}

}  // namespace eib
