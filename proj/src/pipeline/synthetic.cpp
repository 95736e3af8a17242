#include "eib/pipeline/synthetic.hpp"

#include <algorithm>
#include <random>
#include <set>

#include "eib/error.hpp"

namespace eib {

void SyntheticTask::validate() const {
    if (vocab_size < num_classes + Vocabulary::kReserved)
        fail(ErrorKind::Task, "vocab_size " + std::to_string(vocab_size) + " cannot hold " +
                                  std::to_string(num_classes) + " classes plus 4 reserved ids");
    if (num_classes == 0) fail(ErrorKind::Task, "num_classes must be positive");
    if (!(class_fraction > 0 && class_fraction <= 1)) fail(ErrorKind::Task, "class_fraction must lie in (0, 1]");
    if (min_len == 0 || min_len > max_len) fail(ErrorKind::Task, "invalid sentence length range");
    if (max_rival_count + 2 > max_len) fail(ErrorKind::Task, "max_len too short for the class tokens");
}

std::size_t SyntheticTask::group_size() const {
    const std::size_t free = vocab_size - Vocabulary::kReserved;
    const auto g = static_cast<std::size_t>(static_cast<double>(free) * class_fraction) / num_classes;
    return std::max<std::size_t>(g, 1);
}

int SyntheticTask::class_of(int id) const {
    if (id < static_cast<int>(Vocabulary::kReserved)) return -1;
    const auto off = static_cast<std::size_t>(id) - Vocabulary::kReserved;
    const std::size_t g = group_size();
    return off < g * num_classes ? static_cast<int>(off / g) : -1;
}

std::vector<std::string> SyntheticTask::token_strings() const {
    const Vocabulary base;
    std::vector<std::string> out = base.tokens();
    const std::size_t g = group_size();
    for (std::size_t id = Vocabulary::kReserved; id < vocab_size; ++id) {
        const std::size_t off = id - Vocabulary::kReserved;
        if (off < g * num_classes)
            out.push_back("c" + std::to_string(off / g) + "_" + std::to_string(off % g));
        else
            out.push_back("d" + std::to_string(off - g * num_classes));
    }
    return out;
}

Vocabulary SyntheticTask::vocabulary() const {
    validate();
    Vocabulary v;
    for (const std::string& t : token_strings()) v.add(t);
    return v;
}

int SyntheticTask::label_of(const std::vector<int>& ids) const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int id : ids) {
        const int c = class_of(id);
        if (c >= 0) ++counts[static_cast<std::size_t>(c)];
    }
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

namespace {

Example draw(const SyntheticTask& t, std::mt19937_64& rng) {
    const std::size_t C = t.num_classes, g = t.group_size();
    const std::size_t distractors = t.vocab_size - Vocabulary::kReserved - g * C;
    Example ex;
    ex.label = static_cast<int>(rng() % C);
    std::vector<int> body;
    std::size_t rival_max = 0;
    for (std::size_t c = 0; c < C; ++c) {
        if (static_cast<int>(c) == ex.label) continue;
        const std::size_t n = rng() % (t.max_rival_count + 1);
        rival_max = std::max(rival_max, n);
        for (std::size_t i = 0; i < n; ++i)
            body.push_back(static_cast<int>(Vocabulary::kReserved + c * g + rng() % g));
    }
    const std::size_t own = rival_max + 1 + rng() % 2;
    for (std::size_t i = 0; i < own; ++i)
        body.push_back(static_cast<int>(Vocabulary::kReserved + static_cast<std::size_t>(ex.label) * g + rng() % g));
    const std::size_t len = std::max(body.size(), t.min_len + rng() % (t.max_len - t.min_len + 1));
    while (body.size() < len) {
        if (distractors == 0) {
            // Without distractors, pad with more label tokens.
            body.push_back(static_cast<int>(Vocabulary::kReserved + static_cast<std::size_t>(ex.label) * g + rng() % g));
        } else {
            body.push_back(static_cast<int>(Vocabulary::kReserved + g * C + rng() % distractors));
        }
    }
    for (std::size_t i = body.size(); i > 1; --i) std::swap(body[i - 1], body[rng() % i]);
    ex.ids.reserve(body.size() + 1);
    ex.ids.push_back(Vocabulary::kCls);
    ex.ids.insert(ex.ids.end(), body.begin(), body.end());
    return ex;
}

}  // namespace

SyntheticSplits generate(const SyntheticTask& task, std::size_t n_train, std::size_t n_dev, std::size_t n_test) {
    task.validate();
    if (n_train == 0 || n_dev == 0 || n_test == 0) fail(ErrorKind::Task, "split sizes must be positive");
    SyntheticSplits out;
    std::set<std::vector<int>> seen;
    const std::pair<Dataset*, std::size_t> splits[] = {{&out.train, n_train}, {&out.dev, n_dev}, {&out.test, n_test}};
    std::uint64_t stream = 0;
    for (auto [data, n] : splits) {
        std::seed_seq seq{task.seed, ++stream, std::uint64_t{0x5eed}};
        std::mt19937_64 rng(seq);
        while (data->size() < n) {
            Example ex = draw(task, rng);
            if (seen.insert(ex.ids).second) data->push_back(std::move(ex));
        }
    }
    return out;
}

std::string dataset_tsv(const Dataset& data, const Vocabulary& vocab) {
    std::string out;
    for (const Example& ex : data) {
        out += std::to_string(ex.label);
        out += '\t';
        bool first = true;
        for (int id : ex.ids) {
            if (id == Vocabulary::kCls) continue;
            if (!first) out += ' ';
            out += vocab.token(id);
            first = false;
        }
        out += '\n';
    }
    return out;
}

Dataset parse_dataset_tsv(const std::string& text, const Vocabulary& vocab, std::size_t num_classes) {
    Dataset data;
    std::size_t start = 0, line_no = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string_view line(text.data() + start, end - start);
        ++line_no;
        start = end + 1;
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        if (tab == std::string_view::npos || tab == 0)
            fail(ErrorKind::Format, "dataset line " + std::to_string(line_no) + ": expected label<TAB>tokens");
        Example ex;
        const std::string lab(line.substr(0, tab));
        std::size_t used = 0;
        try {
            ex.label = std::stoi(lab, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != lab.size() || ex.label < 0 || static_cast<std::size_t>(ex.label) >= num_classes)
            fail(ErrorKind::InvalidLabel, "dataset line " + std::to_string(line_no) + ": bad label '" + lab + "'");
        ex.ids.push_back(Vocabulary::kCls);
        for (int id : vocab.encode(line.substr(tab + 1))) ex.ids.push_back(id);
        data.push_back(std::move(ex));
    }
    return data;
}

}  // namespace eib
