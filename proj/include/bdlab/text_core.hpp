#pragma once

// Tokenization, the n-gram perplexity judge, and reference text metrics.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bdlab/common.hpp"

namespace bdlab {

/// Lowercase tokens without embedded whitespace.
using TokenSequence = std::vector<std::string>;

inline constexpr std::string_view kBos = "<s>";
inline constexpr std::string_view kEos = "</s>";
inline constexpr std::string_view kUnk = "<unk>";

inline bool is_split_punct(char c) {
    switch (c) {
    case '.': case ',': case '!': case '?': case ';': case ':': case '\'': case '"':
        return true;
    default:
        return false;
    }
}

/// Lowercases, splits on whitespace and emits each of .,!?;:'" as its own token.
inline TokenSequence tokenize(std::string_view text) {
    TokenSequence out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    };
    for (char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            flush();
        } else if (is_split_punct(raw)) {
            flush();
            out.emplace_back(1, raw);
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

inline std::string detokenize(const TokenSequence &tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out.push_back(' ');
        out += tokens[i];
    }
    return out;
}

inline std::vector<TokenSequence> read_corpus(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open corpus: " + path);
    std::vector<TokenSequence> corpus;
    std::string line;
    while (std::getline(in, line)) {
        auto toks = tokenize(line);
        if (!toks.empty()) corpus.push_back(std::move(toks));
    }
    return corpus;
}

inline void write_corpus(const std::string &path, const std::vector<TokenSequence> &corpus) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write corpus: " + path);
    for (const auto &s : corpus) out << detokenize(s) << '\n';
}

/// Anything that assigns a sentence perplexity.
class PerplexityJudge {
  public:
    virtual ~PerplexityJudge() = default;
    virtual double perplexity(const TokenSequence &s) const = 0;
};

/// Add-k smoothed n-gram model. Immutable after training.
class NgramJudge final : public PerplexityJudge {
  public:
    using Counts = std::map<std::string, std::map<std::string, long>>;

    static NgramJudge train(const std::vector<TokenSequence> &corpus, int order = 2, double smoothing_k = 0.1) {
        if (corpus.empty()) throw Error("empty corpus");
        if (order < 2) throw Error("n-gram order must be >= 2");
        if (!(smoothing_k > 0.0)) throw Error("smoothing_k must be positive");

        NgramJudge j;
        j.order_ = order;
        j.k_ = smoothing_k;
        j.vocab_.insert(std::string(kBos));
        j.vocab_.insert(std::string(kEos));
        j.vocab_.insert(std::string(kUnk));
        for (const auto &sentence : corpus) {
            for (const auto &t : sentence) j.vocab_.insert(t);
            const auto padded = j.pad(sentence, false);
            for (std::size_t i = static_cast<std::size_t>(order - 1); i < padded.size(); ++i) {
                auto &row = j.counts_[context_key(padded, i, order)];
                ++row[padded[i]];
            }
        }
        for (const auto &[ctx, row] : j.counts_) {
            long total = 0;
            for (const auto &[tok, c] : row) total += c;
            j.totals_[ctx] = total;
        }
        return j;
    }

    int order() const { return order_; }
    double smoothing_k() const { return k_; }
    const std::set<std::string> &vocab() const { return vocab_; }
    /// Context key is the (order-1) preceding tokens joined by a single space.
    const Counts &counts() const { return counts_; }

    /// Smoothed p(token | context); unknown tokens are scored as <unk>.
    double probability(const TokenSequence &context, const std::string &token) const {
        std::string key;
        for (std::size_t i = 0; i < context.size(); ++i) {
            if (i) key.push_back(' ');
            key += map_oov(context[i]);
        }
        return prob(key, map_oov(token));
    }

    /// exp of the mean negative log-probability over the tokens plus the terminal </s>.
    double perplexity(const TokenSequence &s) const override {
        const auto padded = pad(s, true);
        double nll = 0.0;
        const auto first = static_cast<std::size_t>(order_ - 1);
        for (std::size_t i = first; i < padded.size(); ++i)
            nll -= std::log(prob(context_key(padded, i, order_), padded[i]));
        return std::exp(nll / static_cast<double>(padded.size() - first));
    }

  private:
    NgramJudge() = default;

    static std::string context_key(const TokenSequence &padded, std::size_t i, int order) {
        std::string key;
        for (std::size_t j = i - static_cast<std::size_t>(order - 1); j < i; ++j) {
            if (!key.empty()) key.push_back(' ');
            key += padded[j];
        }
        return key;
    }

    const std::string &map_oov(const std::string &t) const {
        static const std::string unk(kUnk);
        return vocab_.count(t) ? t : unk;
    }

    TokenSequence pad(const TokenSequence &s, bool map_unknown) const {
        TokenSequence padded(static_cast<std::size_t>(order_ - 1), std::string(kBos));
        for (const auto &t : s) padded.push_back(map_unknown ? map_oov(t) : t);
        padded.emplace_back(kEos);
        return padded;
    }

    double prob(const std::string &ctx, const std::string &tok) const {
        const double v = static_cast<double>(vocab_.size());
        double count = 0.0, total = 0.0;
        if (auto it = counts_.find(ctx); it != counts_.end()) {
            total = static_cast<double>(totals_.at(ctx));
            if (auto jt = it->second.find(tok); jt != it->second.end()) count = static_cast<double>(jt->second);
        }
        return (count + k_) / (total + k_ * v);
    }

    int order_ = 2;
    double k_ = 0.1;
    std::set<std::string> vocab_;
    Counts counts_;
    std::map<std::string, long> totals_;
};

/// Perplexities supplied by an external scorer: one `<ppl>\t<sentence>` per line.
class ScoreTableJudge final : public PerplexityJudge {
  public:
    static ScoreTableJudge load(const std::string &path) {
        std::ifstream in(path);
        if (!in) throw Error("cannot open score table: " + path);
        ScoreTableJudge j;
        std::string line;
        while (std::getline(in, line)) {
            const auto tab = line.find('\t');
            if (tab == std::string::npos) continue;
            j.table_[detokenize(tokenize(line.substr(tab + 1)))] = std::stod(line.substr(0, tab));
        }
        return j;
    }

    void set(const TokenSequence &s, double ppl) { table_[detokenize(s)] = ppl; }

    double perplexity(const TokenSequence &s) const override {
        auto it = table_.find(detokenize(s));
        if (it == table_.end()) throw Error("score table has no entry for: " + detokenize(s));
        return it->second;
    }

  private:
    std::unordered_map<std::string, double> table_;
};

// ---------------------------------------------------------------------------
// Metrics

struct MetricReport {
    double bleu4 = 0.0;
    double rouge_l = 0.0;
    double token_f1 = 0.0;
};

namespace detail {

inline std::map<TokenSequence, int> ngram_counts(const TokenSequence &s, std::size_t n) {
    std::map<TokenSequence, int> counts;
    if (s.size() < n) return counts;
    for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[TokenSequence(s.begin() + i, s.begin() + i + n)];
    return counts;
}

inline std::size_t lcs_length(const TokenSequence &a, const TokenSequence &b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

} // namespace detail

/// Sentence BLEU with uniform weights over 1..4-grams, clipped counts and brevity penalty
/// against the closest reference length. No smoothing: any zero precision gives 0.
inline double bleu4(const TokenSequence &hypothesis, const std::vector<TokenSequence> &references) {
    if (references.empty()) throw Error("bleu4 requires at least one reference");
    if (hypothesis.empty()) return 0.0;

    double log_sum = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        const auto hyp = detail::ngram_counts(hypothesis, n);
        std::map<TokenSequence, int> max_ref;
        for (const auto &ref : references)
            for (const auto &[g, c] : detail::ngram_counts(ref, n)) max_ref[g] = std::max(max_ref[g], c);
        int matched = 0, total = 0;
        for (const auto &[g, c] : hyp) {
            total += c;
            if (auto it = max_ref.find(g); it != max_ref.end()) matched += std::min(c, it->second);
        }
        if (matched == 0) return 0.0;
        log_sum += std::log(static_cast<double>(matched) / total);
    }

    const auto hyp_len = static_cast<double>(hypothesis.size());
    double ref_len = static_cast<double>(references.front().size());
    for (const auto &ref : references) {
        const auto r = static_cast<double>(ref.size());
        const double d = std::abs(r - hyp_len), best = std::abs(ref_len - hyp_len);
        if (d < best || (d == best && r < ref_len)) ref_len = r;
    }
    const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
    return bp * std::exp(log_sum / 4.0);
}

inline constexpr double kRougeBeta = 1.2;

/// LCS F-measure, F = (1 + b^2) P R / (R + b^2 P) with b = 1.2.
inline double rouge_l(const TokenSequence &hypothesis, const TokenSequence &reference) {
    if (hypothesis.empty() || reference.empty()) return 0.0;
    const auto lcs = static_cast<double>(detail::lcs_length(hypothesis, reference));
    if (lcs == 0.0) return 0.0;
    const double p = lcs / static_cast<double>(hypothesis.size());
    const double r = lcs / static_cast<double>(reference.size());
    const double b2 = kRougeBeta * kRougeBeta;
    return (1.0 + b2) * p * r / (r + b2 * p);
}

/// Bag-of-tokens F1 over the multiset intersection.
inline double token_f1(const TokenSequence &candidate, const TokenSequence &target) {
    if (candidate.empty() || target.empty()) return 0.0;
    std::map<std::string, int> bag;
    for (const auto &t : target) ++bag[t];
    int common = 0;
    for (const auto &t : candidate) {
        auto it = bag.find(t);
        if (it != bag.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    }
    if (common == 0) return 0.0;
    const double p = static_cast<double>(common) / static_cast<double>(candidate.size());
    const double r = static_cast<double>(common) / static_cast<double>(target.size());
    return 2.0 * p * r / (p + r);
}

/// Best score over alternative references.
inline double best_token_f1(const TokenSequence &candidate, const std::vector<TokenSequence> &targets) {
    double best = 0.0;
    for (const auto &t : targets) best = std::max(best, token_f1(candidate, t));
    return best;
}

inline MetricReport evaluate_text(const TokenSequence &hypothesis, const std::vector<TokenSequence> &references) {
    MetricReport m;
    m.bleu4 = bleu4(hypothesis, references);
    for (const auto &ref : references) m.rouge_l = std::max(m.rouge_l, rouge_l(hypothesis, ref));
    m.token_f1 = best_token_f1(hypothesis, references);
    return m;
}

/// True if `needle` occurs as a contiguous run inside `haystack`.
inline bool contains_run(const TokenSequence &haystack, const TokenSequence &needle) {
    if (needle.empty()) return true;
    return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) != haystack.end();
}

} // namespace bdlab
