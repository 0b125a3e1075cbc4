// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/corpus.hpp"

#include <array>
#include <cmath>
#include <sstream>

#include "cltforge/binary_io.hpp"
#include "cltforge/error.hpp"

namespace cltforge {

namespace {

constexpr std::array<std::string_view, 64> kWords = {
    "the",   "of",    "is",    "a",     "opposite", "large", "small", "big",   "little", "hot",  "cold",
    "up",    "down",  "left",  "right", "day",      "night", "black", "white", "fast",   "slow", "old",
    "new",   "in",    "out",   "on",    "off",      "yes",   "no",    "cat",   "dog",    "bird", "fish",
    "red",   "blue",  "green", "one",   "two",      "three", "four",  "five",  "and",    "or",   "not",
    "to",    "from",  "with",  "it",    "was",      "are",   "be",    "say",   "go",     "come", "see",
    "know",  "time",  "year",  "man",   "woman",    "child", "water", "fire",  "'"};

class ZipfSampler {
public:
    explicit ZipfSampler(const std::vector<double>& p) {
        cdf_.resize(p.size());
        double acc = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            acc += p[i];
            cdf_[i] = acc;
        }
        cdf_.back() = 1.0;
    }

    TokenId operator()(Rng& rng) const {
        const double u = rng.uniform();
        std::size_t lo = 0, hi = cdf_.size() - 1;
        while (lo < hi) {
            const std::size_t mid = (lo + hi) / 2;
            if (u < cdf_[mid]) hi = mid;
            else lo = mid + 1;
        }
        return static_cast<TokenId>(lo);
    }

private:
    std::vector<double> cdf_;
};

}  // namespace

std::vector<double> token_distribution(const CorpusSpec& spec) {
    std::vector<double> p(spec.vocab);
    double z = 0.0;
    for (std::size_t i = 0; i < spec.vocab; ++i) {
        p[i] = 1.0 / std::pow(static_cast<double>(i + 1), spec.zipf_exponent);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

std::vector<TokenSequence> make_synthetic_corpus(Rng& rng, const CorpusSpec& spec) {
    std::vector<TokenSequence> out;
    if (spec.num_sequences == 0) return out;
    if (spec.vocab == 0 || spec.seq_len == 0) throw InputError("corpus spec needs positive vocab and seq_len");
    const ZipfSampler sample(token_distribution(spec));
    out.reserve(spec.num_sequences);
    const std::size_t n = spec.seq_len;
    for (std::size_t s = 0; s < spec.num_sequences; ++s) {
        TokenSequence seq(n);
        const double kind = rng.uniform();
        if (kind < spec.induction_fraction && n >= 4) {
            const std::size_t half = n / 2;
            for (std::size_t i = 0; i < half; ++i) seq[i] = sample(rng);
            for (std::size_t i = half; i < n; ++i) seq[i] = seq[i - half];
        } else if (kind < spec.induction_fraction + spec.kv_fraction && n >= 8) {
            const std::size_t pairs = n / 4;
            for (std::size_t i = 0; i < 2 * pairs; ++i) seq[i] = sample(rng);
            for (std::size_t i = 2 * pairs; i + 1 < n; i += 2) {
                const std::size_t which = static_cast<std::size_t>(rng.below(pairs));
                seq[i] = seq[2 * which];
                seq[i + 1] = seq[2 * which + 1];
            }
            if (n % 2 == 1) seq[n - 1] = seq[2 * static_cast<std::size_t>(rng.below(pairs))];
        } else {
            for (auto& t : seq) t = sample(rng);
        }
        out.push_back(std::move(seq));
    }
    return out;
}

std::uint64_t corpus_hash(std::span<const TokenSequence> corpus) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& seq : corpus) {
        ByteWriter w;
        w.u32(static_cast<std::uint32_t>(seq.size()));
        for (TokenId t : seq) w.u32(t);
        h = fnv1a64(w.buffer(), h);
    }
    return h;
}

double unigram_entropy(std::span<const TokenSequence> corpus, std::size_t vocab) {
    std::vector<double> counts(vocab, 0.0);
    double total = 0.0;
    for (const auto& seq : corpus)
        for (TokenId t : seq)
            if (t < vocab) {
                counts[t] += 1.0;
                total += 1.0;
            }
    double h = 0.0;
    for (double c : counts)
        if (c > 0) h -= (c / total) * std::log(c / total);
    return h;
}

std::string token_text(TokenId id) {
    if (id < kWords.size()) return std::string(kWords[id]);
    return "tok" + std::to_string(id);
}

TokenSequence tokenize(std::string_view text, std::size_t vocab) {
    TokenSequence out;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        TokenId id = static_cast<TokenId>(-1);
        for (std::size_t i = 0; i < kWords.size() && i < vocab; ++i)
            if (kWords[i] == word) id = static_cast<TokenId>(i);
        if (id == static_cast<TokenId>(-1) && word.rfind("tok", 0) == 0 && word.size() > 3) {
            try {
                id = static_cast<TokenId>(std::stoul(word.substr(3)));
            } catch (const std::exception&) {
            }
        }
        if (id == static_cast<TokenId>(-1) || id >= vocab) throw InputError("unknown token '" + word + "'");
        out.push_back(id);
    }
    return out;
}

std::string detokenize(std::span<const TokenId> tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += token_text(tokens[i]);
    }
    return out;
}

}  // namespace cltforge
