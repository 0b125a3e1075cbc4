// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "cltforge/corpus.hpp"
#include "cltforge/error.hpp"

using namespace cltforge;

TEST(Corpus, FixedSeedFixedHash) {
    CorpusSpec spec;
    spec.num_sequences = 100;
    Rng a(1), b(1), c(2);
    const auto x = make_synthetic_corpus(a, spec);
    EXPECT_EQ(corpus_hash(x), corpus_hash(make_synthetic_corpus(b, spec)));
    EXPECT_NE(corpus_hash(x), corpus_hash(make_synthetic_corpus(c, spec)));
}

TEST(Corpus, ZeroSequencesIsEmpty) {
    CorpusSpec spec;
    Rng rng(1);
    EXPECT_TRUE(make_synthetic_corpus(rng, spec).empty());
}

TEST(Corpus, HistogramMatchesDistributionAtOneMillionTokens) {
    CorpusSpec spec;
    spec.seq_len = 32;
    spec.num_sequences = 1'000'000 / 32;
    Rng rng(7);
    const auto corpus = make_synthetic_corpus(rng, spec);
    std::vector<double> counts(spec.vocab, 0);
    double total = 0;
    for (const auto& s : corpus)
        for (auto t : s) {
            counts[t] += 1;
            total += 1;
        }
    const auto p = token_distribution(spec);
    double tv = 0;
    for (std::size_t i = 0; i < spec.vocab; ++i) tv += std::fabs(counts[i] / total - p[i]);
    EXPECT_LE(0.5 * tv, 0.02);
}

TEST(Corpus, ContainsInductionAndLookupStructure) {
    CorpusSpec spec;
    spec.num_sequences = 200;
    spec.seq_len = 16;
    Rng rng(3);
    const auto corpus = make_synthetic_corpus(rng, spec);
    std::size_t repeats = 0;
    for (const auto& s : corpus) {
        bool rep = true;
        for (std::size_t i = 8; i < 16; ++i) rep &= s[i] == s[i - 8];
        repeats += rep;
    }
    EXPECT_GT(repeats, 50u);
    EXPECT_LT(repeats, 120u);
}

TEST(Vocabulary, RoundTripsText) {
    const auto toks = tokenize("the opposite of ' large ' is '", 64);
    EXPECT_EQ(detokenize(toks), "the opposite of ' large ' is '");
    EXPECT_EQ(tokenize("tok12", 64), TokenSequence{12});
    EXPECT_THROW(tokenize("zebra", 64), InputError);
    EXPECT_THROW(tokenize("tok64", 64), InputError);
}
