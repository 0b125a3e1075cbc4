// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cltforge/host_model.hpp"
#include "cltforge/numeric.hpp"

namespace cltforge {

/// Synthetic training text for the toy host. Filler tokens are drawn from a
/// Zipf law over the vocabulary; structured sequences only copy tokens that
/// were themselves drawn from it, so every position keeps that marginal.
struct CorpusSpec {
    std::size_t num_sequences = 0;
    std::size_t seq_len = 32;
    std::size_t vocab = 64;
    double zipf_exponent = 1.0;
    /// Fraction of sequences of the form "A B C ... A B C ..." (second half repeats the first).
    double induction_fraction = 0.4;
    /// Fraction of sequences "k1 v1 k2 v2 ... | ki vi kj vj ...": pairs, then queried pairs.
    double kv_fraction = 0.3;
};

std::vector<TokenSequence> make_synthetic_corpus(Rng& rng, const CorpusSpec& spec);

/// Marginal token distribution the generator samples from.
std::vector<double> token_distribution(const CorpusSpec& spec);

std::uint64_t corpus_hash(std::span<const TokenSequence> corpus) noexcept;

/// Entropy (nats) of the empirical unigram distribution.
double unigram_entropy(std::span<const TokenSequence> corpus, std::size_t vocab);

/// Fixed word list for the first ids; later ids render as "tok<id>".
std::string token_text(TokenId id);
/// Whitespace-separated words or "tok<id>" forms; unknown words raise InputError.
TokenSequence tokenize(std::string_view text, std::size_t vocab);
std::string detokenize(std::span<const TokenId> tokens);

}  // namespace cltforge
