// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Brute-force autointerp reference: materializes every activation of the
// stream, then sorts. No heaps, no batching.

#pragma once

#include <algorithm>
#include <map>
#include <vector>

#include "cltforge/autointerp.hpp"

namespace oracle {

struct BruteFeature {
    std::vector<cltforge::TopExample> top;
    std::vector<float> active_values;  // sorted ascending
    std::map<cltforge::TokenId, std::pair<std::size_t, double>> tokens;
};

struct BruteResult {
    std::map<cltforge::FeatureKey, BruteFeature> features;
    std::size_t tokens = 0;
};

inline BruteResult brute_force(const cltforge::CltModel& clt, const cltforge::HostModel& model,
                               std::span<const cltforge::TokenSequence> corpus, std::size_t total_tokens,
                               std::size_t k, std::size_t before, std::size_t after) {
    using namespace cltforge;
    const std::size_t L = clt.shape.num_layers, F = clt.shape.d_features();
    BruteResult out;
    // activation[l][f] = list over all (seq, pos)
    struct Peak {
        float a;
        std::uint32_t seq, pos;
    };
    std::map<FeatureKey, std::vector<Peak>> peaks;
    std::map<FeatureKey, std::vector<std::vector<float>>> per_seq;  // window construction
    std::vector<const TokenSequence*> seqs;
    for (const auto& s : corpus) {
        if (out.tokens + s.size() > total_tokens) break;
        out.tokens += s.size();
        seqs.push_back(&s);
    }
    std::vector<std::vector<Tensor2>> z_all;  // [seq][layer] len × F
    for (const auto* s : seqs) {
        const auto cap = forward_with_capture(model, *s);
        std::vector<Tensor2> zs;
        for (std::size_t l = 0; l < L; ++l) {
            Tensor2 h = cap.mlp_in[l];
            for (float& v : h.storage()) v /= clt.input_norm[l];
            zs.push_back(jump_relu(clt, l, pre_activations(clt, l, h, clt.all_features()), clt.all_features()));
        }
        z_all.push_back(std::move(zs));
    }
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t f = 0; f < F; ++f) {
            BruteFeature bf;
            std::vector<TopExample> cands;
            for (std::size_t s = 0; s < seqs.size(); ++s) {
                const auto& seq = *seqs[s];
                const Tensor2& z = z_all[s][l];
                for (std::size_t p = 0; p < seq.size(); ++p) {
                    const float a = z(p, f);
                    if (a == 0.0f) continue;
                    bf.active_values.push_back(a);
                    auto& t = bf.tokens[seq[p]];
                    ++t.first;
                    t.second += a;
                }
                // Peak of this sequence: largest activation, earliest position on ties.
                std::size_t best = seq.size();
                for (std::size_t p = 0; p < seq.size(); ++p)
                    if (z(p, f) > 0.0f && (best == seq.size() || z(p, f) > z(best, f))) best = p;
                if (best == seq.size()) continue;
                TopExample ex;
                ex.activation = z(best, f);
                ex.sequence_id = static_cast<std::uint32_t>(s);
                ex.peak_position = static_cast<std::uint32_t>(best);
                const std::size_t lo = best >= before ? best - before : 0;
                const std::size_t hi = std::min(seq.size(), best + after + 1);
                ex.window_start = static_cast<std::uint32_t>(lo);
                for (std::size_t p = lo; p < hi; ++p) {
                    ex.tokens.push_back(seq[p]);
                    ex.activations.push_back(z(p, f));
                }
                cands.push_back(std::move(ex));
            }
            std::sort(cands.begin(), cands.end(), [](const TopExample& a, const TopExample& b) {
                if (a.activation != b.activation) return a.activation > b.activation;
                if (a.sequence_id != b.sequence_id) return a.sequence_id < b.sequence_id;
                return a.peak_position < b.peak_position;
            });
            if (cands.size() > k) cands.resize(k);
            bf.top = std::move(cands);
            std::sort(bf.active_values.begin(), bf.active_values.end());
            out.features[{std::uint32_t(l), std::uint32_t(f)}] = std::move(bf);
        }
    return out;
}

}  // namespace oracle
