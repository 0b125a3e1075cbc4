// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Double-precision reference for CLT encode/decode and the training loss,
// written directly from the formulas with explicit loops.

#pragma once

#include <cmath>
#include <vector>

#include "cltforge/activation_cache.hpp"
#include "cltforge/clt.hpp"

namespace oracle {

struct CltParams {
    std::size_t L, d, F;
    std::vector<std::vector<double>> w_enc;  // [l][f*d + k]
    std::vector<std::vector<double>> b_enc, tau;
    std::vector<std::vector<double>> w_dec;  // [pair (s,t) enumerated s-major][c*F + f]
    std::vector<std::vector<double>> b_dec;
};

inline std::size_t pair_slot(std::size_t L, std::size_t s, std::size_t t) {
    std::size_t k = 0;
    for (std::size_t a = 0; a < L; ++a)
        for (std::size_t b = a; b < L; ++b) {
            if (a == s && b == t) return k;
            ++k;
        }
    return k;
}

inline CltParams params_of(const cltforge::CltModel& m) {
    CltParams p;
    p.L = m.shape.num_layers;
    p.d = m.shape.d_model;
    p.F = m.shape.d_features();
    for (std::size_t l = 0; l < p.L; ++l) {
        p.w_enc.emplace_back(m.w_enc[l].storage().begin(), m.w_enc[l].storage().end());
        p.b_enc.emplace_back(m.b_enc[l].begin(), m.b_enc[l].end());
        p.tau.emplace_back(m.log_threshold[l].begin(), m.log_threshold[l].end());
        p.b_dec.emplace_back(m.b_dec[l].begin(), m.b_dec[l].end());
    }
    for (std::size_t s = 0; s < p.L; ++s)
        for (std::size_t t = s; t < p.L; ++t) {
            const auto w = m.effective_decoder(s, t);
            p.w_dec.emplace_back(w.storage().begin(), w.storage().end());
        }
    return p;
}

struct OracleLossConfig {
    double lambda0 = 0, lambda1 = 0, C = 10;
    std::vector<std::vector<int>> dead;  // [l][f]
};

// pre[l][i][f]
inline std::vector<std::vector<std::vector<double>>> pre_acts(const CltParams& p, const cltforge::ActivationBatch& b) {
    std::vector<std::vector<std::vector<double>>> pre(p.L);
    for (std::size_t l = 0; l < p.L; ++l)
        for (std::size_t i = 0; i < b.size(); ++i) {
            std::vector<double> row(p.F);
            for (std::size_t f = 0; f < p.F; ++f) {
                double a = p.b_enc[l][f];
                for (std::size_t k = 0; k < p.d; ++k) a += p.w_enc[l][f * p.d + k] * b.inputs[l](i, k);
                row[f] = a;
            }
            pre[l].push_back(row);
        }
    return pre;
}

inline double loss(const CltParams& p, const cltforge::ActivationBatch& b, const OracleLossConfig& cfg,
                   double* recon_out = nullptr) {
    const auto pre = pre_acts(p, b);
    const std::size_t n = b.size();
    std::vector<std::vector<double>> norm(p.L, std::vector<double>(p.F, 0.0));
    for (std::size_t s = 0; s < p.L; ++s)
        for (std::size_t f = 0; f < p.F; ++f) {
            double acc = 0;
            for (std::size_t t = s; t < p.L; ++t)
                for (std::size_t c = 0; c < p.d; ++c) {
                    const double w = p.w_dec[pair_slot(p.L, s, t)][c * p.F + f];
                    acc += w * w;
                }
            norm[s][f] = std::sqrt(acc);
        }
    double recon = 0, sparse = 0, dead = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::vector<double>> z(p.L, std::vector<double>(p.F));
        for (std::size_t l = 0; l < p.L; ++l)
            for (std::size_t f = 0; f < p.F; ++f) {
                const double theta = std::exp(p.tau[l][f]);
                const double x = pre[l][i][f];
                z[l][f] = x > theta ? x : 0.0;
                sparse += std::tanh(cfg.C * z[l][f] * norm[l][f]);
                if (!cfg.dead.empty() && cfg.dead[l][f]) dead += std::max(0.0, theta - x) * norm[l][f];
            }
        for (std::size_t t = 0; t < p.L; ++t)
            for (std::size_t c = 0; c < p.d; ++c) {
                double mh = p.b_dec[t][c];
                for (std::size_t s = 0; s <= t; ++s)
                    for (std::size_t f = 0; f < p.F; ++f) mh += p.w_dec[pair_slot(p.L, s, t)][c * p.F + f] * z[s][f];
                const double e = mh - b.outputs[t](i, c);
                recon += e * e;
            }
    }
    if (recon_out) *recon_out = recon / n;
    return (recon + cfg.lambda0 * sparse + cfg.lambda1 * dead) / n;
}

}  // namespace oracle
