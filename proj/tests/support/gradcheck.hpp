// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference check of the trainer's analytic gradients against the
// double-precision loss oracle.

#pragma once

#include <cmath>
#include <map>
#include <string>

#include "cltforge/trainer.hpp"
#include "support/clt_oracle.hpp"

namespace oracle {

struct GradCheckCase {
    cltforge::CltModel clt;
    cltforge::ActivationBatch batch;
    cltforge::LossConfig cfg;
    float lambda0 = 0.0f;
    cltforge::DeadMask dead;
};

// L=2-style random instance whose pre-activations stay at least `margin`
// from every threshold, with every other feature marked dead. The bandwidth
// is tiny, so no pre-activation falls inside the pseudo-gradient window.
inline GradCheckCase make_gradcheck_case(std::size_t L, std::size_t d, std::size_t e, std::size_t n,
                                         double margin = 0.02) {
    using namespace cltforge;
    for (std::uint64_t seed = 1;; ++seed) {
        Rng rng(seed);
        CltInit init;
        init.bandwidth = 1e-6f;
        init.decoder_norm = 0.5f;
        GradCheckCase c{CltModel::random({L, d, e}, rng, init), {}, {}, 0.0f, {}};
        for (auto& w : c.clt.w_enc) fill_normal(w, rng, 0.4f);
        for (auto& b : c.clt.b_enc)
            for (auto& v : b) v = static_cast<float>(rng.normal() * 0.1);
        for (auto& b : c.clt.b_dec)
            for (auto& v : b) v = static_cast<float>(rng.normal() * 0.1);
        for (auto& t : c.clt.log_threshold)
            for (auto& v : t) v = static_cast<float>(std::log(0.05 + 0.1 * rng.uniform()));
        for (std::size_t l = 0; l < L; ++l) {
            Tensor2 h(n, d), m(n, d);
            fill_normal(h, rng, 0.4f);
            fill_normal(m, rng, 0.3f);
            c.batch.inputs.push_back(h);
            c.batch.outputs.push_back(m);
        }
        c.batch.tokens.assign(n, 0);
        c.cfg.l0_coefficient = 0.3f;
        c.cfg.dead_penalty_coef = 0.2f;
        c.cfg.tanh_scale = 2.0f;
        c.lambda0 = 0.3f;
        c.dead.assign(L, std::vector<std::uint8_t>(c.clt.shape.d_features(), 0));
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t f = 0; f < c.clt.shape.d_features(); f += 2) c.dead[l][f] = 1;

        bool ok = true;
        for (std::size_t l = 0; l < L && ok; ++l) {
            const Tensor2 pre = pre_activations(c.clt, l, c.batch.inputs[l], c.clt.all_features());
            const auto th = c.clt.thresholds(l);
            for (std::size_t i = 0; i < n && ok; ++i)
                for (std::size_t f = 0; f < th.size(); ++f)
                    if (std::fabs(pre(i, f) - th[f]) < margin) ok = false;
        }
        if (ok) return c;
    }
}

struct GradCheckReport {
    std::map<std::string, double> rel_error;  // class → ‖an − fd‖ / ‖fd‖
    std::map<std::string, double> fd_norm;
};

inline GradCheckReport run_gradcheck(const GradCheckCase& c, double h = 1e-5) {
    using namespace cltforge;
    CltModel grad;
    loss_and_gradients(c.clt, c.batch, c.cfg, c.lambda0, c.dead, grad);
    OracleLossConfig ocfg;
    ocfg.lambda0 = c.lambda0;
    ocfg.lambda1 = c.cfg.dead_penalty_coef;
    ocfg.C = c.cfg.tanh_scale;
    for (const auto& l : c.dead) ocfg.dead.emplace_back(l.begin(), l.end());
    const CltParams base = params_of(c.clt);

    std::map<std::string, double> num, den;
    auto probe = [&](const std::string& cls, std::vector<double>& slot, std::size_t idx, double analytic, CltParams& p) {
        const double keep = slot[idx];
        slot[idx] = keep + h;
        const double lp = loss(p, c.batch, ocfg);
        slot[idx] = keep - h;
        const double lm = loss(p, c.batch, ocfg);
        slot[idx] = keep;
        const double fd = (lp - lm) / (2 * h);
        num[cls] += (analytic - fd) * (analytic - fd);
        den[cls] += fd * fd;
    };
    CltParams p = base;
    const std::size_t L = p.L, d = p.d, F = p.F;
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t i = 0; i < F * d; ++i) probe("encoder", p.w_enc[l], i, grad.w_enc[l].data()[i], p);
        for (std::size_t f = 0; f < F; ++f) probe("encoder_bias", p.b_enc[l], f, grad.b_enc[l][f], p);
        for (std::size_t f = 0; f < F; ++f) probe("log_threshold", p.tau[l], f, grad.log_threshold[l][f], p);
        for (std::size_t c2 = 0; c2 < d; ++c2) probe("decoder_bias", p.b_dec[l], c2, grad.b_dec[l][c2], p);
    }
    for (std::size_t s = 0; s < L; ++s)
        for (std::size_t t = s; t < L; ++t) {
            const std::size_t slot = pair_slot(L, s, t);
            const auto& g = grad.w_dec[decoder_index(L, s, t)];
            for (std::size_t i = 0; i < d * F; ++i) probe("decoder", p.w_dec[slot], i, g.data()[i], p);
        }
    GradCheckReport rep;
    for (const auto& [cls, n] : num) {
        rep.fd_norm[cls] = std::sqrt(den[cls]);
        rep.rel_error[cls] = std::sqrt(n) / std::max(std::sqrt(den[cls]), 1e-30);
    }
    return rep;
}

}  // namespace oracle
