// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference reference for graph edges: scale one source's
// contribution by (1 ± eps), replay the frozen host in double precision, read
// the target, and take the central difference. The frozen replay is linear in
// the scale, so a large eps is exact and keeps the float input rows from
// rounding the difference away.

#pragma once

#include <cmath>
#include <vector>

#include "cltforge/attribution.hpp"

namespace oracle {

class FrozenPathFd {
public:
    FrozenPathFd(const cltforge::HostModel& model, const cltforge::CltModel& clt, std::span<const cltforge::TokenId> t)
        : model_(model), clt_(clt), dec_(cltforge::effective_decoders(clt)) {
        using namespace cltforge;
        state_ = freeze(model, t, &cap_);
        const std::size_t L = clt.shape.num_layers;
        std::vector<Tensor2> h;
        for (std::size_t l = 0; l < L; ++l) {
            Tensor2 x = cap_.mlp_in[l];
            for (float& v : x.storage()) v /= clt.input_norm[l];
            h.push_back(x);
        }
        z_ = encode(clt, h);
        for (std::size_t l = 0; l < L; ++l) {
            m_.emplace_back(cap_.mlp_out[l].storage().begin(), cap_.mlp_out[l].storage().end());
            const Tensor2 r = decode_cross_layer(clt, z_, l);
            std::vector<double> e(m_[l].size());
            for (std::size_t i = 0; i < e.size(); ++i) e[i] = m_[l][i] - double(r.storage()[i]) * clt.output_norm[l];
            error_.push_back(std::move(e));
        }
    }

    /// d target / d alpha at alpha = 1, alpha scaling the source's contribution.
    double response(const cltforge::AttributionNode& src, const cltforge::AttributionNode& tgt, double eps = 0.5) const {
        return (read(replay(src, 1.0 + eps), tgt) - read(replay(src, 1.0 - eps), tgt)) / (2.0 * eps);
    }

    /// Feature activation as the reference encoder computes it.
    float activation(std::size_t layer, std::size_t pos, std::size_t feature) const {
        return z_[layer](pos, feature);
    }

private:
    // Target value: encoder pre-activation less bias for a feature, logit otherwise.
    double read(const cltforge::FrozenOutputs<double>& out, const cltforge::AttributionNode& t) const {
        using namespace cltforge;
        const std::size_t d = model_.config.d_model, V = model_.config.vocab, T = state_.seq_len();
        if (t.kind == NodeKind::logit) return out.logits[(T - 1) * V + t.token];
        const std::size_t l = std::size_t(t.layer);
        double s = 0;
        for (std::size_t i = 0; i < d; ++i) s += double(clt_.w_enc[l](t.feature, i)) * out.mlp_in[l][t.pos * d + i];
        return s / clt_.input_norm[l];
    }

    cltforge::FrozenOutputs<double> replay(const cltforge::AttributionNode& src, double alpha) const {
        using namespace cltforge;
        const std::size_t d = model_.config.d_model, L = clt_.shape.num_layers;
        auto m = m_;
        FrozenForwardState st = state_;
        const double k = alpha - 1.0;
        if (src.kind == NodeKind::input) {
            for (float& v : st.residual0.row(src.pos)) v = static_cast<float>(v * alpha);
        } else if (src.kind == NodeKind::error) {
            const std::size_t l = std::size_t(src.layer);
            for (std::size_t i = 0; i < d; ++i) m[l][src.pos * d + i] += k * error_[l][src.pos * d + i];
        } else {
            const std::size_t s = std::size_t(src.layer);
            const double a = z_[s](src.pos, src.feature);
            for (std::size_t t = s; t < L; ++t) {
                const Tensor2& w = dec_[decoder_index(L, s, t)];
                for (std::size_t i = 0; i < d; ++i)
                    m[t][src.pos * d + i] += k * a * clt_.output_norm[t] * double(w(i, src.feature));
            }
        }
        return frozen_replay<double>(model_, st, m);
    }

    const cltforge::HostModel& model_;
    const cltforge::CltModel& clt_;
    std::vector<cltforge::Tensor2> dec_;
    cltforge::FrozenForwardState state_;
    cltforge::CapturedActivations cap_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> error_;
    std::vector<cltforge::Tensor2> z_;
};

}  // namespace oracle
