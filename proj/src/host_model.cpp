// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/host_model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cltforge/error.hpp"

namespace cltforge {

namespace {

constexpr std::string_view kHostMagic{"CLTF-HM\0", 8};
constexpr std::uint32_t kHostVersion = 1;

// y = W·x, accumulated from 0 in column order.
template <typename T>
void matvec(const Tensor2& w, const T* x, T* y) {
    const std::size_t cols = w.cols();
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const float* wr = w.row(r).data();
        T acc = 0;
        for (std::size_t c = 0; c < cols; ++c) acc += static_cast<T>(wr[c]) * x[c];
        y[r] = acc;
    }
}

// y += Wᵀ·x
void matvec_t_acc(const Tensor2& w, const float* x, float* y) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const float* wr = w.row(r).data();
        const float xr = x[r];
        for (std::size_t c = 0; c < w.cols(); ++c) y[c] += wr[c] * xr;
    }
}

// W += a ⊗ b
void outer_acc(Tensor2& w, const float* a, const float* b) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
        float* wr = w.row(r).data();
        const float ar = a[r];
        for (std::size_t c = 0; c < w.cols(); ++c) wr[c] += ar * b[c];
    }
}

template <typename T>
T row_mean(const T* x, std::size_t d) {
    T acc = 0;
    for (std::size_t i = 0; i < d; ++i) acc += x[i];
    return acc / static_cast<T>(d);
}

// out = g ⊙ (x − mean(x)) · inv. Shared by the forward pass and every replay.
template <typename T>
void ln_apply(const T* x, const std::vector<float>& gain, T inv, std::size_t d, T* out) {
    const T mean = row_mean(x, d);
    for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<T>(gain[i]) * ((x[i] - mean) * inv);
}

float ln_inverse_scale(const float* x, std::size_t d, float eps) {
    const float mean = row_mean(x, d);
    float var = 0.0f;
    for (std::size_t i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<float>(d);
    return 1.0f / std::sqrt(var + eps);
}

// o[q] = Σ_{j≤q} p[q,j] · v[j]
template <typename T>
void attention_mix(const Tensor2& probs, const std::vector<T>& v, std::size_t seq, std::size_t d,
                   std::vector<T>& o) {
    o.assign(seq * d, T(0));
    for (std::size_t q = 0; q < seq; ++q) {
        T* oq = o.data() + q * d;
        for (std::size_t j = 0; j <= q; ++j) {
            const T pj = static_cast<T>(probs(q, j));
            const T* vj = v.data() + j * d;
            for (std::size_t i = 0; i < d; ++i) oq[i] += pj * vj[i];
        }
    }
}

struct LayerCache {
    std::vector<float> x_in, a1, inv1, q, k, v, o, attn, x_mid, a2, inv2, u, r, m;
    Tensor2 probs;
};

struct ForwardCache {
    std::size_t seq = 0;
    std::vector<float> x0;
    std::vector<LayerCache> layers;
    std::vector<float> x_final, f, invf, logits;
};

void check_tokens(const HostConfig& cfg, std::span<const TokenId> tokens) {
    if (tokens.empty()) throw InputError("empty token sequence");
    if (tokens.size() > cfg.context) {
        throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds context " +
                         std::to_string(cfg.context));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= cfg.vocab) {
            throw InputError("token id " + std::to_string(tokens[i]) + " at position " +
                             std::to_string(i) + " is outside vocab of " + std::to_string(cfg.vocab));
        }
    }
}

ForwardCache forward_cached(const HostModel& model, std::span<const TokenId> tokens) {
    const HostConfig& cfg = model.config;
    check_tokens(cfg, tokens);
    const std::size_t seq = tokens.size();
    const std::size_t d = cfg.d_model;
    const std::size_t dm = cfg.d_mlp;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));

    ForwardCache c;
    c.seq = seq;
    c.x0.resize(seq * d);
    for (std::size_t k = 0; k < seq; ++k)
        for (std::size_t i = 0; i < d; ++i)
            c.x0[k * d + i] = model.embed(tokens[k], i) + model.pos_embed(k, i);

    std::vector<float> x = c.x0;
    c.layers.resize(cfg.num_layers);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const HostLayer& w = model.layers[l];
        LayerCache& lc = c.layers[l];
        lc.x_in = x;
        lc.a1.resize(seq * d);
        lc.inv1.resize(seq);
        lc.q.resize(seq * d);
        lc.k.resize(seq * d);
        lc.v.resize(seq * d);
        for (std::size_t k = 0; k < seq; ++k) {
            lc.inv1[k] = ln_inverse_scale(&x[k * d], d, cfg.ln_eps);
            ln_apply(&x[k * d], w.ln1_gain, lc.inv1[k], d, &lc.a1[k * d]);
            matvec(w.wq, &lc.a1[k * d], &lc.q[k * d]);
            matvec(w.wk, &lc.a1[k * d], &lc.k[k * d]);
            matvec(w.wv, &lc.a1[k * d], &lc.v[k * d]);
        }
        lc.probs = Tensor2(seq, seq);
        std::vector<float> scores(seq);
        for (std::size_t q = 0; q < seq; ++q) {
            float mx = -INFINITY;
            for (std::size_t j = 0; j <= q; ++j) {
                float s = 0.0f;
                for (std::size_t i = 0; i < d; ++i) s += lc.q[q * d + i] * lc.k[j * d + i];
                scores[j] = s * scale;
                mx = std::max(mx, scores[j]);
            }
            float sum = 0.0f;
            for (std::size_t j = 0; j <= q; ++j) {
                scores[j] = std::exp(scores[j] - mx);
                sum += scores[j];
            }
            for (std::size_t j = 0; j <= q; ++j) lc.probs(q, j) = scores[j] / sum;
        }
        attention_mix(lc.probs, lc.v, seq, d, lc.o);
        lc.attn.resize(seq * d);
        lc.x_mid.resize(seq * d);
        for (std::size_t k = 0; k < seq; ++k) {
            matvec(w.wo, &lc.o[k * d], &lc.attn[k * d]);
            for (std::size_t i = 0; i < d; ++i) lc.x_mid[k * d + i] = x[k * d + i] + lc.attn[k * d + i];
        }
        lc.a2.resize(seq * d);
        lc.inv2.resize(seq);
        lc.u.resize(seq * dm);
        lc.r.resize(seq * dm);
        lc.m.resize(seq * d);
        for (std::size_t k = 0; k < seq; ++k) {
            lc.inv2[k] = ln_inverse_scale(&lc.x_mid[k * d], d, cfg.ln_eps);
            ln_apply(&lc.x_mid[k * d], w.ln2_gain, lc.inv2[k], d, &lc.a2[k * d]);
            matvec(w.w_in, &lc.a2[k * d], &lc.u[k * dm]);
            for (std::size_t j = 0; j < dm; ++j) {
                lc.u[k * dm + j] += w.b_in[j];
                lc.r[k * dm + j] = lc.u[k * dm + j] > 0.0f ? lc.u[k * dm + j] : 0.0f;
            }
            matvec(w.w_out, &lc.r[k * dm], &lc.m[k * d]);
            for (std::size_t i = 0; i < d; ++i) lc.m[k * d + i] += w.b_out[i];
        }
        for (std::size_t e = 0; e < seq * d; ++e) x[e] = lc.x_mid[e] + lc.m[e];
    }
    c.x_final = x;
    c.f.resize(seq * d);
    c.invf.resize(seq);
    c.logits.resize(seq * cfg.vocab);
    for (std::size_t k = 0; k < seq; ++k) {
        c.invf[k] = ln_inverse_scale(&x[k * d], d, cfg.ln_eps);
        ln_apply(&x[k * d], model.lnf_gain, c.invf[k], d, &c.f[k * d]);
        matvec(model.unembed, &c.f[k * d], &c.logits[k * cfg.vocab]);
    }
    return c;
}

// Backward of y = g ⊙ (x − μ)·inv with inv a function of x.
void ln_backward_from_input(const float* x, const std::vector<float>& gain, float inv, const float* dy,
                            std::size_t d, float* dx_acc, float* dgain_acc) {
    const float mean = row_mean(x, d);
    std::vector<float> xhat(d), dxhat(d);
    for (std::size_t i = 0; i < d; ++i) {
        xhat[i] = (x[i] - mean) * inv;
        dxhat[i] = dy[i] * gain[i];
        dgain_acc[i] += dy[i] * xhat[i];
    }
    float mean_dxhat = 0.0f, mean_dxhat_xhat = 0.0f;
    for (std::size_t i = 0; i < d; ++i) {
        mean_dxhat += dxhat[i];
        mean_dxhat_xhat += dxhat[i] * xhat[i];
    }
    mean_dxhat /= static_cast<float>(d);
    mean_dxhat_xhat /= static_cast<float>(d);
    for (std::size_t i = 0; i < d; ++i)
        dx_acc[i] += inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
}

// Backward through one cached sequence; returns the summed cross-entropy.
double backward_sequence(const HostModel& model, std::span<const TokenId> tokens, const ForwardCache& c,
                         float weight, HostModel& g) {
    const HostConfig& cfg = model.config;
    const std::size_t seq = c.seq;
    const std::size_t d = cfg.d_model;
    const std::size_t dm = cfg.d_mlp;
    const std::size_t vocab = cfg.vocab;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));

    double loss = 0.0;
    std::vector<float> dx(seq * d, 0.0f);
    std::vector<float> dlogit(vocab), df(d);
    for (std::size_t k = 0; k + 1 < seq; ++k) {
        const float* lg = &c.logits[k * vocab];
        float mx = *std::max_element(lg, lg + vocab);
        double sum = 0.0;
        for (std::size_t t = 0; t < vocab; ++t) sum += std::exp(static_cast<double>(lg[t] - mx));
        const TokenId target = tokens[k + 1];
        loss += -(static_cast<double>(lg[target] - mx) - std::log(sum));
        for (std::size_t t = 0; t < vocab; ++t) {
            const float p = static_cast<float>(std::exp(static_cast<double>(lg[t] - mx)) / sum);
            dlogit[t] = weight * (p - (t == target ? 1.0f : 0.0f));
        }
        outer_acc(g.unembed, dlogit.data(), &c.f[k * d]);
        std::fill(df.begin(), df.end(), 0.0f);
        matvec_t_acc(model.unembed, dlogit.data(), df.data());
        ln_backward_from_input(&c.x_final[k * d], model.lnf_gain, c.invf[k], df.data(), d, &dx[k * d],
                               g.lnf_gain.data());
    }

    std::vector<float> dr(dm), da(d), dxmid(seq * d), dobuf(seq * d), dv(seq * d),
        dq(seq * d), dk(seq * d);
    for (std::size_t li = cfg.num_layers; li-- > 0;) {
        const HostLayer& w = model.layers[li];
        HostLayer& gw = g.layers[li];
        const LayerCache& lc = c.layers[li];

        // x_out = x_mid + m(x_mid)
        dxmid = dx;
        for (std::size_t k = 0; k < seq; ++k) {
            const float* dmk = &dx[k * d];
            for (std::size_t i = 0; i < d; ++i) gw.b_out[i] += dmk[i];
            outer_acc(gw.w_out, dmk, &lc.r[k * dm]);
            std::fill(dr.begin(), dr.end(), 0.0f);
            matvec_t_acc(w.w_out, dmk, dr.data());
            for (std::size_t j = 0; j < dm; ++j) {
                if (lc.u[k * dm + j] <= 0.0f) dr[j] = 0.0f;
                gw.b_in[j] += dr[j];
            }
            outer_acc(gw.w_in, dr.data(), &lc.a2[k * d]);
            std::fill(da.begin(), da.end(), 0.0f);
            matvec_t_acc(w.w_in, dr.data(), da.data());
            ln_backward_from_input(&lc.x_mid[k * d], w.ln2_gain, lc.inv2[k], da.data(), d, &dxmid[k * d],
                                   gw.ln2_gain.data());
        }

        // x_mid = x_in + Wo·o
        dx = dxmid;
        std::fill(dobuf.begin(), dobuf.end(), 0.0f);
        for (std::size_t k = 0; k < seq; ++k) {
            outer_acc(gw.wo, &dxmid[k * d], &lc.o[k * d]);
            matvec_t_acc(w.wo, &dxmid[k * d], &dobuf[k * d]);
        }
        std::fill(dv.begin(), dv.end(), 0.0f);
        std::fill(dq.begin(), dq.end(), 0.0f);
        std::fill(dk.begin(), dk.end(), 0.0f);
        std::vector<float> dp(seq);
        for (std::size_t q = 0; q < seq; ++q) {
            float dot_pp = 0.0f;
            for (std::size_t j = 0; j <= q; ++j) {
                float s = 0.0f;
                for (std::size_t i = 0; i < d; ++i) s += dobuf[q * d + i] * lc.v[j * d + i];
                dp[j] = s;
                dot_pp += lc.probs(q, j) * s;
                for (std::size_t i = 0; i < d; ++i) dv[j * d + i] += lc.probs(q, j) * dobuf[q * d + i];
            }
            for (std::size_t j = 0; j <= q; ++j) {
                const float ds = lc.probs(q, j) * (dp[j] - dot_pp) * scale;
                for (std::size_t i = 0; i < d; ++i) {
                    dq[q * d + i] += ds * lc.k[j * d + i];
                    dk[j * d + i] += ds * lc.q[q * d + i];
                }
            }
        }
        for (std::size_t k = 0; k < seq; ++k) {
            outer_acc(gw.wq, &dq[k * d], &lc.a1[k * d]);
            outer_acc(gw.wk, &dk[k * d], &lc.a1[k * d]);
            outer_acc(gw.wv, &dv[k * d], &lc.a1[k * d]);
            std::fill(da.begin(), da.end(), 0.0f);
            matvec_t_acc(w.wq, &dq[k * d], da.data());
            matvec_t_acc(w.wk, &dk[k * d], da.data());
            matvec_t_acc(w.wv, &dv[k * d], da.data());
            ln_backward_from_input(&lc.x_in[k * d], w.ln1_gain, lc.inv1[k], da.data(), d, &dx[k * d],
                                   gw.ln1_gain.data());
        }
    }
    for (std::size_t k = 0; k < seq; ++k) {
        for (std::size_t i = 0; i < d; ++i) {
            g.embed(tokens[k], i) += dx[k * d + i];
            g.pos_embed(k, i) += dx[k * d + i];
        }
    }
    return loss;
}

void validate_config(const HostConfig& cfg) {
    if (cfg.num_layers < 2) throw InputError("host model needs at least 2 layers for cross-layer decoding");
    if (cfg.d_model == 0 || cfg.d_mlp == 0 || cfg.vocab == 0 || cfg.context == 0) {
        throw InputError("host model dimensions must be positive");
    }
}

}  // namespace

HostModel HostModel::zeros(const HostConfig& config) {
    validate_config(config);
    const std::size_t d = config.d_model;
    HostModel m;
    m.config = config;
    m.embed = Tensor2(config.vocab, d);
    m.pos_embed = Tensor2(config.context, d);
    m.layers.resize(config.num_layers);
    for (auto& l : m.layers) {
        l.ln1_gain.assign(d, 1.0f);
        l.wq = Tensor2(d, d);
        l.wk = Tensor2(d, d);
        l.wv = Tensor2(d, d);
        l.wo = Tensor2(d, d);
        l.ln2_gain.assign(d, 1.0f);
        l.w_in = Tensor2(config.d_mlp, d);
        l.b_in.assign(config.d_mlp, 0.0f);
        l.w_out = Tensor2(d, config.d_mlp);
        l.b_out.assign(d, 0.0f);
    }
    m.lnf_gain.assign(d, 1.0f);
    m.unembed = Tensor2(config.vocab, d);
    return m;
}

HostModel HostModel::random(const HostConfig& config, Rng& rng) {
    HostModel m = zeros(config);
    const float d = static_cast<float>(config.d_model);
    const float dm = static_cast<float>(config.d_mlp);
    fill_normal(m.embed, rng, 1.0f);
    fill_normal(m.pos_embed, rng, 0.5f);
    for (auto& l : m.layers) {
        fill_normal(l.wq, rng, 1.0f / std::sqrt(d));
        fill_normal(l.wk, rng, 1.0f / std::sqrt(d));
        fill_normal(l.wv, rng, 1.0f / std::sqrt(d));
        fill_normal(l.wo, rng, 0.5f / std::sqrt(d));
        fill_normal(l.w_in, rng, 1.0f / std::sqrt(d));
        fill_normal(l.w_out, rng, 0.5f / std::sqrt(dm));
    }
    fill_normal(m.unembed, rng, 1.0f / std::sqrt(d));
    return m;
}

CapturedActivations forward_with_capture(const HostModel& model, std::span<const TokenId> tokens) {
    const ForwardCache c = forward_cached(model, tokens);
    const HostConfig& cfg = model.config;
    CapturedActivations cap;
    cap.tokens.assign(tokens.begin(), tokens.end());
    for (const auto& lc : c.layers) {
        cap.mlp_in.emplace_back(c.seq, cfg.d_model, lc.x_mid);
        cap.mlp_out.emplace_back(c.seq, cfg.d_model, lc.m);
    }
    cap.logits = Tensor2(c.seq, cfg.vocab, c.logits);
    return cap;
}

FrozenForwardState freeze(const HostModel& model, std::span<const TokenId> tokens,
                          CapturedActivations* capture) {
    const ForwardCache c = forward_cached(model, tokens);
    const HostConfig& cfg = model.config;
    FrozenForwardState s;
    s.tokens.assign(tokens.begin(), tokens.end());
    s.residual0 = Tensor2(c.seq, cfg.d_model, c.x0);
    for (const auto& lc : c.layers) {
        s.ln1_inv.push_back(lc.inv1);
        s.attn_probs.push_back(lc.probs);
        s.ln2_inv.push_back(lc.inv2);
        std::vector<std::uint8_t> mask(lc.u.size());
        for (std::size_t j = 0; j < lc.u.size(); ++j) mask[j] = lc.u[j] > 0.0f ? 1 : 0;
        s.mlp_mask.push_back(std::move(mask));
    }
    s.lnf_inv = c.invf;
    if (capture) {
        capture->tokens = s.tokens;
        capture->mlp_in.clear();
        capture->mlp_out.clear();
        for (const auto& lc : c.layers) {
            capture->mlp_in.emplace_back(c.seq, cfg.d_model, lc.x_mid);
            capture->mlp_out.emplace_back(c.seq, cfg.d_model, lc.m);
        }
        capture->logits = Tensor2(c.seq, cfg.vocab, c.logits);
    }
    return s;
}

namespace {

template <typename T>
FrozenOutputs<T> replay_impl(const HostModel& model, const FrozenForwardState& state,
                             const std::vector<std::vector<T>>& mlp_values, bool through_mlps) {
    const HostConfig& cfg = model.config;
    const std::size_t seq = state.seq_len();
    const std::size_t d = cfg.d_model;
    const std::size_t dm = cfg.d_mlp;
    if (mlp_values.size() != cfg.num_layers) throw ShapeError("frozen replay: need one MLP array per layer");
    for (const auto& v : mlp_values)
        if (v.size() != seq * d) throw ShapeError("frozen replay: MLP array must be T x d");

    FrozenOutputs<T> out;
    std::vector<T> x(seq * d);
    for (std::size_t e = 0; e < seq * d; ++e) x[e] = static_cast<T>(state.residual0.data()[e]);
    std::vector<T> a(seq * d), v(seq * d), o, attn(d), a2(d), u(dm), mvec(d);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const HostLayer& w = model.layers[l];
        for (std::size_t k = 0; k < seq; ++k) {
            ln_apply(&x[k * d], w.ln1_gain, static_cast<T>(state.ln1_inv[l][k]), d, &a[k * d]);
            matvec(w.wv, &a[k * d], &v[k * d]);
        }
        attention_mix(state.attn_probs[l], v, seq, d, o);
        std::vector<T> x_mid(seq * d);
        for (std::size_t k = 0; k < seq; ++k) {
            matvec(w.wo, &o[k * d], attn.data());
            for (std::size_t i = 0; i < d; ++i) x_mid[k * d + i] = x[k * d + i] + attn[i];
        }
        for (std::size_t k = 0; k < seq; ++k) {
            if (through_mlps) {
                ln_apply(&x_mid[k * d], w.ln2_gain, static_cast<T>(state.ln2_inv[l][k]), d, a2.data());
                matvec(w.w_in, a2.data(), u.data());
                for (std::size_t j = 0; j < dm; ++j) {
                    u[j] += static_cast<T>(w.b_in[j]);
                    if (!state.mlp_mask[l][k * dm + j]) u[j] = T(0);
                }
                matvec(w.w_out, u.data(), mvec.data());
                for (std::size_t i = 0; i < d; ++i) {
                    mvec[i] += static_cast<T>(w.b_out[i]);
                    x[k * d + i] = x_mid[k * d + i] + (mvec[i] + mlp_values[l][k * d + i]);
                }
            } else {
                for (std::size_t i = 0; i < d; ++i) x[k * d + i] = x_mid[k * d + i] + mlp_values[l][k * d + i];
            }
        }
        out.mlp_in.push_back(std::move(x_mid));
    }
    out.logits.resize(seq * cfg.vocab);
    std::vector<T> f(d);
    for (std::size_t k = 0; k < seq; ++k) {
        ln_apply(&x[k * d], model.lnf_gain, static_cast<T>(state.lnf_inv[k]), d, f.data());
        matvec(model.unembed, f.data(), &out.logits[k * cfg.vocab]);
    }
    return out;
}

}  // namespace

template <typename T>
FrozenOutputs<T> frozen_replay(const HostModel& model, const FrozenForwardState& state,
                               const std::vector<std::vector<T>>& mlp_outputs) {
    return replay_impl(model, state, mlp_outputs, false);
}

template <typename T>
FrozenOutputs<T> frozen_replay_through_mlps(const HostModel& model, const FrozenForwardState& state,
                                            const std::vector<std::vector<T>>& mlp_offsets) {
    return replay_impl(model, state, mlp_offsets, true);
}

template FrozenOutputs<float> frozen_replay(const HostModel&, const FrozenForwardState&,
                                            const std::vector<std::vector<float>>&);
template FrozenOutputs<double> frozen_replay(const HostModel&, const FrozenForwardState&,
                                             const std::vector<std::vector<double>>&);
template FrozenOutputs<float> frozen_replay_through_mlps(const HostModel&, const FrozenForwardState&,
                                                         const std::vector<std::vector<float>>&);
template FrozenOutputs<double> frozen_replay_through_mlps(const HostModel&, const FrozenForwardState&,
                                                          const std::vector<std::vector<double>>&);

FrozenResponse frozen_response(const HostModel& model, const FrozenForwardState& state,
                               std::span<const Injection> injections, JacobianPath path) {
    const HostConfig& cfg = model.config;
    const std::size_t seq = state.seq_len();
    const std::size_t d = cfg.d_model;
    const std::size_t dm = cfg.d_mlp;
    const int num_layers = static_cast<int>(cfg.num_layers);

    std::size_t first_pos = seq;
    for (const auto& inj : injections) {
        if (inj.layer < kEmbeddingLayer || inj.layer >= num_layers || inj.pos >= seq || inj.vec.size() != d) {
            throw InputError("injection at layer " + std::to_string(inj.layer) + " pos " +
                             std::to_string(inj.pos) + " is out of range");
        }
        first_pos = std::min(first_pos, inj.pos);
    }

    FrozenResponse r;
    r.mlp_in.assign(cfg.num_layers, std::vector<double>(seq * d, 0.0));
    r.logits.assign(seq * cfg.vocab, 0.0);
    if (injections.empty()) return r;

    std::vector<double> dx(seq * d, 0.0);
    for (const auto& inj : injections)
        if (inj.layer == kEmbeddingLayer)
            for (std::size_t i = 0; i < d; ++i) dx[inj.pos * d + i] += inj.vec[i];

    std::vector<double> a(seq * d, 0.0), v(seq * d, 0.0), ov(d), tmp(d), a2(d), u(dm);
    for (int l = 0; l < num_layers; ++l) {
        const HostLayer& w = model.layers[static_cast<std::size_t>(l)];
        // Positions before the earliest injection stay exactly zero (causal mask).
        for (std::size_t k = first_pos; k < seq; ++k) {
            ln_apply(&dx[k * d], w.ln1_gain, static_cast<double>(state.ln1_inv[l][k]), d, &a[k * d]);
            matvec(w.wv, &a[k * d], &v[k * d]);
        }
        auto& mid = r.mlp_in[static_cast<std::size_t>(l)];
        for (std::size_t q = first_pos; q < seq; ++q) {
            std::fill(ov.begin(), ov.end(), 0.0);
            for (std::size_t j = first_pos; j <= q; ++j) {
                const double pj = state.attn_probs[l](q, j);
                for (std::size_t i = 0; i < d; ++i) ov[i] += pj * v[j * d + i];
            }
            matvec(w.wo, ov.data(), tmp.data());
            for (std::size_t i = 0; i < d; ++i) mid[q * d + i] = dx[q * d + i] + tmp[i];
        }
        for (std::size_t k = first_pos; k < seq; ++k) {
            for (std::size_t i = 0; i < d; ++i) dx[k * d + i] = mid[k * d + i];
            if (path == JacobianPath::through_mlps) {
                ln_apply(&mid[k * d], w.ln2_gain, static_cast<double>(state.ln2_inv[l][k]), d, a2.data());
                matvec(w.w_in, a2.data(), u.data());
                for (std::size_t j = 0; j < dm; ++j)
                    if (!state.mlp_mask[l][k * dm + j]) u[j] = 0.0;
                matvec(w.w_out, u.data(), tmp.data());
                for (std::size_t i = 0; i < d; ++i) dx[k * d + i] += tmp[i];
            }
        }
        for (const auto& inj : injections)
            if (inj.layer == l)
                for (std::size_t i = 0; i < d; ++i) dx[inj.pos * d + i] += inj.vec[i];
    }
    std::vector<double> f(d);
    for (std::size_t k = first_pos; k < seq; ++k) {
        ln_apply(&dx[k * d], model.lnf_gain, static_cast<double>(state.lnf_inv[k]), d, f.data());
        matvec(model.unembed, f.data(), &r.logits[k * cfg.vocab]);
    }
    return r;
}

namespace {

void check_site(const HostModel& model, const FrozenForwardState& state, TapSite s, const char* what) {
    if (s.layer >= model.config.num_layers || s.pos >= state.seq_len()) {
        throw InputError(std::string(what) + " site (" + std::to_string(s.layer) + ", " +
                         std::to_string(s.pos) + ") is out of range");
    }
}

}  // namespace

Tensor2 frozen_jacobian(const HostModel& model, const FrozenForwardState& state, TapSite src, TapSite dst,
                        JacobianPath path) {
    check_site(model, state, src, "source");
    check_site(model, state, dst, "destination");
    if (dst.layer <= src.layer || dst.pos < src.pos) {
        throw OrderingError("MLP output at (" + std::to_string(src.layer) + ", " + std::to_string(src.pos) +
                            ") cannot reach MLP input at (" + std::to_string(dst.layer) + ", " +
                            std::to_string(dst.pos) + ")");
    }
    const std::size_t d = model.config.d_model;
    Tensor2 jac(d, d);
    Injection inj{static_cast<int>(src.layer), src.pos, std::vector<double>(d, 0.0)};
    for (std::size_t i = 0; i < d; ++i) {
        std::fill(inj.vec.begin(), inj.vec.end(), 0.0);
        inj.vec[i] = 1.0;
        const FrozenResponse r = frozen_response(model, state, std::span(&inj, 1), path);
        for (std::size_t o = 0; o < d; ++o) jac(o, i) = static_cast<float>(r.mlp_in[dst.layer][dst.pos * d + o]);
    }
    return jac;
}

std::vector<float> jacobian_to_logit(const HostModel& model, const FrozenForwardState& state, TapSite src,
                                     std::size_t logit_index, std::size_t logit_pos, JacobianPath path) {
    check_site(model, state, src, "source");
    if (logit_pos == static_cast<std::size_t>(-1)) logit_pos = state.seq_len() - 1;
    if (logit_index >= model.config.vocab || logit_pos >= state.seq_len()) {
        throw InputError("logit index/position out of range");
    }
    if (logit_pos < src.pos) {
        throw OrderingError("MLP output at position " + std::to_string(src.pos) +
                            " cannot reach logits at position " + std::to_string(logit_pos));
    }
    const std::size_t d = model.config.d_model;
    std::vector<float> grad(d);
    Injection inj{static_cast<int>(src.layer), src.pos, std::vector<double>(d, 0.0)};
    for (std::size_t i = 0; i < d; ++i) {
        std::fill(inj.vec.begin(), inj.vec.end(), 0.0);
        inj.vec[i] = 1.0;
        const FrozenResponse r = frozen_response(model, state, std::span(&inj, 1), path);
        grad[i] = static_cast<float>(r.logits[logit_pos * model.config.vocab + logit_index]);
    }
    return grad;
}

float next_token_loss(const HostModel& model, std::span<const TokenSequence> batch) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& seq : batch) {
        const ForwardCache c = forward_cached(model, seq);
        const std::size_t vocab = model.config.vocab;
        for (std::size_t k = 0; k + 1 < c.seq; ++k) {
            const float* lg = &c.logits[k * vocab];
            const float mx = *std::max_element(lg, lg + vocab);
            double sum = 0.0;
            for (std::size_t t = 0; t < vocab; ++t) sum += std::exp(static_cast<double>(lg[t] - mx));
            total += -(static_cast<double>(lg[seq[k + 1]] - mx) - std::log(sum));
            ++count;
        }
    }
    return count ? static_cast<float>(total / static_cast<double>(count)) : 0.0f;
}

float next_token_loss_and_grad(const HostModel& model, std::span<const TokenSequence> batch, HostModel& grad) {
    grad = HostModel::zeros(model.config);
    grad.for_each_param([](std::span<float> p) { std::fill(p.begin(), p.end(), 0.0f); });
    std::size_t count = 0;
    for (const auto& seq : batch) count += seq.size() > 0 ? seq.size() - 1 : 0;
    if (count == 0) return 0.0f;
    const float weight = 1.0f / static_cast<float>(count);
    double total = 0.0;
    for (const auto& seq : batch) {
        const ForwardCache c = forward_cached(model, seq);
        total += backward_sequence(model, seq, c, weight, grad);
    }
    return static_cast<float>(total / static_cast<double>(count));
}

HostTrainResult train_host_model(HostModel model, std::span<const TokenSequence> corpus,
                                 const HostTrainConfig& config) {
    HostTrainResult result;
    if (config.steps == 0 || corpus.empty()) {
        result.model = std::move(model);
        return result;
    }
    Rng rng(config.seed);
    std::vector<std::span<float>> params;
    model.for_each_param([&](std::span<float> p) { params.push_back(p); });
    std::vector<std::vector<float>> m1, m2;
    for (auto p : params) {
        m1.emplace_back(p.size(), 0.0f);
        m2.emplace_back(p.size(), 0.0f);
    }
    HostModel grad;
    std::vector<TokenSequence> batch(config.batch_sequences);
    for (std::size_t step = 1; step <= config.steps; ++step) {
        for (auto& s : batch) s = corpus[rng.below(corpus.size())];
        const float loss = next_token_loss_and_grad(model, batch, grad);
        if (!std::isfinite(loss)) throw TrainingError("host model loss is not finite at step " + std::to_string(step));
        result.loss_history.push_back(loss);
        std::vector<std::span<float>> grads;
        grad.for_each_param([&](std::span<float> p) { grads.push_back(p); });
        const float bc1 = 1.0f - std::pow(config.beta1, static_cast<float>(step));
        const float bc2 = 1.0f - std::pow(config.beta2, static_cast<float>(step));
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            auto p = params[pi];
            auto g = grads[pi];
            for (std::size_t j = 0; j < p.size(); ++j) {
                m1[pi][j] = config.beta1 * m1[pi][j] + (1.0f - config.beta1) * g[j];
                m2[pi][j] = config.beta2 * m2[pi][j] + (1.0f - config.beta2) * g[j] * g[j];
                const float mh = m1[pi][j] / bc1;
                const float vh = m2[pi][j] / bc2;
                p[j] -= config.lr * mh / (std::sqrt(vh) + 1e-8f);
            }
        }
    }
    result.model = std::move(model);
    return result;
}

Bytes serialize_host_model(const HostModel& model) {
    ByteWriter w;
    w.tag(kHostMagic);
    w.u32(kHostVersion);
    const HostConfig& c = model.config;
    w.u32(static_cast<std::uint32_t>(c.num_layers));
    w.u32(static_cast<std::uint32_t>(c.d_model));
    w.u32(static_cast<std::uint32_t>(c.d_mlp));
    w.u32(static_cast<std::uint32_t>(c.vocab));
    w.u32(static_cast<std::uint32_t>(c.context));
    w.f32(c.ln_eps);
    HostModel& mut = const_cast<HostModel&>(model);
    mut.for_each_param([&](std::span<float> p) { w.f32_array(p); });
    return w.take();
}

HostModel deserialize_host_model(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "host model checkpoint");
    r.expect_tag(kHostMagic);
    const std::uint32_t version = r.u32();
    if (version != kHostVersion) throw IntegrityError("host model checkpoint: unsupported version " + std::to_string(version));
    HostConfig c;
    c.num_layers = r.u32();
    c.d_model = r.u32();
    c.d_mlp = r.u32();
    c.vocab = r.u32();
    c.context = r.u32();
    c.ln_eps = r.f32();
    HostModel m = HostModel::zeros(c);
    m.for_each_param([&](std::span<float> p) {
        auto v = r.f32_array(p.size());
        std::copy(v.begin(), v.end(), p.begin());
    });
    if (r.remaining() != 0) throw IntegrityError("host model checkpoint: trailing bytes");
    return m;
}

void save_host_model(const HostModel& model, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_host_model(model));
}

HostModel load_host_model(const std::filesystem::path& path) {
    return deserialize_host_model(read_file(path));
}

}  // namespace cltforge
