// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Straightforward double-precision forward pass written from the
// architecture description, used only to check the library's forward.

#pragma once

#include <cmath>
#include <vector>

#include "cltforge/host_model.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

struct HostTrace {
    std::vector<Mat> h;  // [layer][pos][i]
    std::vector<Mat> m;
    Mat logits;
};

inline std::vector<double> layer_norm(const std::vector<double>& x, const std::vector<float>& g, double eps) {
    const double n = static_cast<double>(x.size());
    double mu = 0;
    for (double v : x) mu += v;
    mu /= n;
    double var = 0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= n;
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = g[i] * (x[i] - mu) / std::sqrt(var + eps);
    return y;
}

inline std::vector<double> mat_apply(const cltforge::Tensor2& w, const std::vector<double>& x) {
    std::vector<double> y(w.rows(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) y[r] += w(r, c) * x[c];
    return y;
}

inline HostTrace host_forward(const cltforge::HostModel& model, const std::vector<cltforge::TokenId>& tokens) {
    const auto& cfg = model.config;
    const std::size_t T = tokens.size(), d = cfg.d_model;
    Mat x(T, std::vector<double>(d));
    for (std::size_t k = 0; k < T; ++k)
        for (std::size_t i = 0; i < d; ++i) x[k][i] = model.embed(tokens[k], i) + model.pos_embed(k, i);
    HostTrace tr;
    for (const auto& layer : model.layers) {
        Mat q(T), kk(T), v(T);
        for (std::size_t k = 0; k < T; ++k) {
            const auto a = layer_norm(x[k], layer.ln1_gain, cfg.ln_eps);
            q[k] = mat_apply(layer.wq, a);
            kk[k] = mat_apply(layer.wk, a);
            v[k] = mat_apply(layer.wv, a);
        }
        Mat mid(T);
        for (std::size_t k = 0; k < T; ++k) {
            std::vector<double> s(k + 1);
            double mx = -1e300;
            for (std::size_t j = 0; j <= k; ++j) {
                double dot = 0;
                for (std::size_t i = 0; i < d; ++i) dot += q[k][i] * kk[j][i];
                s[j] = dot / std::sqrt(static_cast<double>(d));
                mx = std::max(mx, s[j]);
            }
            double z = 0;
            for (auto& e : s) z += (e = std::exp(e - mx));
            std::vector<double> o(d, 0.0);
            for (std::size_t j = 0; j <= k; ++j)
                for (std::size_t i = 0; i < d; ++i) o[i] += s[j] / z * v[j][i];
            const auto proj = mat_apply(layer.wo, o);
            mid[k] = x[k];
            for (std::size_t i = 0; i < d; ++i) mid[k][i] += proj[i];
        }
        Mat m(T);
        for (std::size_t k = 0; k < T; ++k) {
            auto pre = mat_apply(layer.w_in, layer_norm(mid[k], layer.ln2_gain, cfg.ln_eps));
            for (std::size_t u = 0; u < pre.size(); ++u) pre[u] = std::max(0.0, pre[u] + layer.b_in[u]);
            m[k] = mat_apply(layer.w_out, pre);
            for (std::size_t i = 0; i < d; ++i) m[k][i] += layer.b_out[i];
            for (std::size_t i = 0; i < d; ++i) x[k][i] = mid[k][i] + m[k][i];
        }
        tr.h.push_back(mid);
        tr.m.push_back(m);
    }
    for (std::size_t k = 0; k < T; ++k) tr.logits.push_back(mat_apply(model.unembed, layer_norm(x[k], model.lnf_gain, cfg.ln_eps)));
    return tr;
}

}  // namespace oracle
