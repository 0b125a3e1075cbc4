// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "cltforge/error.hpp"

namespace cltforge {

namespace {

struct ShardForward {
    std::vector<Tensor2> pre;      // [layer] n × |r|
    std::vector<Tensor2> z;        // [layer] n × |r|
    std::vector<FixedPartial> partial;  // [target] n × d
};

ShardForward shard_forward(const CltModel& clt, const std::vector<Tensor2>& dec, const ActivationBatch& b,
                           FeatureRange r) {
    ShardForward f;
    const std::size_t L = clt.shape.num_layers;
    for (std::size_t l = 0; l < L; ++l) {
        f.pre.push_back(pre_activations(clt, l, b.inputs[l], r));
        f.z.push_back(jump_relu(clt, l, f.pre.back(), r));
    }
    for (std::size_t t = 0; t < L; ++t) f.partial.push_back(partial_decode_fixed(clt, f.z, t, r, &dec));
    return f;
}

// Residual m̂ − m, with m̂ = (Σ_w partial_w) + b_dec.
std::vector<Tensor2> reduce_residual(const CltModel& clt, std::span<const ShardForward> shards,
                                     const ActivationBatch& b) {
    std::vector<Tensor2> res;
    for (std::size_t t = 0; t < clt.shape.num_layers; ++t) {
        FixedPartial sum = shards[0].partial[t];
        for (std::size_t w = 1; w < shards.size(); ++w) sum += shards[w].partial[t];
        Tensor2 acc = sum.to_tensor();
        const auto& bias = clt.b_dec[t];
        const Tensor2& m = b.outputs[t];
        for (std::size_t i = 0; i < acc.rows(); ++i)
            for (std::size_t c = 0; c < acc.cols(); ++c) acc(i, c) = (acc(i, c) + bias[c]) - m(i, c);
        res.push_back(std::move(acc));
    }
    return res;
}

double squared_norm(const Tensor2& t) {
    double s = 0.0;
    for (float v : t.storage()) s += static_cast<double>(v) * v;
    return s;
}

struct RegTerms {
    double sparsity = 0.0;
    double dead = 0.0;
};

// Regularizer values for a shard and, when grad != nullptr, gradients of
// scale × (the per-batch loss) for the shard's parameters, accumulated into
// grad. b_dec gradients are written only when own_bias is set.
RegTerms shard_backward(const CltModel& clt, const std::vector<Tensor2>& dec,
                        const std::vector<std::vector<float>>& norms, const ActivationBatch& b,
                        const std::vector<Tensor2>& residual, const ShardForward& fwd, FeatureRange r,
                        const LossConfig& cfg, float lambda0, const DeadMask& dead, CltModel* grad, double scale,
                        bool own_bias) {
    const std::size_t L = clt.shape.num_layers, d = clt.shape.d_model;
    const std::size_t n = b.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    const float k_rec = static_cast<float>(2.0 * scale * inv_n);
    const float k_sp = static_cast<float>(lambda0 * scale * inv_n);
    const float k_dead = static_cast<float>(cfg.dead_penalty_coef * scale * inv_n);
    const float C = cfg.tanh_scale;
    const float eps = clt.bandwidth;
    RegTerms terms;

    for (std::size_t l = 0; l < L; ++l) {
        const Tensor2& pre = fwd.pre[l];
        const Tensor2& z = fwd.z[l];
        const Tensor2& h = b.inputs[l];
        for (std::size_t j = 0; j < r.size(); ++j) {
            const std::size_t f = r.begin + j;
            const float norm = norms[l][f];
            const float theta = std::exp(clt.log_threshold[l][f]);
            const bool is_dead = !dead.empty() && dead[l][f];
            double sp = 0.0, dd = 0.0;
            float dnorm = 0.0f, dtheta = 0.0f, db = 0.0f;
            std::vector<float> dw_enc(grad ? d : 0, 0.0f);
            for (std::size_t i = 0; i < n; ++i) {
                const float zi = z(i, j), p = pre(i, j);
                const float tz = std::tanh(C * zi * norm);
                sp += tz;
                if (is_dead && theta > p) dd += static_cast<double>(theta - p) * norm;
                if (!grad) continue;

                const bool active = zi != 0.0f;
                const bool in_window = std::fabs(p - theta) < eps / 2;
                float dz = 0.0f;
                if (active || in_window) {
                    float acc = 0.0f;
                    for (std::size_t t = l; t < L; ++t) {
                        const Tensor2& w = dec[decoder_index(L, l, t)];
                        const float* ri = residual[t].row(i).data();
                        for (std::size_t c = 0; c < d; ++c) acc += ri[c] * w(c, f);
                    }
                    dz = k_rec * acc;
                }
                const float sech2 = 1.0f - tz * tz;
                dz += k_sp * C * norm * sech2;
                dnorm += k_sp * C * zi * sech2;

                float dpre = active ? dz : 0.0f;
                if (in_window) dtheta += dz * (-theta / eps);
                if (is_dead && theta > p) {
                    dpre -= k_dead * norm;
                    dtheta += k_dead * norm;
                    dnorm += k_dead * (theta - p);
                }
                if (dpre != 0.0f) {
                    const float* hi = h.row(i).data();
                    for (std::size_t c = 0; c < d; ++c) dw_enc[c] += dpre * hi[c];
                    db += dpre;
                }
            }
            terms.sparsity += sp;
            terms.dead += dd;
            if (!grad) continue;

            float* gw = grad->w_enc[l].row(f).data();
            for (std::size_t c = 0; c < d; ++c) gw[c] += dw_enc[c];
            grad->b_enc[l][f] += db;
            grad->log_threshold[l][f] += dtheta * theta;
            for (std::size_t t = l; t < L; ++t) {
                const std::size_t idx = decoder_index(L, l, t);
                const Tensor2& w = dec[idx];
                Tensor2& gd = grad->w_dec[idx];
                for (std::size_t c = 0; c < d; ++c) {
                    float acc = 0.0f;
                    for (std::size_t i = 0; i < n; ++i) {
                        const float zi = z(i, j);
                        if (zi != 0.0f) acc += residual[t](i, c) * zi;
                    }
                    float g = k_rec * acc;
                    if (norm > 0.0f) g += dnorm * w(c, f) / norm;
                    gd(c, f) += g;
                }
            }
        }
    }
    if (grad && own_bias) {
        for (std::size_t t = 0; t < L; ++t) {
            auto& gb = grad->b_dec[t];
            for (std::size_t c = 0; c < d; ++c) {
                float acc = 0.0f;
                for (std::size_t i = 0; i < n; ++i) acc += residual[t](i, c);
                gb[c] += k_rec * acc;
            }
        }
    }
    terms.sparsity *= lambda0 * inv_n;
    terms.dead *= cfg.dead_penalty_coef * inv_n;
    return terms;
}

CltModel zero_grad_like(const CltModel& clt) {
    CltModel g = CltModel::zeros(clt.shape);
    for (auto& t : g.log_threshold) std::fill(t.begin(), t.end(), 0.0f);
    g.bandwidth = clt.bandwidth;
    if (clt.adapter) {
        LowRankAdapter a;
        a.rank = clt.adapter->rank;
        for (std::size_t i = 0; i < clt.adapter->a.size(); ++i) {
            a.a.emplace_back(clt.adapter->a[i].rows(), a.rank);
            a.b.emplace_back(clt.adapter->b[i].rows(), a.rank);
        }
        g.adapter = std::move(a);
    }
    return g;
}

// dA = dW·B, dB = dWᵀ·A for W_eff = W + A·Bᵀ.
void adapter_gradients(const CltModel& clt, CltModel& grad) {
    if (!clt.adapter || !grad.adapter) return;
    const std::size_t r = clt.adapter->rank;
    for (std::size_t idx = 0; idx < clt.w_dec.size(); ++idx) {
        const Tensor2& dw = grad.w_dec[idx];
        const Tensor2& A = clt.adapter->a[idx];
        const Tensor2& B = clt.adapter->b[idx];
        Tensor2& dA = grad.adapter->a[idx];
        Tensor2& dB = grad.adapter->b[idx];
        for (std::size_t c = 0; c < dw.rows(); ++c)
            for (std::size_t k = 0; k < r; ++k) {
                float acc = 0.0f;
                for (std::size_t f = 0; f < dw.cols(); ++f) acc += dw(c, f) * B(f, k);
                dA(c, k) = acc;
            }
        for (std::size_t f = 0; f < dw.cols(); ++f)
            for (std::size_t k = 0; k < r; ++k) {
                float acc = 0.0f;
                for (std::size_t c = 0; c < dw.rows(); ++c) acc += dw(c, f) * A(c, k);
                dB(f, k) = acc;
            }
    }
}

template <typename Fn>
void run_workers(std::size_t count, Fn&& fn) {
    if (count == 1) {
        fn(0);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(count);
    std::vector<std::exception_ptr> errors(count);
    for (std::size_t w = 0; w < count; ++w)
        threads.emplace_back([&, w] {
            try {
                fn(w);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// Per-step statistics gathered over micro-batches.
struct StepStats {
    std::vector<double> err, sum_m2, active;
    std::vector<std::vector<double>> sum_m;
    double tokens = 0.0;
    LossTerms terms;
    std::size_t micro = 0;

    StepStats(std::size_t L, std::size_t d) : err(L, 0.0), sum_m2(L, 0.0), active(L, 0.0), sum_m(L, std::vector<double>(d, 0.0)) {}

    void add_targets(const ActivationBatch& b, const std::vector<Tensor2>& residual) {
        for (std::size_t l = 0; l < err.size(); ++l) {
            err[l] += squared_norm(residual[l]);
            const Tensor2& m = b.outputs[l];
            for (std::size_t i = 0; i < m.rows(); ++i)
                for (std::size_t c = 0; c < m.cols(); ++c) {
                    sum_m[l][c] += m(i, c);
                    sum_m2[l] += static_cast<double>(m(i, c)) * m(i, c);
                }
        }
        tokens += static_cast<double>(b.size());
    }

    void ev(std::vector<double>& per_layer, double& total) const {
        double te = 0.0, tv = 0.0;
        per_layer.clear();
        for (std::size_t l = 0; l < err.size(); ++l) {
            double mean_sq = 0.0;
            for (double s : sum_m[l]) mean_sq += s * s;
            const double var = sum_m2[l] - mean_sq / tokens;
            per_layer.push_back(var > 0 ? 1.0 - err[l] / var : 0.0);
            te += err[l];
            tv += var;
        }
        total = tv > 0 ? 1.0 - te / tv : 0.0;
    }
};

void mark_active(const ShardForward& f, FeatureRange r, std::size_t step, std::vector<std::vector<std::size_t>>& last,
                 std::vector<double>& active_counts) {
    for (std::size_t l = 0; l < f.z.size(); ++l) {
        const Tensor2& z = f.z[l];
        for (std::size_t i = 0; i < z.rows(); ++i)
            for (std::size_t j = 0; j < z.cols(); ++j)
                if (z(i, j) != 0.0f) {
                    last[l][r.begin + j] = step;
                    active_counts[l] += 1.0;
                }
    }
}

// Shuffle buffer over a worker's stream; the stream restarts when exhausted.
class TokenBatcher {
public:
    TokenBatcher(std::unique_ptr<ActivationSource> src, std::size_t capacity, Rng rng)
        : src_(std::move(src)), L_(src_->num_layers()), d_(src_->d_model()), capacity_(capacity), rng_(rng) {
        stride_ = 2 * L_ * d_;
    }

    std::size_t num_layers() const { return L_; }
    std::size_t d_model() const { return d_; }

    ActivationBatch next(std::size_t n) {
        if (count_ < std::max(n, capacity_)) refill(std::max(n, capacity_));
        ActivationBatch out;
        std::vector<std::vector<float>> in(L_), mo(L_);
        for (std::size_t l = 0; l < L_; ++l) {
            in[l].reserve(n * d_);
            mo[l].reserve(n * d_);
        }
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t j = static_cast<std::size_t>(rng_.below(count_));
            const float* row = rows_.data() + j * stride_;
            for (std::size_t l = 0; l < L_; ++l) {
                in[l].insert(in[l].end(), row + 2 * l * d_, row + (2 * l + 1) * d_);
                mo[l].insert(mo[l].end(), row + (2 * l + 1) * d_, row + (2 * l + 2) * d_);
            }
            out.tokens.push_back(tokens_[j]);
            --count_;
            if (j != count_) {
                std::copy(rows_.begin() + count_ * stride_, rows_.begin() + (count_ + 1) * stride_,
                          rows_.begin() + j * stride_);
                tokens_[j] = tokens_[count_];
            }
            rows_.resize(count_ * stride_);
            tokens_.resize(count_);
        }
        for (std::size_t l = 0; l < L_; ++l) {
            out.inputs.emplace_back(n, d_, std::move(in[l]));
            out.outputs.emplace_back(n, d_, std::move(mo[l]));
        }
        return out;
    }

private:
    void refill(std::size_t target) {
        while (count_ < target) {
            auto b = src_->next();
            if (!b) {
                if (!yielded_since_reset_ && restarted_) throw ConfigError("activation source is empty");
                src_->reset();
                restarted_ = true;
                yielded_since_reset_ = false;
                continue;
            }
            if (b->inputs.size() != L_ || b->inputs.front().cols() != d_)
                throw ConfigError("activation batch shape differs from the stream's");
            yielded_since_reset_ = yielded_since_reset_ || b->size() > 0;
            for (std::size_t i = 0; i < b->size(); ++i) {
                for (std::size_t l = 0; l < L_; ++l) {
                    const auto hi = b->inputs[l].row(i), mi = b->outputs[l].row(i);
                    rows_.insert(rows_.end(), hi.begin(), hi.end());
                    rows_.insert(rows_.end(), mi.begin(), mi.end());
                }
                tokens_.push_back(b->tokens.empty() ? 0 : b->tokens[i]);
                ++count_;
            }
        }
    }

    std::unique_ptr<ActivationSource> src_;
    std::size_t L_, d_, stride_ = 0, capacity_;
    Rng rng_;
    std::vector<float> rows_;
    std::vector<TokenId> tokens_;
    std::size_t count_ = 0;
    bool restarted_ = false;
    bool yielded_since_reset_ = false;
};

class Adam {
public:
    Adam(float b1, float b2, float eps) : b1_(b1), b2_(b2), eps_(eps) {}

    void step(std::vector<std::span<float>>& params, const std::vector<std::span<float>>& grads, float lr) {
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.emplace_back(p.size(), 0.0f);
                v_.emplace_back(p.size(), 0.0f);
            }
        }
        ++t_;
        const float c1 = 1.0f - std::pow(b1_, static_cast<float>(t_));
        const float c2 = 1.0f - std::pow(b2_, static_cast<float>(t_));
        for (std::size_t a = 0; a < params.size(); ++a) {
            auto p = params[a];
            const auto g = grads[a];
            auto& m = m_[a];
            auto& v = v_[a];
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = b1_ * m[i] + (1.0f - b1_) * g[i];
                v[i] = b2_ * v[i] + (1.0f - b2_) * g[i] * g[i];
                const float mh = m[i] / c1;
                const float vh = v[i] / c2;
                p[i] -= lr * mh / (std::sqrt(vh) + eps_);
            }
        }
    }

private:
    float b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

std::vector<std::span<float>> param_spans(CltModel& m, bool adapter_only) {
    std::vector<std::span<float>> out;
    if (adapter_only) {
        for (std::size_t i = 0; i < m.adapter->a.size(); ++i) {
            out.push_back(m.adapter->a[i].data());
            out.push_back(m.adapter->b[i].data());
        }
    } else {
        m.for_each_param([&](std::span<float> s) { out.push_back(s); });
    }
    return out;
}

void add_scaled(CltModel& dst, const CltModel& src) {
    std::vector<std::span<float>> a, b;
    dst.for_each_param([&](std::span<float> s) { a.push_back(s); });
    const_cast<CltModel&>(src).for_each_param([&](std::span<float> s) { b.push_back(s); });
    for (std::size_t k = 0; k < a.size(); ++k)
        for (std::size_t i = 0; i < a[k].size(); ++i) a[k][i] += b[k][i];
}

void scale_grad(CltModel& g, float s) {
    g.for_each_param([&](std::span<float> x) {
        for (float& v : x) v *= s;
    });
}

}  // namespace

LossTerms compute_loss(const CltModel& clt, const ActivationBatch& batch, const LossConfig& cfg, float lambda0,
                       const DeadMask& dead) {
    const auto dec = effective_decoders(clt);
    const auto norms = decoder_norms(clt, dec);
    const ShardForward f = shard_forward(clt, dec, batch, clt.all_features());
    const auto res = reduce_residual(clt, std::span(&f, 1), batch);
    LossTerms t;
    for (const auto& r : res) t.reconstruction += squared_norm(r);
    t.reconstruction /= static_cast<double>(batch.size());
    const RegTerms reg =
        shard_backward(clt, dec, norms, batch, res, f, clt.all_features(), cfg, lambda0, dead, nullptr, 1.0, false);
    t.sparsity = reg.sparsity;
    t.dead = reg.dead;
    return t;
}

LossTerms loss_and_gradients(const CltModel& clt, const ActivationBatch& batch, const LossConfig& cfg,
                             float lambda0, const DeadMask& dead, CltModel& grad) {
    grad = zero_grad_like(clt);
    const auto dec = effective_decoders(clt);
    const auto norms = decoder_norms(clt, dec);
    const ShardForward f = shard_forward(clt, dec, batch, clt.all_features());
    const auto res = reduce_residual(clt, std::span(&f, 1), batch);
    LossTerms t;
    for (const auto& r : res) t.reconstruction += squared_norm(r);
    t.reconstruction /= static_cast<double>(batch.size());
    const RegTerms reg =
        shard_backward(clt, dec, norms, batch, res, f, clt.all_features(), cfg, lambda0, dead, &grad, 1.0, true);
    t.sparsity = reg.sparsity;
    t.dead = reg.dead;
    adapter_gradients(clt, grad);
    return t;
}

float l0_schedule(std::size_t step, const LossConfig& cfg) {
    if (cfg.l0_warm_up_steps == 0 || step >= cfg.l0_warm_up_steps) return cfg.l0_coefficient;
    return cfg.l0_coefficient * static_cast<float>(step) / static_cast<float>(cfg.l0_warm_up_steps);
}

float lr_schedule(std::size_t step, const ScheduleConfig& cfg) {
    if (step >= cfg.total_steps && cfg.lr_decay_steps > 0) return 0.0f;
    float lr = cfg.lr;
    if (cfg.lr_warm_up_steps > 0 && step < cfg.lr_warm_up_steps)
        lr = cfg.lr * static_cast<float>(step) / static_cast<float>(cfg.lr_warm_up_steps);
    if (cfg.lr_decay_steps > 0 && step + cfg.lr_decay_steps > cfg.total_steps) {
        const float frac = static_cast<float>(cfg.total_steps - step) / static_cast<float>(cfg.lr_decay_steps);
        lr = std::min(lr, cfg.lr * frac);
    }
    return lr;
}

std::string shard_mode_name(ShardMode m) {
    return m == ShardMode::feature_sharding ? "feature_sharding" : "data_parallel";
}

ShardMode parse_shard_mode(const std::string& name) {
    if (name == "feature_sharding") return ShardMode::feature_sharding;
    if (name == "data_parallel" || name == "ddp") return ShardMode::data_parallel;
    throw ConfigError("unknown distributed setup '" + name + "' (expected feature_sharding or data_parallel)");
}

ShardPlan ShardPlan::make(ShardMode mode, std::size_t num_workers, std::size_t d_features) {
    if (num_workers == 0) throw ConfigError("need at least one worker");
    ShardPlan p;
    p.mode = mode;
    p.num_workers = num_workers;
    if (mode == ShardMode::data_parallel) {
        p.ranges.assign(num_workers, FeatureRange{0, d_features});
        return p;
    }
    if (num_workers > d_features) throw ConfigError("more feature shards than features");
    const std::size_t base = d_features / num_workers, extra = d_features % num_workers;
    std::size_t at = 0;
    for (std::size_t w = 0; w < num_workers; ++w) {
        const std::size_t len = base + (w < extra ? 1 : 0);
        p.ranges.push_back({at, at + len});
        at += len;
    }
    return p;
}

void ShardPlan::validate(std::size_t d_features) const {
    if (num_workers == 0 || ranges.size() != num_workers) throw ConfigError("shard plan has the wrong number of ranges");
    if (mode == ShardMode::data_parallel) {
        for (const auto& r : ranges)
            if (r.begin != 0 || r.end != d_features) throw ConfigError("data-parallel workers must hold every feature");
        return;
    }
    std::size_t at = 0;
    for (const auto& r : ranges) {
        if (r.begin != at || r.end < r.begin) throw ConfigError("feature ranges must be contiguous and disjoint");
        at = r.end;
    }
    if (at != d_features) throw ConfigError("feature ranges do not cover every feature");
}

std::string metrics_to_json(const StepMetrics& m) {
    nlohmann::json j;
    j["step"] = m.step;
    j["loss"] = m.loss;
    j["reconstruction"] = m.reconstruction;
    j["sparsity"] = m.sparsity;
    j["dead_term"] = m.dead_term;
    j["l0"] = m.l0;
    double mean = 0.0;
    for (double v : m.l0) mean += v;
    j["l0_mean"] = m.l0.empty() ? 0.0 : mean / static_cast<double>(m.l0.size());
    j["lambda0"] = m.lambda0;
    j["dead_features"] = m.dead_features;
    j["explained_variance"] = m.explained_variance;
    j["explained_variance_per_layer"] = m.explained_variance_per_layer;
    j["lr"] = m.lr;
    return j.dump();
}

SourceFactory cache_source_factory(std::shared_ptr<const ActivationCache> cache) {
    return [cache](std::size_t w, std::size_t n, ReadMode mode) -> std::unique_ptr<ActivationSource> {
        return std::make_unique<ChunkStream>(cache, w, n, mode);
    };
}

SourceFactory memory_source_factory(std::shared_ptr<const std::vector<ActivationBatch>> batches) {
    return [batches](std::size_t w, std::size_t n, ReadMode mode) -> std::unique_ptr<ActivationSource> {
        return std::make_unique<MemorySource>(batches, w, n, mode);
    };
}

TrainResult train(CltModel clt, const SourceFactory& sources, const TrainConfig& cfg, const ShardPlan& plan) {
    const std::size_t L = clt.shape.num_layers, d = clt.shape.d_model, F = clt.shape.d_features();
    plan.validate(F);
    if (cfg.batch_tokens == 0 || cfg.gradient_accumulation_steps == 0)
        throw ConfigError("batch_tokens and gradient_accumulation_steps must be > 0");
    if (cfg.adapter_only && !clt.adapter) throw ConfigError("adapter-only training needs an attached adapter");
    if (cfg.loss.l0_warm_up_steps > cfg.schedule.total_steps)
        throw ConfigError("l0 warm-up is longer than the run");
    const std::size_t W = plan.num_workers;
    const bool fs = plan.mode == ShardMode::feature_sharding;
    if (!fs && cfg.batch_tokens % W != 0) throw ConfigError("data-parallel batch must divide evenly across workers");

    Rng root(cfg.seed);
    std::vector<TokenBatcher> batchers;
    if (fs) {
        batchers.emplace_back(sources(0, 1, ReadMode::broadcast), cfg.shuffle_buffer_tokens, root.fork(0));
    } else {
        for (std::size_t w = 0; w < W; ++w)
            batchers.emplace_back(sources(w, W, ReadMode::partition), cfg.shuffle_buffer_tokens, root.fork(w));
    }
    for (const auto& b : batchers)
        if (b.num_layers() != L || b.d_model() != d)
            throw ConfigError("activation stream has " + std::to_string(b.num_layers()) + " layers × d " +
                              std::to_string(b.d_model()) + " but the CLT expects " + std::to_string(L) + " × " +
                              std::to_string(d));

    std::ofstream metrics_out;
    if (!cfg.metrics_path.empty()) {
        if (cfg.metrics_path.has_parent_path()) std::filesystem::create_directories(cfg.metrics_path.parent_path());
        metrics_out.open(cfg.metrics_path, std::ios::trunc);
        if (!metrics_out) throw IoError("cannot open metrics log " + cfg.metrics_path.string());
    }
    if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

    TrainResult result;
    std::vector<std::vector<std::size_t>> last_active(L, std::vector<std::size_t>(F, 0));
    std::vector<bool> milestone_done(cfg.checkpoint_l0.size(), false);
    Adam adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    const float accum_scale = 1.0f / static_cast<float>(cfg.gradient_accumulation_steps);

    for (std::size_t step = 1; step <= cfg.schedule.total_steps; ++step) {
        const float lambda0 = l0_schedule(step, cfg.loss);
        DeadMask dead(L, std::vector<std::uint8_t>(F, 0));
        std::size_t dead_count = 0;
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t f = 0; f < F; ++f)
                if (step - last_active[l][f] >= cfg.loss.dead_feature_window) {
                    dead[l][f] = 1;
                    ++dead_count;
                }

        const auto dec = effective_decoders(clt);
        const auto norms = decoder_norms(clt, dec);
        std::vector<CltModel> grads(fs ? 1 : W, zero_grad_like(clt));
        StepStats stats(L, d);

        for (std::size_t micro = 0; micro < cfg.gradient_accumulation_steps; ++micro) {
            if (fs) {
                const ActivationBatch batch = batchers[0].next(cfg.batch_tokens);
                std::vector<ShardForward> fwd(W);
                run_workers(W, [&](std::size_t w) { fwd[w] = shard_forward(clt, dec, batch, plan.ranges[w]); });
                const auto res = reduce_residual(clt, fwd, batch);
                std::vector<RegTerms> reg(W);
                run_workers(W, [&](std::size_t w) {
                    reg[w] = shard_backward(clt, dec, norms, batch, res, fwd[w], plan.ranges[w], cfg.loss, lambda0,
                                            dead, &grads[0], accum_scale, w == 0);
                });
                double rec = 0.0;
                for (const auto& r : res) rec += squared_norm(r);
                stats.terms.reconstruction += rec / static_cast<double>(batch.size());
                for (std::size_t w = 0; w < W; ++w) {
                    stats.terms.sparsity += reg[w].sparsity;
                    stats.terms.dead += reg[w].dead;
                    mark_active(fwd[w], plan.ranges[w], step, last_active, stats.active);
                }
                stats.add_targets(batch, res);
            } else {
                const std::size_t per = cfg.batch_tokens / W;
                std::vector<ActivationBatch> batch(W);
                std::vector<ShardForward> fwd(W);
                std::vector<std::vector<Tensor2>> res(W);
                std::vector<RegTerms> reg(W);
                for (std::size_t w = 0; w < W; ++w) batch[w] = batchers[w].next(per);
                run_workers(W, [&](std::size_t w) {
                    const FeatureRange all = plan.ranges[w];
                    fwd[w] = shard_forward(clt, dec, batch[w], all);
                    res[w] = reduce_residual(clt, std::span(&fwd[w], 1), batch[w]);
                    reg[w] = shard_backward(clt, dec, norms, batch[w], res[w], fwd[w], all, cfg.loss, lambda0, dead,
                                            &grads[w], accum_scale, true);
                });
                for (std::size_t w = 0; w < W; ++w) {
                    double rec = 0.0;
                    for (const auto& r : res[w]) rec += squared_norm(r);
                    stats.terms.reconstruction += rec / static_cast<double>(per) / static_cast<double>(W);
                    stats.terms.sparsity += reg[w].sparsity / static_cast<double>(W);
                    stats.terms.dead += reg[w].dead / static_cast<double>(W);
                    mark_active(fwd[w], plan.ranges[w], step, last_active, stats.active);
                    stats.add_targets(batch[w], res[w]);
                }
            }
            ++stats.micro;
        }

        CltModel& grad = grads[0];
        if (!fs && W > 1) {
            for (std::size_t w = 1; w < W; ++w) add_scaled(grad, grads[w]);
            scale_grad(grad, 1.0f / static_cast<float>(W));
        }
        const double acc = static_cast<double>(cfg.gradient_accumulation_steps);
        LossTerms terms{stats.terms.reconstruction / acc, stats.terms.sparsity / acc, stats.terms.dead / acc};
        if (!std::isfinite(terms.total()))
            throw TrainingError("non-finite loss at step " + std::to_string(step) +
                                " (reconstruction=" + std::to_string(terms.reconstruction) +
                                ", sparsity=" + std::to_string(terms.sparsity) +
                                ", dead=" + std::to_string(terms.dead) + ")");

        const float lr = lr_schedule(step, cfg.schedule);
        if (cfg.adapter_only) adapter_gradients(clt, grad);
        auto params = param_spans(clt, cfg.adapter_only);
        const auto gspans = param_spans(grad, cfg.adapter_only);
        adam.step(params, gspans, lr);

        StepMetrics m;
        m.step = step;
        m.loss = terms.total();
        m.reconstruction = terms.reconstruction;
        m.sparsity = terms.sparsity;
        m.dead_term = terms.dead;
        for (std::size_t l = 0; l < L; ++l) m.l0.push_back(stats.active[l] / stats.tokens);
        m.lambda0 = lambda0;
        m.dead_features = dead_count;
        stats.ev(m.explained_variance_per_layer, m.explained_variance);
        m.lr = lr;
        if (metrics_out) metrics_out << metrics_to_json(m) << '\n' << std::flush;

        double mean_l0 = 0.0;
        for (double v : m.l0) mean_l0 += v;
        mean_l0 /= static_cast<double>(L);
        for (std::size_t k = 0; k < cfg.checkpoint_l0.size(); ++k) {
            if (milestone_done[k] || mean_l0 > cfg.checkpoint_l0[k] || cfg.checkpoint_dir.empty()) continue;
            milestone_done[k] = true;
            std::ostringstream name;
            name << "clt_l0_" << cfg.checkpoint_l0[k] << ".clt";
            const auto path = cfg.checkpoint_dir / name.str();
            save_clt(clt, path);
            result.checkpoints.push_back(path);
        }
        result.log.push_back(std::move(m));
    }
    if (!cfg.checkpoint_dir.empty()) {
        const auto path = cfg.checkpoint_dir / "clt_final.clt";
        save_clt(clt, path);
        result.checkpoints.push_back(path);
    }
    result.model = std::move(clt);
    return result;
}

EvalReport explained_variance(const CltModel& clt, std::span<const ActivationBatch> batches) {
    const std::size_t L = clt.shape.num_layers;
    StepStats stats(L, clt.shape.d_model);
    for (const auto& b : batches) {
        const auto z = encode(clt, b.inputs);
        std::vector<Tensor2> res;
        for (std::size_t t = 0; t < L; ++t) {
            Tensor2 r = decode_cross_layer(clt, z, t);
            for (std::size_t i = 0; i < r.size(); ++i) r.storage()[i] -= b.outputs[t].storage()[i];
            res.push_back(std::move(r));
        }
        stats.add_targets(b, res);
    }
    EvalReport rep;
    stats.ev(rep.per_layer, rep.total);
    return rep;
}

std::vector<double> measure_l0(const CltModel& clt, std::span<const ActivationBatch> batches) {
    const std::size_t L = clt.shape.num_layers;
    std::vector<double> active(L, 0.0);
    double tokens = 0.0;
    for (const auto& b : batches) {
        const auto z = encode(clt, b.inputs);
        for (std::size_t l = 0; l < L; ++l)
            for (float v : z[l].storage())
                if (v != 0.0f) active[l] += 1.0;
        tokens += static_cast<double>(b.size());
    }
    for (double& a : active) a = tokens > 0 ? a / tokens : 0.0;
    return active;
}

std::vector<ActivationBatch> collect_batches(ActivationSource& source, std::size_t max_batches) {
    std::vector<ActivationBatch> out;
    while (max_batches == 0 || out.size() < max_batches) {
        auto b = source.next();
        if (!b) break;
        out.push_back(std::move(*b));
    }
    return out;
}

}  // namespace cltforge
