// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/clt.hpp"

#include <cmath>
#include <limits>

#include "cltforge/error.hpp"

namespace cltforge {

namespace {

constexpr std::string_view kCltMagic{"CLTF-CL\0", 8};
constexpr std::uint32_t kCltVersion = 1;

void check_range(const CltModel& clt, FeatureRange r) {
    if (r.begin > r.end || r.end > clt.shape.d_features())
        throw ShapeError("feature range [" + std::to_string(r.begin) + ", " + std::to_string(r.end) +
                         ") outside d_features " + std::to_string(clt.shape.d_features()));
}

void check_layer(const CltModel& clt, std::size_t layer) {
    if (layer >= clt.shape.num_layers)
        throw ShapeError("layer " + std::to_string(layer) + " out of range for " +
                         std::to_string(clt.shape.num_layers) + " layers");
}

void random_unit_rows(Tensor2& t, Rng& rng, float norm) {
    fill_normal(t, rng, 1.0f);
    for (std::size_t r = 0; r < t.rows(); ++r) {
        auto row = t.row(r);
        const double n = std::sqrt(dot_f64(row, row));
        for (float& v : row) v = static_cast<float>(v / n * norm);
    }
}

}  // namespace

void CltShape::validate() const {
    if (num_layers < 1) throw ShapeError("CLT needs at least one layer");
    if (expansion_factor < 1) throw ShapeError("expansion factor must be ≥ 1");
    if (d_model < 1) throw ShapeError("d_model must be ≥ 1");
}

std::size_t decoder_index(std::size_t num_layers, std::size_t src, std::size_t dst) {
    if (src > dst || dst >= num_layers)
        throw ShapeError("no decoder " + std::to_string(src) + "→" + std::to_string(dst));
    // Row src of the upper triangle starts after Σ_{i<src} (L − i) entries.
    return src * num_layers - src * (src - 1) / 2 + (dst - src);
}

std::uint64_t param_count(const CltShape& shape, bool include_encoders) {
    const std::uint64_t L = shape.num_layers, d = shape.d_model, e = shape.expansion_factor;
    const std::uint64_t per_matrix = e * d * d;
    std::uint64_t n = (L * (L - 1) / 2 + L) * per_matrix;
    if (include_encoders) n += L * per_matrix;
    return n;
}

CltModel CltModel::zeros(const CltShape& shape, const CltInit& init) {
    shape.validate();
    if (!(init.threshold > 0) || !(init.bandwidth > 0)) throw ShapeError("threshold and bandwidth must be > 0");
    const std::size_t L = shape.num_layers, d = shape.d_model, F = shape.d_features();
    CltModel m;
    m.shape = shape;
    m.bandwidth = init.bandwidth;
    for (std::size_t l = 0; l < L; ++l) {
        m.w_enc.emplace_back(F, d);
        m.b_enc.emplace_back(F, 0.0f);
        m.log_threshold.emplace_back(F, std::log(init.threshold));
        m.b_dec.emplace_back(d, 0.0f);
    }
    for (std::size_t i = 0; i < shape.num_decoders(); ++i) m.w_dec.emplace_back(d, F);
    m.input_norm.assign(L, 1.0f);
    m.output_norm.assign(L, 1.0f);
    return m;
}

CltModel CltModel::random(const CltShape& shape, Rng& rng, const CltInit& init) {
    CltModel m = zeros(shape, init);
    const float enc_norm = init.threshold * std::sqrt(static_cast<float>(shape.d_model));
    for (auto& w : m.w_enc) random_unit_rows(w, rng, enc_norm);
    for (auto& w : m.w_dec) {
        // Random directions per column: draw F × d rows, then transpose.
        Tensor2 cols(shape.d_features(), shape.d_model);
        random_unit_rows(cols, rng, init.decoder_norm);
        w = cols.transposed();
    }
    return m;
}

const Tensor2& CltModel::decoder(std::size_t src, std::size_t dst) const {
    return w_dec[decoder_index(shape.num_layers, src, dst)];
}

Tensor2& CltModel::decoder(std::size_t src, std::size_t dst) {
    return w_dec[decoder_index(shape.num_layers, src, dst)];
}

Tensor2 CltModel::effective_decoder(std::size_t src, std::size_t dst) const {
    const std::size_t idx = decoder_index(shape.num_layers, src, dst);
    Tensor2 w = w_dec[idx];
    if (!adapter || adapter->rank == 0) return w;
    const Tensor2& a = adapter->a[idx];
    const Tensor2& b = adapter->b[idx];
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) {
            float acc = 0.0f;
            for (std::size_t k = 0; k < adapter->rank; ++k) acc += a(i, k) * b(j, k);
            w(i, j) += acc;
        }
    return w;
}

std::vector<float> CltModel::thresholds(std::size_t layer) const {
    check_layer(*this, layer);
    std::vector<float> t(log_threshold[layer].size());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::exp(log_threshold[layer][i]);
    return t;
}

Tensor2 pre_activations(const CltModel& clt, std::size_t layer, const Tensor2& h, FeatureRange r) {
    check_layer(clt, layer);
    check_range(clt, r);
    const std::size_t d = clt.shape.d_model;
    if (h.cols() != d) throw ShapeError("encoder input has " + std::to_string(h.cols()) + " columns, expected " +
                                        std::to_string(d));
    const Tensor2& w = clt.w_enc[layer];
    const auto& b = clt.b_enc[layer];
    Tensor2 out(h.rows(), r.size());
    for (std::size_t i = 0; i < h.rows(); ++i) {
        const float* x = h.row(i).data();
        for (std::size_t f = r.begin; f < r.end; ++f) {
            const float* wr = w.row(f).data();
            float acc = 0.0f;
            for (std::size_t k = 0; k < d; ++k) acc += x[k] * wr[k];
            out(i, f - r.begin) = acc + b[f];
        }
    }
    return out;
}

Tensor2 jump_relu(const CltModel& clt, std::size_t layer, const Tensor2& pre, FeatureRange r) {
    check_range(clt, r);
    if (pre.cols() != r.size()) throw ShapeError("pre-activation width does not match the feature range");
    const auto& tau = clt.log_threshold[layer];
    std::vector<float> theta(r.size());
    for (std::size_t j = 0; j < r.size(); ++j) theta[j] = std::exp(tau[r.begin + j]);
    Tensor2 z(pre.rows(), pre.cols());
    for (std::size_t i = 0; i < pre.rows(); ++i)
        for (std::size_t j = 0; j < pre.cols(); ++j) {
            const float p = pre(i, j);
            z(i, j) = p > theta[j] ? p : 0.0f;
        }
    return z;
}

std::vector<Tensor2> encode(const CltModel& clt, std::span<const Tensor2> inputs) {
    if (inputs.size() != clt.shape.num_layers) throw ShapeError("encode needs one input per layer");
    std::vector<Tensor2> z;
    for (std::size_t l = 0; l < inputs.size(); ++l)
        z.push_back(jump_relu(clt, l, pre_activations(clt, l, inputs[l], clt.all_features()), clt.all_features()));
    return z;
}

std::vector<float> encode_one(const CltModel& clt, std::size_t layer, std::span<const float> h) {
    const Tensor2 x(1, h.size(), std::vector<float>(h.begin(), h.end()));
    return jump_relu(clt, layer, pre_activations(clt, layer, x, clt.all_features()), clt.all_features()).storage();
}

void FixedPartial::add_term(std::size_t row, std::size_t col, double value) {
    constexpr double scale = 0x1p48;
    const double scaled = value * scale;
    __int128& a = acc_[row * cols_ + col];
    if (std::fabs(scaled) < 0x1p62) {
        a += static_cast<std::int64_t>(scaled);
    } else if (std::fabs(scaled) < 0x1p100) {
        a += static_cast<__int128>(scaled);
    } else {
        invalid_ = true;  // also catches NaN via the failed comparisons
    }
}

FixedPartial& FixedPartial::operator+=(const FixedPartial& other) {
    if (other.rows_ != rows_ || other.cols_ != cols_) throw ShapeError("partial reconstructions differ in shape");
    for (std::size_t i = 0; i < acc_.size(); ++i) acc_[i] += other.acc_[i];
    invalid_ = invalid_ || other.invalid_;
    return *this;
}

Tensor2 FixedPartial::to_tensor() const {
    Tensor2 out(rows_, cols_);
    auto& o = out.storage();
    for (std::size_t i = 0; i < acc_.size(); ++i)
        o[i] = invalid_ ? std::numeric_limits<float>::quiet_NaN()
                        : static_cast<float>(static_cast<double>(acc_[i]) * 0x1p-48);
    return out;
}

FixedPartial partial_decode_fixed(const CltModel& clt, std::span<const Tensor2> z, std::size_t target,
                                  FeatureRange r, const std::vector<Tensor2>* decoders) {
    check_layer(clt, target);
    check_range(clt, r);
    if (z.size() < target + 1) throw ShapeError("decode needs activations for every source layer");
    const std::size_t d = clt.shape.d_model, L = clt.shape.num_layers;
    const std::size_t n = z[0].rows();
    FixedPartial out(n, d);
    for (std::size_t src = 0; src <= target; ++src) {
        if (z[src].cols() != r.size() || z[src].rows() != n) throw ShapeError("activation block has the wrong shape");
        const std::size_t idx = decoder_index(L, src, target);
        const Tensor2& w = decoders ? (*decoders)[idx] : clt.w_dec[idx];
        for (std::size_t i = 0; i < n; ++i) {
            const float* zi = z[src].row(i).data();
            for (std::size_t j = 0; j < r.size(); ++j) {
                const double a = zi[j];
                if (a == 0.0) continue;
                const std::size_t f = r.begin + j;
                for (std::size_t c = 0; c < d; ++c) out.add_term(i, c, a * w(c, f));
            }
        }
    }
    return out;
}

Tensor2 partial_decode(const CltModel& clt, std::span<const Tensor2> z, std::size_t target, FeatureRange r,
                       const std::vector<Tensor2>* decoders) {
    return partial_decode_fixed(clt, z, target, r, decoders).to_tensor();
}

Tensor2 decode_cross_layer(const CltModel& clt, std::span<const Tensor2> z, std::size_t target) {
    std::vector<Tensor2> eff;
    const std::vector<Tensor2>* dec = nullptr;
    if (clt.adapter && clt.adapter->rank > 0) {
        eff = effective_decoders(clt);
        dec = &eff;
    }
    Tensor2 out = partial_decode(clt, z, target, clt.all_features(), dec);
    const auto& b = clt.b_dec[target];
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t c = 0; c < out.cols(); ++c) out(i, c) += b[c];
    return out;
}

Tensor2 decode_standard(const CltModel& clt, std::span<const Tensor2> z, std::size_t layer) {
    check_layer(clt, layer);
    if (z.size() <= layer) throw ShapeError("decode needs activations for the layer");
    const std::size_t d = clt.shape.d_model;
    const Tensor2 w = clt.effective_decoder(layer, layer);
    const Tensor2& zl = z[layer];
    if (zl.cols() != clt.shape.d_features()) throw ShapeError("activation block has the wrong shape");
    FixedPartial acc(zl.rows(), d);
    for (std::size_t i = 0; i < zl.rows(); ++i)
        for (std::size_t f = 0; f < zl.cols(); ++f) {
            const double a = zl(i, f);
            if (a == 0.0) continue;
            for (std::size_t c = 0; c < d; ++c) acc.add_term(i, c, a * w(c, f));
        }
    Tensor2 out = acc.to_tensor();
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t c = 0; c < d; ++c) out(i, c) += clt.b_dec[layer][c];
    return out;
}

std::vector<Tensor2> effective_decoders(const CltModel& clt) {
    std::vector<Tensor2> out;
    const std::size_t L = clt.shape.num_layers;
    for (std::size_t s = 0; s < L; ++s)
        for (std::size_t t = s; t < L; ++t) out.push_back(clt.effective_decoder(s, t));
    return out;
}

std::vector<std::vector<float>> decoder_norms(const CltModel& clt, const std::vector<Tensor2>& decoders) {
    const std::size_t L = clt.shape.num_layers, d = clt.shape.d_model, F = clt.shape.d_features();
    std::vector<std::vector<float>> out(L, std::vector<float>(F));
    for (std::size_t s = 0; s < L; ++s)
        for (std::size_t f = 0; f < F; ++f) {
            double acc = 0.0;
            for (std::size_t t = s; t < L; ++t) {
                const Tensor2& w = decoders[decoder_index(L, s, t)];
                for (std::size_t c = 0; c < d; ++c) acc += static_cast<double>(w(c, f)) * w(c, f);
            }
            out[s][f] = static_cast<float>(std::sqrt(acc));
        }
    return out;
}

std::vector<std::vector<float>> decoder_norms(const CltModel& clt) {
    if (clt.adapter && clt.adapter->rank > 0) return decoder_norms(clt, effective_decoders(clt));
    return decoder_norms(clt, clt.w_dec);
}

void attach_adapter(CltModel& clt, std::size_t rank, Rng& rng, float a_std) {
    if (clt.adapter) throw StateError("an adapter is already attached");
    LowRankAdapter ad;
    ad.rank = rank;
    for (std::size_t i = 0; i < clt.w_dec.size(); ++i) {
        Tensor2 a(clt.shape.d_model, rank);
        fill_normal(a, rng, a_std);
        ad.a.push_back(std::move(a));
        ad.b.emplace_back(clt.shape.d_features(), rank);
    }
    clt.adapter = std::move(ad);
}

void merge_adapter(CltModel& clt) {
    if (!clt.adapter) return;
    if (clt.adapter->rank > 0) clt.w_dec = effective_decoders(clt);
    clt.adapter.reset();
}

Bytes serialize_clt(const CltModel& clt) {
    const std::size_t L = clt.shape.num_layers;
    ByteWriter w;
    w.tag(kCltMagic);
    w.u32(kCltVersion);
    w.u32(static_cast<std::uint32_t>(L));
    w.u32(static_cast<std::uint32_t>(clt.shape.d_model));
    w.u32(static_cast<std::uint32_t>(clt.shape.expansion_factor));
    w.f32(clt.bandwidth);
    w.f32_array(clt.input_norm);
    w.f32_array(clt.output_norm);
    for (std::size_t l = 0; l < L; ++l) {
        w.f32_array(clt.log_threshold[l]);
        w.f32_array(clt.w_enc[l].data());
        w.f32_array(clt.b_enc[l]);
    }
    for (const auto& m : clt.w_dec) w.f32_array(m.data());
    for (const auto& b : clt.b_dec) w.f32_array(b);
    w.u8(clt.adapter ? 1 : 0);
    if (clt.adapter) {
        w.u32(static_cast<std::uint32_t>(clt.adapter->rank));
        for (std::size_t i = 0; i < clt.w_dec.size(); ++i) {
            w.f32_array(clt.adapter->a[i].data());
            w.f32_array(clt.adapter->b[i].data());
        }
    }
    return w.take();
}

CltModel deserialize_clt(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "CLT checkpoint");
    r.expect_tag(kCltMagic);
    const std::uint32_t version = r.u32();
    if (version != kCltVersion) throw IntegrityError("CLT checkpoint: unsupported version " + std::to_string(version));
    CltShape shape;
    shape.num_layers = r.u32();
    shape.d_model = r.u32();
    shape.expansion_factor = r.u32();
    shape.validate();
    CltInit init;
    init.bandwidth = r.f32();
    CltModel m = CltModel::zeros(shape, init);
    const std::size_t L = shape.num_layers, d = shape.d_model, F = shape.d_features();
    m.input_norm = r.f32_array(L);
    m.output_norm = r.f32_array(L);
    for (std::size_t l = 0; l < L; ++l) {
        m.log_threshold[l] = r.f32_array(F);
        m.w_enc[l] = Tensor2(F, d, r.f32_array(F * d));
        m.b_enc[l] = r.f32_array(F);
    }
    for (auto& w : m.w_dec) w = Tensor2(d, F, r.f32_array(d * F));
    for (auto& b : m.b_dec) b = r.f32_array(d);
    if (r.u8()) {
        LowRankAdapter ad;
        ad.rank = r.u32();
        for (std::size_t i = 0; i < m.w_dec.size(); ++i) {
            ad.a.emplace_back(d, ad.rank, r.f32_array(d * ad.rank));
            ad.b.emplace_back(F, ad.rank, r.f32_array(F * ad.rank));
        }
        m.adapter = std::move(ad);
    }
    if (r.remaining() != 0) throw IntegrityError("CLT checkpoint: trailing bytes");
    return m;
}

void save_clt(const CltModel& clt, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_clt(clt));
}

CltModel load_clt(const std::filesystem::path& path) { return deserialize_clt(read_file(path)); }

}  // namespace cltforge
