// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Cross-layer transcoder. Layer ℓ encodes its MLP input h_ℓ into features
//
//   z_ℓ = JumpReLU_θ(W_enc^ℓ h_ℓ + b_enc^ℓ),   JumpReLU_θ(x) = x · H(x − θ)
//
// and the MLP output of layer ℓ' is reconstructed from every layer at or
// below it:
//
//   m̂_ℓ' = Σ_{ℓ≤ℓ'} W_dec^{ℓ→ℓ'} z_ℓ + b_dec^ℓ'
//
// Thresholds are learned per feature as τ with θ = exp(τ). Layers are
// 0-based throughout. Every batched routine takes a FeatureRange so that a
// feature-sharded worker runs the same code on its slice.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "cltforge/binary_io.hpp"
#include "cltforge/numeric.hpp"

namespace cltforge {

struct CltShape {
    std::size_t num_layers = 2;
    std::size_t d_model = 16;
    std::size_t expansion_factor = 8;

    std::size_t d_features() const noexcept { return expansion_factor * d_model; }
    /// L(L+1)/2 ordered pairs ℓ ≤ ℓ'.
    std::size_t num_decoders() const noexcept { return num_layers * (num_layers + 1) / 2; }
    void validate() const;

    friend bool operator==(const CltShape&, const CltShape&) = default;
};

/// Index of W_dec^{src→dst} in the decoder bank; requires src ≤ dst.
std::size_t decoder_index(std::size_t num_layers, std::size_t src, std::size_t dst);

/// (L(L−1)/2 + L)·e·d² decoder weights, plus L·e·d² encoder weights when
/// include_encoders is set.
std::uint64_t param_count(const CltShape& shape, bool include_encoders);

struct FeatureRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const noexcept { return end - begin; }
    bool operator==(const FeatureRange&) const = default;
};

struct LowRankAdapter {
    std::size_t rank = 0;
    std::vector<Tensor2> a;  // [decoder] d × r
    std::vector<Tensor2> b;  // [decoder] F × r

    bool operator==(const LowRankAdapter&) const = default;
};

struct CltInit {
    float threshold = 0.03f;
    float bandwidth = 1.0f;
    /// Norm of each decoder column at init.
    float decoder_norm = 0.1f;
};

struct CltModel {
    CltShape shape;
    float bandwidth = 1.0f;                // ε of the threshold pseudo-gradient
    std::vector<Tensor2> w_enc;            // [layer] F × d
    std::vector<std::vector<float>> b_enc; // [layer] F
    std::vector<std::vector<float>> log_threshold;  // [layer] F, τ
    std::vector<Tensor2> w_dec;            // [decoder_index] d × F
    std::vector<std::vector<float>> b_dec; // [layer] d
    std::optional<LowRankAdapter> adapter;
    /// Activation normalization divisors of the cache the model was trained on.
    std::vector<float> input_norm;   // [layer]
    std::vector<float> output_norm;  // [layer]

    /// All-zero weights, τ = log(threshold). Used as the gradient container too.
    static CltModel zeros(const CltShape& shape, const CltInit& init = {});
    /// Encoder rows uniform on the sphere with norm θ·sqrt(d), so pre-activations
    /// of unit-norm inputs have std ≈ θ; decoder columns random with norm
    /// init.decoder_norm; biases zero.
    static CltModel random(const CltShape& shape, Rng& rng, const CltInit& init = {});

    const Tensor2& decoder(std::size_t src, std::size_t dst) const;
    Tensor2& decoder(std::size_t src, std::size_t dst);
    /// W_dec + A·Bᵀ when an adapter is attached, otherwise W_dec.
    Tensor2 effective_decoder(std::size_t src, std::size_t dst) const;
    std::vector<float> thresholds(std::size_t layer) const;
    FeatureRange all_features() const noexcept { return {0, shape.d_features()}; }

    /// Visits every trainable array in a fixed order (adapter excluded).
    template <typename Fn>
    void for_each_param(Fn&& fn);

    friend bool operator==(const CltModel&, const CltModel&) = default;
};

/// n × |r| pre-activations W_enc h + b_enc for the features in r.
Tensor2 pre_activations(const CltModel& clt, std::size_t layer, const Tensor2& h, FeatureRange r);
/// JumpReLU with thresholds exp(τ[r.begin + j]) for column j.
Tensor2 jump_relu(const CltModel& clt, std::size_t layer, const Tensor2& pre, FeatureRange r);

/// z for every layer: inputs[layer] is n × d, result[layer] is n × F.
std::vector<Tensor2> encode(const CltModel& clt, std::span<const Tensor2> inputs);
/// Single token.
std::vector<float> encode_one(const CltModel& clt, std::size_t layer, std::span<const float> h);

/// n × d partial reconstruction kept as exact fixed-point sums. Every term
/// z·w is exact in double and is truncated onto a 2^-48 grid before it is
/// added, so integer addition makes the total independent of how features
/// are split across workers or in which order partials are combined.
class FixedPartial {
public:
    static constexpr int frac_bits = 48;

    FixedPartial() = default;
    FixedPartial(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), acc_(rows * cols, 0) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    void add_term(std::size_t row, std::size_t col, double value);
    FixedPartial& operator+=(const FixedPartial& other);
    /// Rounded to float; NaN everywhere if a term was non-finite or out of range.
    Tensor2 to_tensor() const;

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<__int128> acc_;
    bool invalid_ = false;
};

/// Σ_{ℓ≤target} z_ℓ[:, r] · W_dec^{ℓ→target}[:, r]ᵀ, without the bias. z[ℓ]
/// holds only the columns of r. decoders[decoder_index] may be supplied to
/// reuse effective (adapter-folded) matrices.
FixedPartial partial_decode_fixed(const CltModel& clt, std::span<const Tensor2> z, std::size_t target,
                                  FeatureRange r, const std::vector<Tensor2>* decoders = nullptr);
Tensor2 partial_decode(const CltModel& clt, std::span<const Tensor2> z, std::size_t target, FeatureRange r,
                       const std::vector<Tensor2>* decoders = nullptr);

/// Cross-layer reconstruction m̂_target (n × d) from full-width z.
Tensor2 decode_cross_layer(const CltModel& clt, std::span<const Tensor2> z, std::size_t target);
/// Same-layer-only reconstruction W_dec^{ℓ→ℓ} z_ℓ + b_dec^ℓ.
Tensor2 decode_standard(const CltModel& clt, std::span<const Tensor2> z, std::size_t layer);

/// Adapter-folded copies of every decoder (or plain copies without an adapter).
std::vector<Tensor2> effective_decoders(const CltModel& clt);

/// [layer][feature] L2 norm of the feature's decoder columns concatenated
/// over every target layer ≥ its source layer.
std::vector<std::vector<float>> decoder_norms(const CltModel& clt);
std::vector<std::vector<float>> decoder_norms(const CltModel& clt, const std::vector<Tensor2>& decoders);

/// A small random, B zero: the adapted model initially equals the base.
/// Throws StateError if an adapter is already attached.
void attach_adapter(CltModel& clt, std::size_t rank, Rng& rng, float a_std = 0.01f);
/// Folds A·Bᵀ into W_dec and removes the adapter; no-op without one.
void merge_adapter(CltModel& clt);

// --- checkpoint ------------------------------------------------------------

Bytes serialize_clt(const CltModel& clt);
CltModel deserialize_clt(std::span<const std::uint8_t> bytes);
void save_clt(const CltModel& clt, const std::filesystem::path& path);
CltModel load_clt(const std::filesystem::path& path);

template <typename Fn>
void CltModel::for_each_param(Fn&& fn) {
    for (std::size_t l = 0; l < shape.num_layers; ++l) {
        fn(w_enc[l].data());
        fn(std::span<float>(b_enc[l]));
        fn(std::span<float>(log_threshold[l]));
    }
    for (auto& w : w_dec) fn(w.data());
    for (auto& b : b_dec) fn(std::span<float>(b));
}

}  // namespace cltforge
