// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// A small pre-norm residual transformer used as the model being interpreted.
//
// Per position k, with x the residual stream:
//
//   x      = E[token_k] + P[k]
//   layer: x_mid = x + Wo · Σ_{j≤k} p[k,j] · Wv·LN1(x_j)      (single head)
//          h     = x_mid                                     (MLP input tap)
//          m     = W_out · ReLU(W_in · LN2(h) + b_in) + b_out (MLP output tap)
//          x     = h + m
//   logits = U · LNf(x)
//
// LN(x) = g ⊙ (x − mean(x)) · inv with inv = 1/sqrt(var(x) + eps). The MLP's
// pre-norm belongs to the MLP block, so the MLP input tap is the raw residual
// stream entering it and the pure residual path between taps is the identity.
//
// Freezing records attention probabilities, every LN inverse scale and the
// ReLU masks. With those held fixed the map (all MLP outputs) → (all MLP
// inputs, logits) is exactly linear; the replay and response functions below
// evaluate it.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cltforge/binary_io.hpp"
#include "cltforge/numeric.hpp"

namespace cltforge {

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

struct HostConfig {
    std::size_t num_layers = 2;
    std::size_t d_model = 16;
    std::size_t d_mlp = 64;
    std::size_t vocab = 64;
    std::size_t context = 32;  ///< maximum sequence length (positional table size)
    float ln_eps = 1e-5f;

    friend bool operator==(const HostConfig&, const HostConfig&) = default;
};

struct HostLayer {
    std::vector<float> ln1_gain;
    Tensor2 wq, wk, wv, wo;  // d × d, applied as W·a
    std::vector<float> ln2_gain;
    Tensor2 w_in;  // d_mlp × d
    std::vector<float> b_in;
    Tensor2 w_out;  // d × d_mlp
    std::vector<float> b_out;

    friend bool operator==(const HostLayer&, const HostLayer&) = default;
};

struct HostModel {
    HostConfig config;
    Tensor2 embed;      // vocab × d
    Tensor2 pos_embed;  // context × d
    std::vector<HostLayer> layers;
    std::vector<float> lnf_gain;
    Tensor2 unembed;  // vocab × d

    /// Zero weights, unit gains. Throws InputError when num_layers < 2.
    static HostModel zeros(const HostConfig& config);
    /// Gaussian init (std 0.02 for embeddings, 1/sqrt(fan_in) for projections).
    static HostModel random(const HostConfig& config, Rng& rng);

    /// Visits every parameter array in a fixed order.
    template <typename Fn>
    void for_each_param(Fn&& fn);

    friend bool operator==(const HostModel&, const HostModel&) = default;
};

/// MLP taps of one sequence: one (h, m) row per (layer, position).
struct CapturedActivations {
    TokenSequence tokens;
    std::vector<Tensor2> mlp_in;   // [layer] T × d
    std::vector<Tensor2> mlp_out;  // [layer] T × d
    Tensor2 logits;                // T × vocab
};

/// Constants recorded during a forward pass; see the file comment.
struct FrozenForwardState {
    TokenSequence tokens;
    Tensor2 residual0;                        // T × d, embeddings + positions
    std::vector<std::vector<float>> ln1_inv;  // [layer][pos]
    std::vector<Tensor2> attn_probs;          // [layer] T × T, row = query
    std::vector<std::vector<float>> ln2_inv;  // [layer][pos]
    std::vector<std::vector<std::uint8_t>> mlp_mask;  // [layer][pos * d_mlp + unit]
    std::vector<float> lnf_inv;               // [pos]

    std::size_t seq_len() const noexcept { return tokens.size(); }
};

CapturedActivations forward_with_capture(const HostModel& model, std::span<const TokenId> tokens);

/// Runs a forward pass and records its frozen constants.
FrozenForwardState freeze(const HostModel& model, std::span<const TokenId> tokens,
                          CapturedActivations* capture = nullptr);

/// Output of a frozen replay; mlp_in[layer] and logits are T×d / T×vocab, row-major.
template <typename T>
struct FrozenOutputs {
    std::vector<std::vector<T>> mlp_in;
    std::vector<T> logits;
};

/// Frozen replay with every MLP output supplied (mlp_outputs[layer] is T×d,
/// row-major). MLPs are not evaluated. Replaying the captured outputs in
/// float reproduces the original logits bit for bit.
template <typename T>
FrozenOutputs<T> frozen_replay(const HostModel& model, const FrozenForwardState& state,
                               const std::vector<std::vector<T>>& mlp_outputs);

/// Frozen replay in which every MLP is evaluated with its recorded ReLU mask
/// and LN scale, plus an additive offset on its output.
template <typename T>
FrozenOutputs<T> frozen_replay_through_mlps(const HostModel& model, const FrozenForwardState& state,
                                            const std::vector<std::vector<T>>& mlp_offsets);

/// Which downstream terms a linear response propagates through.
enum class JacobianPath {
    direct,        ///< MLP outputs are independent inputs: residual + frozen attention only
    through_mlps,  ///< also through downstream MLPs with frozen masks
};

inline constexpr int kEmbeddingLayer = -1;

/// An additive perturbation of the MLP output at (layer, pos), or of the
/// residual stream entering layer 0 when layer == kEmbeddingLayer.
struct Injection {
    int layer;
    std::size_t pos;
    std::vector<double> vec;  // length d
};

struct FrozenResponse {
    std::vector<std::vector<double>> mlp_in;  // [layer] T × d
    std::vector<double> logits;               // T × vocab
};

/// Exact linear response of the frozen map to a set of injections, composed
/// from the recorded constants (no differencing).
FrozenResponse frozen_response(const HostModel& model, const FrozenForwardState& state,
                               std::span<const Injection> injections,
                               JacobianPath path = JacobianPath::direct);

struct TapSite {
    std::size_t layer;
    std::size_t pos;
};

/// d × d Jacobian of MLP input at dst w.r.t. MLP output at src (rows index
/// dst components). Requires src.layer < dst.layer and src.pos <= dst.pos,
/// otherwise OrderingError.
Tensor2 frozen_jacobian(const HostModel& model, const FrozenForwardState& state, TapSite src,
                        TapSite dst, JacobianPath path = JacobianPath::direct);

/// Gradient of logit `logit_index` at `logit_pos` (default: last position)
/// w.r.t. the MLP output at src.
std::vector<float> jacobian_to_logit(const HostModel& model, const FrozenForwardState& state,
                                     TapSite src, std::size_t logit_index,
                                     std::size_t logit_pos = static_cast<std::size_t>(-1),
                                     JacobianPath path = JacobianPath::direct);

// --- training --------------------------------------------------------------

struct HostTrainConfig {
    std::size_t steps = 500;
    std::size_t batch_sequences = 16;
    float lr = 3e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    std::uint64_t seed = 0;
};

struct HostTrainResult {
    HostModel model;
    std::vector<float> loss_history;  // mean next-token cross-entropy per step
};

/// Mean next-token cross-entropy (nats) over every position except the last.
float next_token_loss(const HostModel& model, std::span<const TokenSequence> batch);

/// Loss and gradient; gradient has the same layout as the model.
float next_token_loss_and_grad(const HostModel& model, std::span<const TokenSequence> batch,
                               HostModel& grad);

/// Adam on next-token cross-entropy, mini-batches drawn with the config seed.
HostTrainResult train_host_model(HostModel model, std::span<const TokenSequence> corpus,
                                 const HostTrainConfig& config);

// --- checkpoint ------------------------------------------------------------

/// Little-endian: magic "CLTF-HM", u32 version, config, then every tensor
/// in for_each_param order as raw fp32.
Bytes serialize_host_model(const HostModel& model);
HostModel deserialize_host_model(std::span<const std::uint8_t> bytes);
void save_host_model(const HostModel& model, const std::filesystem::path& path);
HostModel load_host_model(const std::filesystem::path& path);

template <typename Fn>
void HostModel::for_each_param(Fn&& fn) {
    fn(embed.data());
    fn(std::span<float>(pos_embed.data()));
    for (auto& l : layers) {
        fn(std::span<float>(l.ln1_gain));
        fn(l.wq.data());
        fn(l.wk.data());
        fn(l.wv.data());
        fn(l.wo.data());
        fn(std::span<float>(l.ln2_gain));
        fn(l.w_in.data());
        fn(std::span<float>(l.b_in));
        fn(l.w_out.data());
        fn(std::span<float>(l.b_out));
    }
    fn(std::span<float>(lnf_gain));
    fn(unembed.data());
}

}  // namespace cltforge
