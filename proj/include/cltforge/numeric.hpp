// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense fp32 matrices, a deterministic RNG and finite-difference helpers.
// Every reduction runs in a fixed order (k innermost, ascending) so results
// are bit-reproducible for a given build; nothing here is compiled with
// reassociating float flags.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace cltforge {

class Tensor2 {
public:
    Tensor2() = default;
    Tensor2(std::size_t rows, std::size_t cols, float fill = 0.0f);
    /// Throws ShapeError unless data.size() == rows * cols.
    Tensor2(std::size_t rows, std::size_t cols, std::vector<float> data);

    static Tensor2 identity(std::size_t n);
    static Tensor2 from_rows(std::initializer_list<std::initializer_list<float>> rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    std::vector<float>& storage() noexcept { return data_; }
    const std::vector<float>& storage() const noexcept { return data_; }

    void fill(float value);
    Tensor2 transposed() const;

    friend bool operator==(const Tensor2&, const Tensor2&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

/// C = A·B. Each output is accumulated from 0 with k ascending.
Tensor2 matmul(const Tensor2& a, const Tensor2& b);

/// y[i,j] = (Σ_k x[i,k]·w[j,k]) + b[j]; w is applied transposed, as a
/// (out × in) weight matrix.
Tensor2 affine(const Tensor2& x, const Tensor2& w, std::span<const float> b);

/// Elementwise a + b; shapes must match.
Tensor2 add(const Tensor2& a, const Tensor2& b);

bool all_finite(std::span<const float> values) noexcept;

float dot(std::span<const float> a, std::span<const float> b) noexcept;
double dot_f64(std::span<const float> a, std::span<const float> b) noexcept;

using VectorMap = std::function<std::vector<float>(std::span<const float>)>;

/// Central-difference Jacobian: column i is (f(x0+eps·e_i) − f(x0−eps·e_i))/(2·eps).
/// Rows index outputs, columns index inputs.
Tensor2 finite_diff_jacobian(const VectorMap& f, std::span<const float> x0, float eps);

/// xoshiro256** seeded through splitmix64. The integer stream is identical
/// on every platform for a given seed; floating draws derive from it with
/// fixed-width arithmetic.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t next_u64() noexcept;
    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept;
    float uniform(float lo, float hi) noexcept;
    /// Uniform integer in [0, n); n must be > 0.
    std::uint64_t below(std::uint64_t n) noexcept;
    /// Standard normal (Box-Muller, pairs cached).
    double normal() noexcept;
    /// Independent generator derived from this seed and a stream id.
    Rng fork(std::uint64_t stream) const noexcept;

    template <typename T>
    void shuffle(std::vector<T>& v) noexcept {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::uint64_t s_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Fills a tensor with N(0, std²) draws, row-major order.
void fill_normal(Tensor2& t, Rng& rng, float std);

}  // namespace cltforge
