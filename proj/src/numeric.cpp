// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/numeric.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "cltforge/error.hpp"

namespace cltforge {

namespace {

std::string shape_str(const Tensor2& t) {
    return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

std::uint64_t splitmix64(std::uint64_t& x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
}

}  // namespace

Tensor2::Tensor2(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor2::Tensor2(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Tensor2 Tensor2::identity(std::size_t n) {
    Tensor2 t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
    return t;
}

Tensor2 Tensor2::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged rows in from_rows");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor2(r, c, std::move(data));
}

void Tensor2::fill(float value) {
    for (float& v : data_) v = value;
}

Tensor2 Tensor2::transposed() const {
    Tensor2 t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul " + shape_str(a) + " * " + shape_str(b));
    }
    // Transposing b keeps the k loop contiguous without changing the
    // accumulation order.
    const Tensor2 bt = b.transposed();
    Tensor2 c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto ar = a.row(i);
        for (std::size_t j = 0; j < b.cols(); ++j) {
            const auto br = bt.row(j);
            float acc = 0.0f;
            for (std::size_t k = 0; k < ar.size(); ++k) acc += ar[k] * br[k];
            c(i, j) = acc;
        }
    }
    return c;
}

Tensor2 affine(const Tensor2& x, const Tensor2& w, std::span<const float> b) {
    if (x.cols() != w.cols() || b.size() != w.rows()) {
        throw ShapeError("affine x=" + shape_str(x) + " w=" + shape_str(w) +
                         " b=" + std::to_string(b.size()));
    }
    Tensor2 y(x.rows(), w.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto xr = x.row(i);
        for (std::size_t j = 0; j < w.rows(); ++j) {
            const auto wr = w.row(j);
            float acc = 0.0f;
            for (std::size_t k = 0; k < xr.size(); ++k) acc += xr[k] * wr[k];
            y(i, j) = acc + b[j];
        }
    }
    return y;
}

Tensor2 add(const Tensor2& a, const Tensor2& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("add " + shape_str(a) + " + " + shape_str(b));
    }
    Tensor2 c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] + b.data()[i];
    return c;
}

bool all_finite(std::span<const float> values) noexcept {
    for (float v : values)
        if (!std::isfinite(v)) return false;
    return true;
}

float dot(std::span<const float> a, std::span<const float> b) noexcept {
    float acc = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double dot_f64(std::span<const float> a, std::span<const float> b) noexcept {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

Tensor2 finite_diff_jacobian(const VectorMap& f, std::span<const float> x0, float eps) {
    std::vector<float> x(x0.begin(), x0.end());
    Tensor2 jac;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float orig = x[i];
        x[i] = orig + eps;
        const std::vector<float> hi = f(x);
        x[i] = orig - eps;
        const std::vector<float> lo = f(x);
        x[i] = orig;
        if (i == 0) jac = Tensor2(hi.size(), x.size());
        if (hi.size() != jac.rows() || lo.size() != jac.rows()) {
            throw ShapeError("finite_diff_jacobian: map output length changed");
        }
        for (std::size_t r = 0; r < hi.size(); ++r) jac(r, i) = (hi[r] - lo[r]) / (2.0f * eps);
    }
    return jac;
}

Rng::Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& s : s_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() noexcept {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

float Rng::uniform(float lo, float hi) noexcept {
    return lo + static_cast<float>(uniform()) * (hi - lo);
}

std::uint64_t Rng::below(std::uint64_t n) noexcept {
    // Rejection sampling on the top bits; unbiased for every n.
    const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
    std::uint64_t v;
    do {
        v = next_u64();
    } while (v >= limit);
    return v % n;
}

double Rng::normal() noexcept {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

Rng Rng::fork(std::uint64_t stream) const noexcept {
    std::uint64_t x = seed_ ^ (0xD1B54A32D192ED03ull * (stream + 1));
    return Rng(splitmix64(x));
}

void fill_normal(Tensor2& t, Rng& rng, float std) {
    for (float& v : t.data()) v = static_cast<float>(rng.normal()) * std;
}

}  // namespace cltforge
