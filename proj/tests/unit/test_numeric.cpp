// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "cltforge/error.hpp"
#include "cltforge/numeric.hpp"

using namespace cltforge;

namespace {

Tensor2 random_tensor(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    Tensor2 t(r, c);
    fill_normal(t, rng, 1.0f);
    return t;
}

}  // namespace

TEST(Matmul, IdentityAndDot) {
    const Tensor2 i = Tensor2::identity(2);
    const Tensor2 b = Tensor2::from_rows({{3, 4}, {5, 6}});
    EXPECT_EQ(matmul(i, b), b);
    const Tensor2 r = matmul(Tensor2::from_rows({{1, 2}}), Tensor2::from_rows({{3}, {4}}));
    ASSERT_EQ(r.rows(), 1u);
    EXPECT_EQ(r(0, 0), 11.0f);
}

TEST(Matmul, MatchesNaiveTripleLoop) {
    const Tensor2 a = random_tensor(5, 7, 1), b = random_tensor(7, 3, 2);
    const Tensor2 c = matmul(a, b);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            float acc = 0.0f;
            for (std::size_t k = 0; k < 7; ++k) acc += a(i, k) * b(k, j);
            EXPECT_EQ(c(i, j), acc);
        }
}

TEST(Matmul, ShapeMismatchThrows) {
    EXPECT_THROW(matmul(Tensor2(2, 3), Tensor2(2, 3)), ShapeError);
    EXPECT_THROW(Tensor2(2, 2, std::vector<float>(3)), ShapeError);
}

TEST(Matmul, IdentityLeftIsBitwise) {
    const Tensor2 x = random_tensor(6, 9, 3);
    EXPECT_EQ(matmul(Tensor2::identity(6), x), x);
}

TEST(Affine, ZeroInputBroadcastsBias) {
    const Tensor2 w = random_tensor(3, 4, 4);
    const std::vector<float> b{1.0f, -2.0f, 0.5f};
    const Tensor2 y = affine(Tensor2(2, 4), w, b);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y(i, j), b[j]);
}

TEST(Affine, IdentityWeight) {
    const Tensor2 x = random_tensor(3, 5, 5);
    EXPECT_EQ(affine(x, Tensor2::identity(5), std::vector<float>(5, 0.0f)), x);
}

TEST(Affine, MatchesMatmulPlusBias) {
    const Tensor2 x = random_tensor(4, 6, 6), w = random_tensor(3, 6, 7);
    const std::vector<float> b{0.1f, 0.2f, -0.3f};
    const Tensor2 y = affine(x, w, b);
    const Tensor2 p = matmul(x, w.transposed());
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y(i, j), p(i, j) + b[j]);
    EXPECT_THROW(affine(x, Tensor2(3, 5), b), ShapeError);
    EXPECT_THROW(affine(x, w, std::vector<float>(2)), ShapeError);
}

TEST(FiniteDiff, IdentityMap) {
    const VectorMap f = [](std::span<const float> x) { return std::vector<float>(x.begin(), x.end()); };
    const std::vector<float> x0{0.3f, -1.0f, 2.0f};
    const Tensor2 j = finite_diff_jacobian(f, x0, 1e-2f);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(j(r, c), r == c ? 1.0f : 0.0f, 1e-6f);
}

TEST(FiniteDiff, LinearMapWithinTenEpsSquared) {
    const Tensor2 a = random_tensor(4, 3, 8);
    const VectorMap f = [&](std::span<const float> x) {
        std::vector<float> y(4, 0.0f);
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 3; ++c) y[r] += a(r, c) * x[c];
        return y;
    };
    const float eps = 0.05f;
    const Tensor2 j = finite_diff_jacobian(f, std::vector<float>{0.5f, 0.25f, -0.75f}, eps);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_NEAR(j(r, c), a(r, c), 1e-4f);
            EXPECT_LE(std::fabs(j(r, c) - a(r, c)), 10.0f * eps * eps);
        }
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 1000; ++i) {
        const auto x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        differs |= x != c.next_u64();
    }
    EXPECT_TRUE(differs);
}

TEST(Rng, KnownFirstOutputs) {
    // splitmix64(0) seeding followed by xoshiro256**, computed independently.
    auto splitmix = [](std::uint64_t& s) {
        std::uint64_t z = (s += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    };
    auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    std::uint64_t seed = 7, st[4];
    for (auto& v : st) v = splitmix(seed);
    Rng rng(7);
    for (int i = 0; i < 16; ++i) {
        const std::uint64_t expect = rotl(st[1] * 5, 7) * 9;
        const std::uint64_t t = st[1] << 17;
        st[2] ^= st[0];
        st[3] ^= st[1];
        st[1] ^= st[2];
        st[0] ^= st[3];
        st[2] ^= t;
        st[3] = rotl(st[3], 45);
        EXPECT_EQ(rng.next_u64(), expect);
    }
}

TEST(Rng, UniformAndBelowRanges) {
    Rng rng(9);
    double mean = 0;
    for (int i = 0; i < 20000; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        mean += u;
        ASSERT_LT(rng.below(7), 7u);
    }
    EXPECT_NEAR(mean / 20000, 0.5, 0.01);
}

TEST(Rng, NormalMoments) {
    Rng rng(11);
    double s = 0, s2 = 0;
    const int n = 50000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.02);
    EXPECT_NEAR(s2 / n, 1.0, 0.03);
}

TEST(Determinism, RepeatedOperationsAreBitwise) {
    for (int rep = 0; rep < 2; ++rep) {
        const Tensor2 a = random_tensor(8, 8, 100), b = random_tensor(8, 8, 101);
        static Tensor2 first;
        const Tensor2 c = matmul(a, b);
        if (rep == 0) first = c;
        else EXPECT_EQ(first, c);
        EXPECT_TRUE(all_finite(c.data()));
    }
}
