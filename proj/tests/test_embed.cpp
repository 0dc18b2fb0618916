// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "pancakes/core/rng.hpp"
#include "pancakes/embed.hpp"

using namespace pancakes;

namespace {

// Standalone long-double evaluation of the codes: entry 2j = cos(z), entry
// 2j+1 = -cos(z), z = (t pi / T) 2^(2 (2j) pi / J).
long double oracle_entry(int t, int period, int half_width, int entry) {
    const long double pi = 3.141592653589793238462643383279502884L;
    const int j = entry / 2;
    const long double z = (t * pi / period) * std::pow(2.0L, 2.0L * (2 * j) * pi / half_width);
    const long double c = std::cos(z);
    return entry % 2 == 0 ? c : -c;
}

}  // namespace

TEST(ScalarEmbedding, ZeroIndexAlternates) {
    EXPECT_EQ(scalar_embedding(0, 5, 2), (EmbeddingVector{1, -1, 1, -1}));
}

TEST(ScalarEmbedding, HalfPeriod) {
    const auto u = scalar_embedding(2, 2, 1);
    ASSERT_EQ(u.size(), 2u);
    EXPECT_NEAR(u[0], -1.0, 1e-15);
    EXPECT_NEAR(u[1], 1.0, 1e-15);
}

TEST(ScalarEmbedding, MatchesLongDoubleOracle) {
    const auto u = scalar_embedding(1, 4, 2);
    EXPECT_NEAR(u[0], 0.70710678118654752, 1e-12);
    for (int e = 0; e < 4; ++e) EXPECT_NEAR(u[e], static_cast<double>(oracle_entry(1, 4, 2, e)), 1e-12) << e;
    EXPECT_NEAR(u[2], -0.09392561913072057, 1e-12);  // 40-digit mpmath evaluation

    Rng rng(11);
    for (int i = 0; i < 500; ++i) {
        const int T = static_cast<int>(rng.uniform_int(1, 40));
        const int t = static_cast<int>(rng.uniform_int(0, T));
        const int J = static_cast<int>(rng.uniform_int(1, 12));
        const auto v = scalar_embedding(t, T, J);
        for (int e = 0; e < 2 * J; ++e)
            ASSERT_NEAR(v[e], static_cast<double>(oracle_entry(t, T, J, e)), 5e-12) << t << " " << T << " " << J;
    }
}

TEST(ScalarEmbedding, PairsAreNegatedAndBounded) {
    Rng rng(5);
    for (int i = 0; i < 2000; ++i) {
        const int T = static_cast<int>(rng.uniform_int(1, 64));
        const int t = static_cast<int>(rng.uniform_int(0, T));
        const int J = static_cast<int>(rng.uniform_int(1, 16));
        const auto u = scalar_embedding(t, T, J);
        ASSERT_EQ(u.size(), static_cast<std::size_t>(2 * J));
        for (int j = 0; j < J; ++j) {
            ASSERT_NEAR(u[2 * j + 1], -u[2 * j], 1e-12);
            ASSERT_LE(std::abs(u[2 * j]), 1.0);
        }
    }
}

TEST(ScalarEmbedding, RejectsBadArguments) {
    EXPECT_THROW(scalar_embedding(1, 0, 2), DomainError);
    EXPECT_THROW(scalar_embedding(-1, 3, 2), DomainError);
    EXPECT_THROW(scalar_embedding(1, 3, 0), DomainError);
}

TEST(PairEmbedding, SymmetricWhenIndicesMatch) {
    const auto v = pair_embedding(3, 7, 3, 7, 8);
    ASSERT_EQ(v.size(), 32u);
    for (int i = 0; i < 16; ++i) EXPECT_EQ(v[i], v[16 + i]);
}

TEST(PairEmbedding, ProtocolHalfIgnoresLabel) {
    const auto a = pair_embedding(2, 10, 1, 20, 8);
    const auto b = pair_embedding(2, 10, 17, 20, 8);
    for (int i = 0; i < 16; ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(PairEmbedding, IndexRange) {
    EXPECT_THROW(pair_embedding(0, 4, 1, 4, 2), DomainError);
    EXPECT_THROW(pair_embedding(5, 4, 1, 4, 2), DomainError);
    EXPECT_THROW(pair_embedding(1, 4, 5, 4, 2), DomainError);
}

TEST(PairEmbedding, AllPairsDistinctAtTrainingScale) {
    const int M = 16, K = 40, J = 8;
    std::vector<EmbeddingVector> all;
    for (int m = 1; m <= M; ++m)
        for (int k = 1; k <= K; ++k) all.push_back(pair_embedding(m, M, k, K, J));
    for (std::size_t a = 0; a < all.size(); ++a)
        for (std::size_t b = a + 1; b < all.size(); ++b) {
            double diff = 0.0;
            for (std::size_t i = 0; i < all[a].size(); ++i) diff = std::max(diff, std::abs(all[a][i] - all[b][i]));
            ASSERT_GT(diff, 1e-9) << a << " vs " << b;
        }
}

TEST(PairEmbedding, DistinctOverTrainingRanges) {
    for (int M = 5; M <= 15; ++M)
        for (int K = 5; K <= 40; K += 5) {
            std::vector<EmbeddingVector> all;
            for (int m = 1; m <= M; ++m)
                for (int k = 1; k <= K; ++k) all.push_back(pair_embedding(m, M, k, K, 8));
            for (std::size_t a = 0; a < all.size(); ++a)
                for (std::size_t b = a + 1; b < all.size(); ++b) {
                    double diff = 0.0;
                    for (std::size_t i = 0; i < all[a].size(); ++i)
                        diff = std::max(diff, std::abs(all[a][i] - all[b][i]));
                    ASSERT_GT(diff, 1e-9);
                }
        }
}
