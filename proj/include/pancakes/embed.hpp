// SPDX-License-Identifier: Apache-2.0
#pragma once

// Sinusoidal protocol / label codes. For an integer t with period T and
// half-width J, entry 2j holds sin(z + pi/2) and entry 2j+1 holds sin(z - pi/2)
// with z = (t pi / T) * 2^(2 (2j) pi / J), j = 0..J-1. The pi in the exponent is
// intentional.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "pancakes/core/errors.hpp"

namespace pancakes {

using EmbeddingVector = std::vector<double>;

/// Frequency multiplier of the j-th sinusoid pair.
inline double embedding_frequency(int j, int half_width) {
    const int index = 2 * j;  // the pair at entries (2j, 2j+1) reads z_{t,2j}
    return std::exp2(2.0 * index * std::numbers::pi / half_width);
}

inline EmbeddingVector scalar_embedding(int t, int period, int half_width) {
    if (t < 0) throw DomainError("embedding index t must be >= 0");
    if (period < 1) throw DomainError("embedding period T must be >= 1");
    if (half_width < 1) throw DomainError("embedding half-width J must be >= 1");
    EmbeddingVector u(2 * static_cast<std::size_t>(half_width));
    const double base = t * std::numbers::pi / period;
    for (int j = 0; j < half_width; ++j) {
        // Reducing z into [-pi, pi] first keeps both phase shifts exact.
        const double z = std::remainder(base * embedding_frequency(j, half_width), 2 * std::numbers::pi);
        u[2 * j] = std::sin(z + std::numbers::pi / 2);
        u[2 * j + 1] = std::sin(z - std::numbers::pi / 2);
    }
    return u;
}

/// v_{m,k} = u_m || u_k with periods M and K. Indices are 1-based.
inline EmbeddingVector pair_embedding(int m, int num_protocols, int k, int num_labels, int half_width) {
    if (m < 1 || m > num_protocols)
        throw DomainError("protocol index " + std::to_string(m) + " outside 1.." + std::to_string(num_protocols));
    if (k < 1 || k > num_labels)
        throw DomainError("label index " + std::to_string(k) + " outside 1.." + std::to_string(num_labels));
    EmbeddingVector v = scalar_embedding(m, num_protocols, half_width);
    const EmbeddingVector uk = scalar_embedding(k, num_labels, half_width);
    v.insert(v.end(), uk.begin(), uk.end());
    return v;
}

}  // namespace pancakes
