#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "afl/errors.hpp"

namespace afl {

// Exponent vector of a tensorized Hermite polynomial. Length is the ambient
// dimension of the series that keys it.
using MultiIndex = std::vector<int>;

inline int degree(const MultiIndex& m) {
  int s = 0;
  for (int v : m) s += v;
  return s;
}

struct MultiIndexHash {
  std::size_t operator()(const MultiIndex& m) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (int v : m) {
      h ^= static_cast<std::uint64_t>(v) + 0x9e3779b9ULL + (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
  }
};

// Number of multi-indices in N^dim of the given degree: C(dim+deg-1, deg).
std::uint64_t shell_size(int dim, int deg);

// Number of multi-indices in N^dim with degree <= cap: C(dim+cap, cap).
std::uint64_t ball_size(int dim, int cap);

// Visits every m in N^dim with |m| = deg, in lexicographic order.
void for_each_of_degree(int dim, int deg,
                        const std::function<void(const MultiIndex&)>& fn);

// Inlined variant for hot loops; same order as for_each_of_degree.
template <class F>
void for_each_of_degree_fast(int dim, int deg, F&& fn) {
  if (dim <= 0) {
    MultiIndex empty;
    if (deg == 0) fn(static_cast<const MultiIndex&>(empty));
    return;
  }
  MultiIndex m(dim, 0);
  m[dim - 1] = deg;
  for (;;) {
    fn(static_cast<const MultiIndex&>(m));
    // Next composition in lexicographic order: move one unit from the tail
    // block to the previous position.
    int i = dim - 1;
    while (i >= 0 && m[i] == 0) --i;
    if (i <= 0) return;
    const int tail = m[i];
    m[i] = 0;
    m[i - 1] += 1;
    m[dim - 1] = tail - 1;
  }
}

// Lexicographic rank of m within its degree shell; inverse of the order
// produced by for_each_of_degree. O(dim) with a cached binomial table.
std::uint64_t shell_rank(const MultiIndex& m);

// Binomial coefficient as double (exact for the small arguments used here).
double binom(int n, int k);

// log(n!)
double log_factorial(int n);

}  // namespace afl
