#include "afl/multi_index.hpp"

#include <array>
#include <cmath>

namespace afl {

namespace {

constexpr int kBinomCap = 128;

const std::array<std::array<double, kBinomCap>, kBinomCap>& binom_table() {
  static const auto table = [] {
    std::array<std::array<double, kBinomCap>, kBinomCap> t{};
    for (int n = 0; n < kBinomCap; ++n) {
      t[n][0] = 1.0;
      for (int k = 1; k <= n; ++k) {
        t[n][k] = t[n - 1][k - 1] + (k < n ? t[n - 1][k] : 0.0);
      }
    }
    return t;
  }();
  return table;
}

}  // namespace

double binom(int n, int k) {
  if (k < 0 || k > n || n < 0) return 0.0;
  if (n < kBinomCap) return binom_table()[n][k];
  double r = 0.0;
  for (int i = 0; i < k; ++i) {
    r += std::log(static_cast<double>(n - i)) -
         std::log(static_cast<double>(i + 1));
  }
  return std::exp(r);
}

double log_factorial(int n) {
  static const auto table = [] {
    std::array<double, 256> t{};
    t[0] = 0.0;
    for (int i = 1; i < 256; ++i) t[i] = t[i - 1] + std::log(double(i));
    return t;
  }();
  if (n < 0) throw DomainError("log_factorial: negative argument");
  if (n < 256) return table[n];
  return std::lgamma(static_cast<double>(n) + 1.0);
}

std::uint64_t shell_size(int dim, int deg) {
  if (dim <= 0) return deg == 0 ? 1 : 0;
  return static_cast<std::uint64_t>(std::llround(binom(dim + deg - 1, deg)));
}

std::uint64_t ball_size(int dim, int cap) {
  return static_cast<std::uint64_t>(std::llround(binom(dim + cap, cap)));
}

void for_each_of_degree(int dim, int deg,
                        const std::function<void(const MultiIndex&)>& fn) {
  MultiIndex m(dim, 0);
  // Descend position by position; the last coordinate absorbs the remainder.
  std::function<void(int, int)> rec = [&](int pos, int rem) {
    if (pos == dim - 1) {
      m[pos] = rem;
      fn(m);
      return;
    }
    for (int v = 0; v <= rem; ++v) {
      m[pos] = v;
      rec(pos + 1, rem - v);
    }
  };
  if (dim == 0) {
    if (deg == 0) fn(m);
    return;
  }
  rec(0, deg);
}

std::uint64_t shell_rank(const MultiIndex& m) {
  const int dim = static_cast<int>(m.size());
  int rem = degree(m);
  std::uint64_t rank = 0;
  for (int pos = 0; pos < dim - 1; ++pos) {
    for (int v = 0; v < m[pos]; ++v) {
      rank += shell_size(dim - pos - 1, rem - v);
    }
    rem -= m[pos];
  }
  return rank;
}

}  // namespace afl
