#pragma once
// Reference implementations written with plain loops, sharing no code with
// the library. Tests compare the library against these.

#include "viral_lab/rng.hpp"
#include "viral_lab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace oracle {

using viral::Tensor;

inline Tensor random_tensor(viral::Shape shape, std::uint64_t seed, double scale = 1.0) {
  viral::Rng rng(seed, "test-tensor");
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  return c;
}

inline Tensor softmax_rows(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    long double m = x(i, 0);
    for (std::size_t j = 1; j < x.cols(); ++j) m = std::max<long double>(m, x(i, j));
    long double s = 0;
    for (std::size_t j = 0; j < x.cols(); ++j) s += std::exp(static_cast<long double>(x(i, j)) - m);
    for (std::size_t j = 0; j < x.cols(); ++j)
      y(i, j) = static_cast<double>(std::exp(static_cast<long double>(x(i, j)) - m) / s);
  }
  return y;
}

/// Mean over unmasked rows of log-sum-exp(row) - row[target].
inline double lm_loss(const Tensor& logits, std::span<const std::size_t> targets, std::span<const double> mask) {
  long double total = 0, weight = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (mask[i] == 0.0) continue;
    long double m = logits(i, 0);
    for (std::size_t j = 1; j < logits.cols(); ++j) m = std::max<long double>(m, logits(i, j));
    long double s = 0;
    for (std::size_t j = 0; j < logits.cols(); ++j) s += std::exp(static_cast<long double>(logits(i, j)) - m);
    total += m + std::log(s) - logits(i, targets[i]);
    weight += 1;
  }
  return static_cast<double>(total / weight);
}

inline double row_cosine(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  long double ab = 0, aa = 0, bb = 0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    ab += static_cast<long double>(a(i, c)) * b(j, c);
    aa += static_cast<long double>(a(i, c)) * a(i, c);
    bb += static_cast<long double>(b(j, c)) * b(j, c);
  }
  return static_cast<double>(ab / std::sqrt(aa * bb));
}

/// -(1/n) sum_i cos(p_i, y_i)
inline double cosine_alignment(const Tensor& p, const Tensor& y) {
  long double s = 0;
  for (std::size_t i = 0; i < p.rows(); ++i) s += row_cosine(p, i, y, i);
  return static_cast<double>(-s / p.rows());
}

/// Double loop over pairs inside each group of rows.
inline double relation_alignment(const Tensor& p, const Tensor& y, std::size_t group) {
  long double total = 0;
  const std::size_t groups = p.rows() / group;
  for (std::size_t g = 0; g < groups; ++g) {
    long double s = 0;
    for (std::size_t i = 0; i < group; ++i)
      for (std::size_t j = 0; j < group; ++j) {
        const std::size_t a = g * group + i, b = g * group + j;
        const long double d = row_cosine(p, a, p, b) - row_cosine(y, a, y, b);
        s += d * d;
      }
    total += s / (group * group);
  }
  return static_cast<double>(total / groups);
}

/// Mutual-kNN CKA from the definition, O(n^2 log n) with full sorts.
inline double cknna(const Tensor& phi, const Tensor& psi, std::size_t k) {
  const std::size_t n = phi.rows();
  auto gram = [n](const Tensor& x) {
    std::vector<long double> mean(x.cols(), 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < x.cols(); ++c) mean[c] += x(i, c);
    for (auto& m : mean) m /= n;
    std::vector<std::vector<double>> g(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        long double s = 0;
        for (std::size_t c = 0; c < x.cols(); ++c) s += (x(i, c) - mean[c]) * (x(j, c) - mean[c]);
        g[i][j] = static_cast<double>(s);
      }
    return g;
  };
  auto neighbours = [n, k](const std::vector<std::vector<double>>& g) {
    std::vector<std::vector<bool>> nb(n, std::vector<bool>(n, false));
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::size_t> idx;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) idx.push_back(j);
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return g[i][a] > g[i][b]; });
      for (std::size_t r = 0; r < k; ++r) nb[i][idx[r]] = true;
    }
    return nb;
  };
  const auto K = gram(phi), L = gram(psi);
  const auto nk = neighbours(K), nl = neighbours(L);
  long double kl = 0, kk = 0, ll = 0;
  std::size_t mutual = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (nk[i][j] && nl[i][j]) kl += static_cast<long double>(K[i][j]) * L[i][j], ++mutual;
      if (nk[i][j]) kk += static_cast<long double>(K[i][j]) * K[i][j];
      if (nl[i][j]) ll += static_cast<long double>(L[i][j]) * L[i][j];
    }
  if (mutual == 0) return std::numeric_limits<double>::quiet_NaN();  // the metric is undefined
  return static_cast<double>(kl / std::sqrt(kk * ll));
}

/// Max over entries of |a - b| / max(floor, |b|).
inline double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(floor, std::abs(b[i])));
  return worst;
}

}  // namespace oracle
