#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "mudman/common.hpp"

namespace mudman {

inline double mean_of(const std::vector<double>& x) {
  MUDMAN_REQUIRE(!x.empty(), "mean of empty sample");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

inline double standard_error_of(const std::vector<double>& x) {
  if (x.size() < 2) return 0.0;
  const double m = mean_of(x);
  double v = 0.0;
  for (double a : x) v += (a - m) * (a - m);
  v /= static_cast<double>(x.size() - 1);
  return std::sqrt(v / static_cast<double>(x.size()));
}

struct MannWhitney {
  double u = 0.0;        // U statistic of the first sample
  double p_greater = 1.0;  // one-sided p for "first sample tends to be larger"
  bool exact = false;
};

/// One-sided Mann-Whitney U test of x > y. Exact null distribution when there
/// are no ties and both samples have at most 25 elements; otherwise the
/// tie-corrected normal approximation with continuity correction.
inline MannWhitney mann_whitney_greater(const std::vector<double>& x, const std::vector<double>& y) {
  MUDMAN_REQUIRE(!x.empty() && !y.empty(), "Mann-Whitney needs two nonempty samples");
  const std::size_t n1 = x.size(), n2 = y.size(), n = n1 + n2;
  std::vector<std::pair<double, int>> all;
  for (double v : x) all.emplace_back(v, 0);
  for (double v : y) all.emplace_back(v, 1);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<double> rank(n);
  double tie_term = 0.0;
  bool ties = false;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && all[j + 1].first == all[i].first) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[k] = r;
    const double t = static_cast<double>(j - i + 1);
    if (t > 1) ties = true;
    tie_term += t * t * t - t;
    i = j + 1;
  }
  double r1 = 0.0;
  for (std::size_t k = 0; k < n; ++k)
    if (all[k].second == 0) r1 += rank[k];
  MannWhitney res;
  res.u = r1 - static_cast<double>(n1 * (n1 + 1)) / 2.0;

  if (!ties && n1 <= 25 && n2 <= 25) {
    // f[a][b][u]: orderings of a x-items and b y-items with U = u, by whether
    // the largest item belongs to x.
    std::vector<std::vector<std::vector<double>>> f(n1 + 1, std::vector<std::vector<double>>(n2 + 1));
    for (std::size_t a = 0; a <= n1; ++a)
      for (std::size_t b = 0; b <= n2; ++b) {
        auto& cur = f[a][b];
        cur.assign(a * b + 1, 0.0);
        if (a == 0 || b == 0) {
          cur[0] = 1.0;
          continue;
        }
        // Largest is x: contributes b to U. Largest is y: contributes 0.
        const auto& fx = f[a - 1][b];
        const auto& fy = f[a][b - 1];
        for (std::size_t u = 0; u < fx.size(); ++u) cur[u + b] += fx[u];
        for (std::size_t u = 0; u < fy.size(); ++u) cur[u] += fy[u];
      }
    const auto& dist = f[n1][n2];
    double total = 0.0, tail = 0.0;
    for (std::size_t u = 0; u < dist.size(); ++u) {
      total += dist[u];
      if (static_cast<double>(u) >= res.u - 1e-9) tail += dist[u];
    }
    res.p_greater = tail / total;
    res.exact = true;
    return res;
  }
  const double mu = static_cast<double>(n1 * n2) / 2.0;
  const double nn = static_cast<double>(n);
  const double var = static_cast<double>(n1 * n2) / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
  if (var <= 0.0) {
    res.p_greater = res.u > mu ? 0.0 : 1.0;
    return res;
  }
  const double z = (res.u - mu - 0.5) / std::sqrt(var);
  res.p_greater = 0.5 * std::erfc(z / std::sqrt(2.0));
  return res;
}

}  // namespace mudman
