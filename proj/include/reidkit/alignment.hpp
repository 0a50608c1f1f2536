#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "reidkit/tensor.hpp"

namespace reidkit {

/// One image's local features: H stripes of dimension C, row-major.
struct StripeSet {
  int h = 0;
  int c = 0;
  std::vector<double> values;

  StripeSet() = default;
  StripeSet(int h, int c) : h(h), c(c), values(static_cast<std::size_t>(h) * c, 0.0) {
    if (h < 1 || c < 1) throw ConfigError("stripe set needs H >= 1 and C >= 1");
  }
  std::span<const double> stripe(int i) const {
    return std::span<const double>(values).subspan(static_cast<std::size_t>(i) * c, c);
  }
  std::span<double> stripe(int i) {
    return std::span<double>(values).subspan(static_cast<std::size_t>(i) * c, c);
  }
  friend bool operator==(const StripeSet&, const StripeSet&) = default;
};

/// H_a x H_b matrix of stripe distances.
struct LocalDistMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> d;

  LocalDistMatrix() = default;
  LocalDistMatrix(int rows, int cols, double fill = 0.0)
      : rows(rows), cols(cols), d(static_cast<std::size_t>(rows) * cols, fill) {}
  double& operator()(int i, int j) { return d[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return d[static_cast<std::size_t>(i) * cols + j]; }
};

/// `normalized` maps euclidean distance x to (e^x - 1)/(e^x + 1) in [0, 1);
/// `raw` uses x directly.
enum class StripeMetric { normalized, raw };

namespace detail {
inline void normalize_in_place(std::span<double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
  for (double& x : v) x *= inv;
}
}  // namespace detail

/// Averages over width per (channel, row) and slices each image's rows into
/// L2-normalized stripes.
inline std::vector<StripeSet> horizontal_pool(const Tensor& local_map) {
  std::vector<StripeSet> out;
  out.reserve(local_map.n());
  for (int n = 0; n < local_map.n(); ++n) {
    StripeSet s(local_map.h(), local_map.c());
    for (int r = 0; r < local_map.h(); ++r) {
      auto st = s.stripe(r);
      for (int ch = 0; ch < local_map.c(); ++ch) {
        double sum = 0.0;
        for (int w = 0; w < local_map.w(); ++w) sum += local_map.at(n, ch, r, w);
        st[ch] = sum / local_map.w();
      }
      detail::normalize_in_place(st);
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Gradient of horizontal_pool w.r.t. its input, given gradients on the
/// normalized stripes of every image.
inline Tensor horizontal_pool_backward(const Tensor& local_map,
                                       const std::vector<StripeSet>& grads) {
  if (grads.size() != static_cast<std::size_t>(local_map.n()))
    throw ConfigError("horizontal_pool_backward: one gradient set per image required");
  Tensor gx(local_map.shape());
  const int C = local_map.c(), W = local_map.w();
  std::vector<double> m(C);
  for (int n = 0; n < local_map.n(); ++n) {
    for (int r = 0; r < local_map.h(); ++r) {
      double s = 0.0;
      for (int ch = 0; ch < C; ++ch) {
        double sum = 0.0;
        for (int w = 0; w < W; ++w) sum += local_map.at(n, ch, r, w);
        m[ch] = sum / W;
        s += m[ch] * m[ch];
      }
      const double norm = std::max(std::sqrt(s), 1e-12);
      auto g = grads[n].stripe(r);
      double dot = 0.0;
      for (int ch = 0; ch < C; ++ch) dot += m[ch] / norm * g[ch];
      for (int ch = 0; ch < C; ++ch) {
        const double gm = (g[ch] - m[ch] / norm * dot) / norm;
        for (int w = 0; w < W; ++w) gx.at(n, ch, r, w) = gm / W;
      }
    }
  }
  return gx;
}

inline double stripe_euclidean(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

inline LocalDistMatrix stripe_distance_matrix(const StripeSet& a, const StripeSet& b,
                                              StripeMetric metric = StripeMetric::normalized) {
  if (a.c != b.c)
    throw ConfigError("stripe_distance_matrix: stripe dims differ (" + std::to_string(a.c) +
                      " vs " + std::to_string(b.c) + ")");
  LocalDistMatrix d(a.h, b.h);
  for (int i = 0; i < a.h; ++i)
    for (int j = 0; j < b.h; ++j) {
      const double x = stripe_euclidean(a.stripe(i), b.stripe(j));
      // (e^x - 1)/(e^x + 1) == tanh(x/2), which stays finite for large x.
      d(i, j) = metric == StripeMetric::normalized ? std::tanh(0.5 * x) : x;
    }
  return d;
}

/// Cumulative DP table S of the monotone (right/down) shortest path.
inline LocalDistMatrix shortest_path_table(const LocalDistMatrix& d) {
  if (d.rows < 1 || d.cols < 1) throw ConfigError("shortest_path: empty distance matrix");
  constexpr double inf = std::numeric_limits<double>::infinity();
  LocalDistMatrix s(d.rows, d.cols);
  for (int i = 0; i < d.rows; ++i)
    for (int j = 0; j < d.cols; ++j) {
      if (i == 0 && j == 0) {
        s(i, j) = d(i, j);
        continue;
      }
      const double up = i > 0 ? s(i - 1, j) : inf;
      const double left = j > 0 ? s(i, j - 1) : inf;
      s(i, j) = d(i, j) + std::min(up, left);
    }
  return s;
}

inline double shortest_path(const LocalDistMatrix& d) {
  const auto s = shortest_path_table(d);
  return s(d.rows - 1, d.cols - 1);
}

/// Cells of one optimal path from (0,0) to the corner. On ties the
/// predecessor above is preferred.
inline std::vector<std::pair<int, int>> shortest_path_cells(const LocalDistMatrix& d) {
  const auto s = shortest_path_table(d);
  std::vector<std::pair<int, int>> cells;
  int i = d.rows - 1, j = d.cols - 1;
  cells.emplace_back(i, j);
  while (i > 0 || j > 0) {
    if (j == 0 || (i > 0 && s(i - 1, j) <= s(i, j - 1)))
      --i;
    else
      --j;
    cells.emplace_back(i, j);
  }
  std::reverse(cells.begin(), cells.end());
  return cells;
}

inline double local_distance(const StripeSet& a, const StripeSet& b,
                             StripeMetric metric = StripeMetric::normalized) {
  return shortest_path(stripe_distance_matrix(a, b, metric));
}

/// Subgradient of `scale * local_distance(a, b)` along one optimal path,
/// accumulated into `ga` and `gb` (same layout as the stripe sets).
inline double local_distance_backward(const StripeSet& a, const StripeSet& b, double scale,
                                      StripeSet& ga, StripeSet& gb,
                                      StripeMetric metric = StripeMetric::normalized) {
  const auto d = stripe_distance_matrix(a, b, metric);
  for (auto [i, j] : shortest_path_cells(d)) {
    const auto ai = a.stripe(i);
    const auto bj = b.stripe(j);
    const double x = stripe_euclidean(ai, bj);
    if (x <= 0.0) continue;
    const double dd_dx = metric == StripeMetric::normalized ? 0.5 * (1.0 - d(i, j) * d(i, j)) : 1.0;
    const double k = scale * dd_dx / x;
    auto gai = ga.stripe(i);
    auto gbj = gb.stripe(j);
    for (int ch = 0; ch < a.c; ++ch) {
      const double diff = ai[ch] - bj[ch];
      gai[ch] += k * diff;
      gbj[ch] -= k * diff;
    }
  }
  return shortest_path(d);
}

}  // namespace reidkit
