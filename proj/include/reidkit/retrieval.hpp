#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "reidkit/alignment.hpp"
#include "reidkit/tensor.hpp"

namespace reidkit {

/// Raised when no query is usable for evaluation.
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EmbeddingRecord {
  int person_id = 0;
  int camera_id = 0;
  std::vector<float> feature;
  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

struct EmbeddingSet {
  int dim = 0;
  std::vector<EmbeddingRecord> records;

  std::size_t size() const { return records.size(); }
  std::vector<int> person_ids() const {
    std::vector<int> v;
    for (const auto& r : records) v.push_back(r.person_id);
    return v;
  }
  std::vector<int> camera_ids() const {
    std::vector<int> v;
    for (const auto& r : records) v.push_back(r.camera_id);
    return v;
  }
  void validate() const {
    for (const auto& r : records) {
      if (static_cast<int>(r.feature.size()) != dim)
        throw ConfigError("embedding set: record of dim " + std::to_string(r.feature.size()) +
                          " in a set of dim " + std::to_string(dim));
      for (float f : r.feature)
        if (!std::isfinite(f)) throw DataError("embedding set: non-finite feature value");
    }
  }
  friend bool operator==(const EmbeddingSet&, const EmbeddingSet&) = default;
};

struct EvalReport {
  std::vector<double> cmc;  // cmc[k-1] = rank-k accuracy
  double map = 0.0;
  int num_valid_queries = 0;
};

namespace detail {
inline std::vector<double> unit_row(const EmbeddingRecord& r) {
  std::vector<double> v(r.feature.begin(), r.feature.end());
  double s = 0.0;
  for (double x : v) s += x * x;
  const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
  for (double& x : v) x *= inv;
  return v;
}
}  // namespace detail

/// Euclidean distances between L2-normalized query and gallery features.
inline Matrix pairwise_dist(const EmbeddingSet& query, const EmbeddingSet& gallery) {
  if (query.dim != gallery.dim)
    throw ConfigError("pairwise_dist: query dim " + std::to_string(query.dim) +
                      " != gallery dim " + std::to_string(gallery.dim));
  query.validate();
  gallery.validate();
  std::vector<std::vector<double>> g;
  for (const auto& r : gallery.records) g.push_back(detail::unit_row(r));
  Matrix d(static_cast<int>(query.size()), static_cast<int>(gallery.size()));
  for (int i = 0; i < d.rows; ++i) {
    const auto q = detail::unit_row(query.records[i]);
    for (int j = 0; j < d.cols; ++j) {
      double s = 0.0;
      for (int k = 0; k < query.dim; ++k) s += (q[k] - g[j][k]) * (q[k] - g[j][k]);
      d(i, j) = std::sqrt(s);
    }
  }
  return d;
}

/// Global distance plus aligned local distance per pair.
inline Matrix fused_dist(const EmbeddingSet& query, const EmbeddingSet& gallery,
                         const std::vector<StripeSet>& query_stripes,
                         const std::vector<StripeSet>& gallery_stripes,
                         StripeMetric metric = StripeMetric::normalized) {
  if (query_stripes.size() != query.size() || gallery_stripes.size() != gallery.size())
    throw ConfigError("fused_dist: need one stripe set per embedding record");
  Matrix d = pairwise_dist(query, gallery);
  for (int i = 0; i < d.rows; ++i)
    for (int j = 0; j < d.cols; ++j)
      d(i, j) += local_distance(query_stripes[i], gallery_stripes[j], metric);
  return d;
}

/// Gallery indices of one query row after cross-camera filtering, ordered by
/// (distance, gallery index). `good` marks entries sharing the query's id.
struct FilteredRanking {
  std::vector<int> order;
  std::vector<bool> good;
  int num_good = 0;
};

inline FilteredRanking filtered_ranking(std::span<const double> row, int q_id, int q_cam,
                                        std::span<const int> g_ids, std::span<const int> g_cams) {
  std::vector<int> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return row[a] < row[b]; });
  FilteredRanking fr;
  for (int j : idx) {
    if (g_ids[j] == q_id && g_cams[j] == q_cam) continue;
    fr.order.push_back(j);
    const bool good = g_ids[j] == q_id;
    fr.good.push_back(good);
    fr.num_good += good;
  }
  return fr;
}

namespace detail {
inline void check_eval_dims(const Matrix& dist, std::span<const int> q_ids,
                            std::span<const int> q_cams, std::span<const int> g_ids,
                            std::span<const int> g_cams) {
  if (q_ids.size() != static_cast<std::size_t>(dist.rows) || q_cams.size() != q_ids.size() ||
      g_ids.size() != static_cast<std::size_t>(dist.cols) || g_cams.size() != g_ids.size())
    throw ConfigError("evaluation: id/camera arrays do not match the " +
                      std::to_string(dist.rows) + "x" + std::to_string(dist.cols) +
                      " distance matrix");
}
}  // namespace detail

/// Full evaluation under the cross-camera protocol: same-id same-camera
/// gallery entries are dropped per query; queries left without a positive
/// are excluded from both CMC and mAP.
inline EvalReport evaluate(const Matrix& dist, std::span<const int> q_ids,
                           std::span<const int> q_cams, std::span<const int> g_ids,
                           std::span<const int> g_cams, int max_rank) {
  detail::check_eval_dims(dist, q_ids, q_cams, g_ids, g_cams);
  if (max_rank < 1) throw ConfigError("evaluation: max_rank must be >= 1");
  EvalReport rep;
  std::vector<double> hits(max_rank, 0.0);
  double ap_sum = 0.0;
  for (int i = 0; i < dist.rows; ++i) {
    const auto fr = filtered_ranking(dist.row(i), q_ids[i], q_cams[i], g_ids, g_cams);
    if (fr.num_good == 0) continue;
    ++rep.num_valid_queries;
    int first = -1, found = 0;
    double ap = 0.0;
    for (std::size_t pos = 0; pos < fr.order.size(); ++pos) {
      if (!fr.good[pos]) continue;
      if (first < 0) first = static_cast<int>(pos);
      ++found;
      ap += static_cast<double>(found) / static_cast<double>(pos + 1);
    }
    ap_sum += ap / fr.num_good;
    for (int k = first; k < max_rank; ++k) hits[k] += 1.0;
  }
  if (rep.num_valid_queries == 0)
    throw EvaluationError("evaluation: no query has a cross-camera match in the gallery");
  for (double& h : hits) h /= rep.num_valid_queries;
  rep.cmc = std::move(hits);
  rep.map = ap_sum / rep.num_valid_queries;
  return rep;
}

inline std::vector<double> cmc(const Matrix& dist, std::span<const int> q_ids,
                               std::span<const int> q_cams, std::span<const int> g_ids,
                               std::span<const int> g_cams, int max_rank) {
  return evaluate(dist, q_ids, q_cams, g_ids, g_cams, max_rank).cmc;
}

inline double mean_ap(const Matrix& dist, std::span<const int> q_ids, std::span<const int> q_cams,
                      std::span<const int> g_ids, std::span<const int> g_cams) {
  return evaluate(dist, q_ids, q_cams, g_ids, g_cams, 1).map;
}

inline EvalReport evaluate(const Matrix& dist, const EmbeddingSet& query,
                           const EmbeddingSet& gallery, int max_rank) {
  const auto qi = query.person_ids(), qc = query.camera_ids();
  const auto gi = gallery.person_ids(), gc = gallery.camera_ids();
  return evaluate(dist, qi, qc, gi, gc, max_rank);
}

// ---------------------------------------------------------------------------
// k-reciprocal re-ranking

struct RerankParams {
  int k1 = 20;
  int k2 = 6;
  double lambda = 0.3;
};

namespace detail {

inline std::vector<int> k_reciprocal(const std::vector<std::vector<int>>& rank, int i, int k) {
  std::vector<int> out;
  const int lim = std::min<int>(k + 1, static_cast<int>(rank[i].size()));
  for (int a = 0; a < lim; ++a) {
    const int cand = rank[i][a];
    const int lim2 = std::min<int>(k + 1, static_cast<int>(rank[cand].size()));
    for (int b = 0; b < lim2; ++b)
      if (rank[cand][b] == i) {
        out.push_back(cand);
        break;
      }
  }
  return out;
}

}  // namespace detail

/// k-reciprocal encoding re-ranking over the combined query+gallery set.
/// Returns the Q x G matrix lambda * d_original + (1 - lambda) * d_jaccard,
/// where d_original is the squared distance scaled per probe by its maximum.
inline Matrix rerank(const EmbeddingSet& query, const EmbeddingSet& gallery,
                     const RerankParams& prm = {}) {
  const int q = static_cast<int>(query.size()), g = static_cast<int>(gallery.size());
  const int all = q + g;
  if (!(prm.k2 >= 1 && prm.k1 > prm.k2))
    throw ConfigError("rerank: need k1 > k2 >= 1 (got k1=" + std::to_string(prm.k1) +
                      ", k2=" + std::to_string(prm.k2) + ")");
  if (prm.k1 >= all)
    throw ConfigError("rerank: k1=" + std::to_string(prm.k1) + " must be below Q+G=" +
                      std::to_string(all));
  if (prm.lambda < 0.0 || prm.lambda > 1.0) throw ConfigError("rerank: lambda outside [0, 1]");
  if (query.dim != gallery.dim) throw ConfigError("rerank: query/gallery dims differ");

  EmbeddingSet joint{query.dim, query.records};
  joint.records.insert(joint.records.end(), gallery.records.begin(), gallery.records.end());
  const Matrix d = pairwise_dist(joint, joint);

  Matrix orig(all, all);
  for (int i = 0; i < all; ++i) {
    double mx = 0.0;
    for (int k = 0; k < all; ++k) mx = std::max(mx, d(k, i) * d(k, i));
    const double inv = mx > 0.0 ? 1.0 / mx : 1.0;
    for (int j = 0; j < all; ++j) orig(i, j) = d(j, i) * d(j, i) * inv;
  }

  std::vector<std::vector<int>> rank(all, std::vector<int>(all));
  for (int i = 0; i < all; ++i) {
    auto& r = rank[i];
    std::iota(r.begin(), r.end(), 0);
    std::stable_sort(r.begin(), r.end(), [&](int a, int b) { return orig(i, a) < orig(i, b); });
  }

  const int half = static_cast<int>(std::nearbyint(prm.k1 / 2.0));
  Matrix v(all, all);
  for (int i = 0; i < all; ++i) {
    const auto kr = detail::k_reciprocal(rank, i, prm.k1);
    std::vector<int> expanded = kr;
    std::vector<int> kr_sorted = kr;
    std::sort(kr_sorted.begin(), kr_sorted.end());
    for (int cand : kr) {
      auto ckr = detail::k_reciprocal(rank, cand, half);
      std::sort(ckr.begin(), ckr.end());
      std::vector<int> common;
      std::set_intersection(ckr.begin(), ckr.end(), kr_sorted.begin(), kr_sorted.end(),
                            std::back_inserter(common));
      if (static_cast<double>(common.size()) > 2.0 / 3.0 * static_cast<double>(ckr.size()))
        expanded.insert(expanded.end(), ckr.begin(), ckr.end());
    }
    std::sort(expanded.begin(), expanded.end());
    expanded.erase(std::unique(expanded.begin(), expanded.end()), expanded.end());
    double z = 0.0;
    for (int j : expanded) z += std::exp(-orig(i, j));
    for (int j : expanded) v(i, j) = std::exp(-orig(i, j)) / z;
  }

  if (prm.k2 != 1) {
    Matrix vqe(all, all);
    for (int i = 0; i < all; ++i) {
      for (int a = 0; a < prm.k2; ++a) {
        const int nb = rank[i][a];
        for (int j = 0; j < all; ++j) vqe(i, j) += v(nb, j);
      }
      for (int j = 0; j < all; ++j) vqe(i, j) /= prm.k2;
    }
    v = std::move(vqe);
  }

  Matrix out(q, g);
  for (int i = 0; i < q; ++i) {
    for (int j = 0; j < g; ++j) {
      const int jj = q + j;
      double tmin = 0.0;
      for (int l = 0; l < all; ++l) tmin += std::min(v(i, l), v(jj, l));
      const double jac = 1.0 - tmin / (2.0 - tmin);
      out(i, j) = jac * (1.0 - prm.lambda) + orig(i, jj) * prm.lambda;
    }
  }
  return out;
}

}  // namespace reidkit
