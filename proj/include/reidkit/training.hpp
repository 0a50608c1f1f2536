#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "reidkit/alignment.hpp"
#include "reidkit/architecture.hpp"

namespace reidkit {

/// Derives an independent stream seed from a base seed and a path of counters.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed),
                                   static_cast<std::uint32_t>(seed >> 32)};
  for (auto p : path) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// Training images with contiguous class labels in [0, num_classes).
struct LabeledImages {
  Tensor images;  // (N, 3, H, W)
  std::vector<int> labels;
  std::vector<int> cams;
};

inline Tensor gather_images(const Tensor& images, std::span<const std::size_t> idx) {
  if (idx.empty()) throw ConfigError("gather_images: empty index list");
  Tensor out(static_cast<int>(idx.size()), images.c(), images.h(), images.w());
  const std::size_t per = static_cast<std::size_t>(images.c()) * images.shape().plane();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= static_cast<std::size_t>(images.n()))
      throw ConfigError("gather_images: index " + std::to_string(idx[k]) + " out of range");
    std::copy_n(images.data() + idx[k] * per, per, out.data() + k * per);
  }
  return out;
}

struct TripletBatch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // rows of the source dataset
  int p = 0;
  int k = 0;
};

/// P identities x K instances. Identities with fewer than K images are
/// sampled with replacement.
inline TripletBatch pk_sample(const LabeledImages& data, int p, int k, std::uint64_t seed) {
  if (p < 1 || k < 1) throw ConfigError("pk_sample: P and K must be positive");
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < data.labels.size(); ++i) by_id[data.labels[i]].push_back(i);
  if (static_cast<int>(by_id.size()) < p)
    throw ConfigError("pk_sample: dataset has " + std::to_string(by_id.size()) +
                      " identities, batch needs P = " + std::to_string(p));
  std::vector<int> ids;
  for (const auto& [id, _] : by_id) ids.push_back(id);
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(p);

  TripletBatch b;
  b.p = p;
  b.k = k;
  for (int id : ids) {
    auto pool = by_id[id];
    if (static_cast<int>(pool.size()) >= k) {
      std::shuffle(pool.begin(), pool.end(), rng);
      for (int j = 0; j < k; ++j) b.indices.push_back(pool[j]);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      for (int j = 0; j < k; ++j) b.indices.push_back(pool[pick(rng)]);
    }
    for (int j = 0; j < k; ++j) b.labels.push_back(id);
  }
  b.images = gather_images(data.images, b.indices);
  return b;
}

// ---------------------------------------------------------------------------
// losses

/// Mean softmax cross-entropy. When `grad` is given it receives dL/dlogits.
inline double id_loss(const Tensor& logits, std::span<const int> labels, Tensor* grad = nullptr) {
  if (static_cast<std::size_t>(logits.n()) != labels.size())
    throw ConfigError("id_loss: " + std::to_string(logits.n()) + " logit rows vs " +
                      std::to_string(labels.size()) + " labels");
  const int k = logits.c() * logits.h() * logits.w();
  const double n = logits.n();
  if (grad) *grad = Tensor(logits.shape());
  double total = 0.0;
  for (int i = 0; i < logits.n(); ++i) {
    if (labels[i] < 0 || labels[i] >= k)
      throw DataError("id_loss: label " + std::to_string(labels[i]) + " outside [0, " +
                      std::to_string(k) + ")");
    const double* row = logits.data() + static_cast<std::size_t>(i) * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[labels[i]];
    if (grad) {
      double* g = grad->data() + static_cast<std::size_t>(i) * k;
      for (int j = 0; j < k; ++j) g[j] = std::exp(row[j] - lse) / n;
      g[labels[i]] -= 1.0 / n;
    }
  }
  return total / n;
}

/// Pairwise euclidean distances between the rows of an (N, D, 1, 1) tensor.
inline Matrix feature_distances(const Tensor& feats) {
  const int n = feats.n();
  const std::size_t d = static_cast<std::size_t>(feats.c()) * feats.h() * feats.w();
  Matrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = feats[i * d + k] - feats[j * d + k];
        s += diff * diff;
      }
      m(i, j) = m(j, i) = std::sqrt(s);
    }
  return m;
}

struct MinedTriplet {
  int anchor = 0;
  int positive = 0;
  int negative = 0;
};

/// Per anchor: farthest same-id sample (excluding itself) and nearest
/// different-id sample. Ties go to the lowest index.
inline std::vector<MinedTriplet> batch_hard_mine(const Matrix& dist, std::span<const int> labels) {
  const int n = static_cast<int>(labels.size());
  if (dist.rows != n || dist.cols != n)
    throw ConfigError("batch_hard_mine: distance matrix must be " + std::to_string(n) + "x" +
                      std::to_string(n));
  std::vector<MinedTriplet> out;
  out.reserve(n);
  for (int a = 0; a < n; ++a) {
    int pos = -1, neg = -1;
    for (int j = 0; j < n; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (pos < 0 || dist(a, j) > dist(a, pos)) pos = j;
      } else if (neg < 0 || dist(a, j) < dist(a, neg)) {
        neg = j;
      }
    }
    if (pos < 0) throw DataError("batch_hard_mine: anchor " + std::to_string(a) + " has no positive");
    if (neg < 0) throw DataError("batch_hard_mine: anchor " + std::to_string(a) + " has no negative");
    out.push_back({a, pos, neg});
  }
  return out;
}

inline double triplet_loss(double d_ap, double d_an, double margin) {
  return std::max(0.0, margin + d_ap - d_an);
}

/// Hinge averaged over anchors.
inline double triplet_loss(std::span<const double> d_ap, std::span<const double> d_an,
                           double margin) {
  if (d_ap.size() != d_an.size() || d_ap.empty())
    throw ConfigError("triplet_loss: need equally many, non-zero, ap/an distances");
  double s = 0.0;
  for (std::size_t i = 0; i < d_ap.size(); ++i) s += triplet_loss(d_ap[i], d_an[i], margin);
  return s / static_cast<double>(d_ap.size());
}

/// Batch-hard triplet loss on (N, D, 1, 1) features. Returns the loss, the
/// mined triplets and, optionally, dL/dfeats.
inline double global_triplet_loss(const Tensor& feats, std::span<const int> labels, double margin,
                                  std::vector<MinedTriplet>* mined_out = nullptr,
                                  Tensor* grad = nullptr) {
  const Matrix dist = feature_distances(feats);
  auto mined = batch_hard_mine(dist, labels);
  const std::size_t d = static_cast<std::size_t>(feats.c()) * feats.h() * feats.w();
  const double n = static_cast<double>(mined.size());
  if (grad) *grad = Tensor(feats.shape());
  double total = 0.0;
  for (const auto& t : mined) {
    const double ap = dist(t.anchor, t.positive), an = dist(t.anchor, t.negative);
    const double l = triplet_loss(ap, an, margin);
    total += l;
    if (!grad || l <= 0.0) continue;
    auto pull = [&](int other, double dij, double sign) {
      if (dij <= 0.0) return;
      for (std::size_t k = 0; k < d; ++k) {
        const double g = sign * (feats[t.anchor * d + k] - feats[other * d + k]) / (dij * n);
        (*grad)[t.anchor * d + k] += g;
        (*grad)[other * d + k] -= g;
      }
    };
    pull(t.positive, ap, 1.0);
    pull(t.negative, an, -1.0);
  }
  if (mined_out) *mined_out = std::move(mined);
  return total / n;
}

/// Hinge on local (aligned stripe) distances for triplets mined on the
/// global branch. Indices are used as given; nothing is re-mined locally.
/// When `grads` is given it receives dL/dstripe for every image.
inline double local_triplet_loss(const std::vector<StripeSet>& stripes,
                                 std::span<const MinedTriplet> mined, double margin,
                                 std::vector<StripeSet>* grads = nullptr,
                                 StripeMetric metric = StripeMetric::normalized) {
  if (mined.empty()) throw ConfigError("local_triplet_loss: no triplets");
  for (const auto& t : mined)
    for (int i : {t.anchor, t.positive, t.negative})
      if (i < 0 || static_cast<std::size_t>(i) >= stripes.size())
        throw ConfigError("local_triplet_loss: mined index " + std::to_string(i) +
                          " has no stripes");
  if (grads) {
    grads->clear();
    for (const auto& s : stripes) grads->emplace_back(s.h, s.c);
  }
  const double n = static_cast<double>(mined.size());
  double total = 0.0;
  for (const auto& t : mined) {
    const double ap = local_distance(stripes[t.anchor], stripes[t.positive], metric);
    const double an = local_distance(stripes[t.anchor], stripes[t.negative], metric);
    const double l = triplet_loss(ap, an, margin);
    total += l;
    if (!grads || l <= 0.0) continue;
    local_distance_backward(stripes[t.anchor], stripes[t.positive], 1.0 / n,
                            (*grads)[t.anchor], (*grads)[t.positive], metric);
    local_distance_backward(stripes[t.anchor], stripes[t.negative], -1.0 / n,
                            (*grads)[t.anchor], (*grads)[t.negative], metric);
  }
  return total / n;
}

// ---------------------------------------------------------------------------
// augmentation

inline constexpr std::array<double, 3> kNormMean{0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kNormStd{0.229, 0.224, 0.225};

struct AugmentFlags {
  bool flip = true;
  bool force_flip = false;  // mirror unconditionally
  bool erase = true;
  bool force_erase = false;  // erase unconditionally (ignores erase_probability)
  bool normalize = true;
  double flip_probability = 0.5;
  double erase_probability = 0.5;
  double area_min = 0.02, area_max = 0.4;
  double aspect_min = 0.3, aspect_max = 3.3;
};

/// Rectangle [y0, y0+h) x [x0, x0+w) chosen by the last random erase.
struct EraseRect {
  int y0 = 0, x0 = 0, h = 0, w = 0;
};

/// Random horizontal flip, random erasing (fill = per-channel mean) and
/// per-channel normalization of every image in `images`.
inline Tensor augment(const Tensor& images, std::uint64_t seed, const AugmentFlags& flags = {},
                      std::vector<EraseRect>* erased = nullptr) {
  if (images.c() != 3) throw ConfigError("augment: images must have 3 channels");
  Tensor out = images;
  const int H = images.h(), W = images.w();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (erased) erased->assign(images.n(), EraseRect{});
  for (int n = 0; n < images.n(); ++n) {
    const bool flip = flags.force_flip || (flags.flip && u(rng) < flags.flip_probability);
    if (flip)
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W / 2; ++x) std::swap(out.at(n, c, y, x), out.at(n, c, y, W - 1 - x));

    const bool erase = flags.force_erase || (flags.erase && u(rng) < flags.erase_probability);
    if (erase) {
      for (int attempt = 0; attempt < 100; ++attempt) {
        const double area = H * W * (flags.area_min + (flags.area_max - flags.area_min) * u(rng));
        const double log_lo = std::log(flags.aspect_min), log_hi = std::log(flags.aspect_max);
        const double aspect = std::exp(log_lo + (log_hi - log_lo) * u(rng));
        const int eh = static_cast<int>(std::round(std::sqrt(area * aspect)));
        const int ew = static_cast<int>(std::round(std::sqrt(area / aspect)));
        if (eh < 1 || ew < 1 || eh >= H || ew >= W) continue;
        const int y0 = std::uniform_int_distribution<int>(0, H - eh)(rng);
        const int x0 = std::uniform_int_distribution<int>(0, W - ew)(rng);
        for (int c = 0; c < 3; ++c)
          for (int y = y0; y < y0 + eh; ++y)
            for (int x = x0; x < x0 + ew; ++x) out.at(n, c, y, x) = kNormMean[c];
        if (erased) (*erased)[n] = {y0, x0, eh, ew};
        break;
      }
    }
    if (flags.normalize)
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            double& v = out.at(n, c, y, x);
            v = (v - kNormMean[c]) / kNormStd[c];
          }
  }
  return out;
}

/// Test-time preprocessing: normalization only.
inline Tensor normalize_images(const Tensor& images) {
  AugmentFlags f;
  f.flip = false;
  f.erase = false;
  return augment(images, 0, f);
}

// ---------------------------------------------------------------------------
// optimizer

struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
  double base_lr = 2e-4;
  std::vector<int> lr_steps{150};
  double lr_decay = 0.1;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  /// Learning rate for a 0-based epoch: base_lr * decay^(boundaries passed).
  double lr_at(int epoch) const {
    double lr = base_lr;
    for (int s : lr_steps)
      if (epoch >= s) lr *= lr_decay;
    return lr;
  }
};

/// One ADAM step with L2 weight decay folded into the gradient.
inline void adam_step(const std::vector<Param*>& params, OptimizerState& st, double lr) {
  if (st.m.empty()) {
    for (Param* p : params) {
      st.m.emplace_back(p->size(), 0.0);
      st.v.emplace_back(p->size(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw ConfigError("adam_step: parameter list changed");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    auto& m = st.m[k];
    auto& v = st.v[k];
    if (m.size() != p.size()) throw ConfigError("adam_step: moment shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad[i] + st.weight_decay * p.value[i];
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      p.value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + st.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// training loop

struct TrainConfig {
  int epochs = 1;
  int p = 8;
  int k = 4;
  int iterations_per_epoch = 0;  // 0: ceil(num_images / (P*K))
  double lr = 2e-4;
  double weight_decay = 5e-4;
  std::vector<int> lr_steps{150};
  double lr_decay = 0.1;
  double margin = 0.3;
  double id_weight = 1.0;
  double global_weight = 1.0;
  double local_weight = 1.0;
  StripeMetric local_metric = StripeMetric::normalized;
  AugmentFlags augment;
};

struct EpochLoss {
  int epoch = 0;
  double total = 0.0;
  double id = 0.0;
  double global_triplet = 0.0;
  double local_triplet = 0.0;
};

struct StepLoss {
  double total = 0.0, id = 0.0, global_triplet = 0.0, local_triplet = 0.0;
};

/// Forward, all three losses and backward for one batch. Gradients are
/// accumulated into the model; nothing is stepped.
inline StepLoss train_step_gradients(Model& model, const Tensor& images,
                                     std::span<const int> labels, const TrainConfig& cfg,
                                     std::uint64_t seed) {
  model.zero_grad();
  const ForwardOutput out = model.forward(images, Mode::train, seed);
  StepLoss s;
  ForwardGrads g;
  s.id = id_loss(out.logits, labels, &g.logits);
  std::vector<MinedTriplet> mined;
  s.global_triplet = global_triplet_loss(out.global_feat, labels, cfg.margin, &mined, &g.global_feat);
  const auto stripes = horizontal_pool(out.local_feats);
  std::vector<StripeSet> sg;
  s.local_triplet = local_triplet_loss(stripes, mined, cfg.margin, &sg, cfg.local_metric);
  g.local_feats = horizontal_pool_backward(out.local_feats, sg);

  for (std::size_t i = 0; i < g.logits.size(); ++i) g.logits[i] *= cfg.id_weight;
  for (std::size_t i = 0; i < g.global_feat.size(); ++i) g.global_feat[i] *= cfg.global_weight;
  for (std::size_t i = 0; i < g.local_feats.size(); ++i) g.local_feats[i] *= cfg.local_weight;
  s.total = cfg.id_weight * s.id + cfg.global_weight * s.global_triplet +
            cfg.local_weight * s.local_triplet;
  model.backward(g);
  return s;
}

struct TrainResult {
  std::vector<EpochLoss> curve;
};

/// ADAM training on id + global triplet + local triplet losses. Fully
/// deterministic for a given seed. `on_epoch` is called after every epoch.
inline TrainResult train(Model& model, const LabeledImages& data, const TrainConfig& cfg,
                         std::uint64_t seed,
                         const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  if (cfg.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  const int batch = cfg.p * cfg.k;
  const int iters = cfg.iterations_per_epoch > 0
                        ? cfg.iterations_per_epoch
                        : std::max(1, (data.images.n() + batch - 1) / batch);
  OptimizerState opt;
  opt.base_lr = cfg.lr;
  opt.lr_steps = cfg.lr_steps;
  opt.lr_decay = cfg.lr_decay;
  opt.weight_decay = cfg.weight_decay;
  const auto params = model.parameters();

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = opt.lr_at(epoch);
    EpochLoss el;
    el.epoch = epoch;
    for (int it = 0; it < iters; ++it) {
      const auto step_seed = derive_seed(seed, {static_cast<std::uint64_t>(epoch),
                                                static_cast<std::uint64_t>(it)});
      TripletBatch b = pk_sample(data, cfg.p, cfg.k, derive_seed(step_seed, {0}));
      const Tensor imgs = augment(b.images, derive_seed(step_seed, {1}), cfg.augment);
      const StepLoss s = train_step_gradients(model, imgs, b.labels, cfg, derive_seed(step_seed, {2}));
      if (!std::isfinite(s.total))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(it) + " (id " + std::to_string(s.id) +
                           ", global " + std::to_string(s.global_triplet) + ", local " +
                           std::to_string(s.local_triplet) + ")");
      adam_step(params, opt, lr);
      el.total += s.total / iters;
      el.id += s.id / iters;
      el.global_triplet += s.global_triplet / iters;
      el.local_triplet += s.local_triplet / iters;
    }
    result.curve.push_back(el);
    if (on_epoch) on_epoch(el);
  }
  return result;
}

}  // namespace reidkit
