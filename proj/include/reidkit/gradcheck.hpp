#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "reidkit/numerics.hpp"

namespace reidkit {

/// Something with a deterministic forward, a backward that accumulates
/// parameter gradients, and a list of its learnable parameters.
template <class G>
concept Differentiable = requires(G g, const Tensor& t) {
  { g.forward(t) } -> std::convertible_to<Tensor>;
  { g.backward(t) } -> std::convertible_to<Tensor>;
  { g.parameters() } -> std::convertible_to<std::vector<Param*>>;
};

/// Adapter for ad-hoc compositions built from lambdas.
struct FnGraph {
  std::string name;
  std::function<Tensor(const Tensor&)> fwd;
  std::function<Tensor(const Tensor&)> bwd;
  std::vector<Param*> params;

  Tensor forward(const Tensor& x) { return fwd(x); }
  Tensor backward(const Tensor& g) { return bwd(g); }
  std::vector<Param*> parameters() const { return params; }
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates probed per tensor (input and each parameter); 0 probes all.
  std::size_t max_coords = 0;
  /// When > 0, a coordinate whose forward and backward one-sided differences
  /// disagree by more than this (relative) lies within one step of a
  /// non-differentiable point; it is counted in `kinks` and not scored.
  double kink_tolerance = 0.0;
};

struct GradCheckReport {
  double max_error = 0.0;
  std::string worst;  // e.g. "param[2][17]" or "input[5]"
  std::size_t coords = 0;
  std::size_t kinks = 0;
};

/// Compares analytic gradients against central differences. The output is
/// reduced to a scalar by a fixed, seeded random-weighted summation head.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
template <Differentiable G>
GradCheckReport grad_check(G& graph, Tensor input, std::uint64_t seed,
                           const std::string& op_name = "graph", GradCheckOptions opt = {}) {
  std::mt19937_64 rng(seed);
  auto params = graph.parameters();
  for (Param* p : params) p->zero_grad();

  Tensor y = graph.forward(input);
  if (!y.all_finite()) throw NumericError(op_name + ": non-finite forward output");
  Tensor head(y.shape());
  std::uniform_real_distribution<double> coef(-1.0, 1.0);
  for (std::size_t i = 0; i < head.size(); ++i) head[i] = coef(rng);

  const Tensor gx = graph.backward(head);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);

  auto loss = [&](const Tensor& x) {
    const Tensor out = graph.forward(x);
    if (!out.all_finite()) throw NumericError(op_name + ": non-finite output during probe");
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * head[i];
    return s;
  };

  auto pick = [&](std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (opt.max_coords != 0 && opt.max_coords < n) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_coords);
      std::sort(idx.begin(), idx.end());
    }
    return idx;
  };

  GradCheckReport rep;
  const double h = opt.step;
  const double base = loss(input);
  auto record = [&](double a, double lp, double lm, const std::string& where) {
    const double num = (lp - lm) / (2 * h);
    if (!std::isfinite(a) || !std::isfinite(num))
      throw NumericError(op_name + ": non-finite gradient at " + where);
    const double scale = std::max(1.0, std::abs(a));
    if (opt.kink_tolerance > 0.0 &&
        std::abs((lp - base) / h - (base - lm) / h) / scale > opt.kink_tolerance) {
      ++rep.kinks;
      return;
    }
    const double e = std::abs(a - num) / scale;
    ++rep.coords;
    if (rep.worst.empty() || e > rep.max_error) {
      rep.max_error = e;
      rep.worst = where;
    }
  };

  for (std::size_t i : pick(input.size())) {
    const double orig = input[i];
    input[i] = orig + h;
    const double lp = loss(input);
    input[i] = orig - h;
    const double lm = loss(input);
    input[i] = orig;
    record(gx[i], lp, lm, "input[" + std::to_string(i) + "]");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& v = params[k]->value;
    for (std::size_t i : pick(v.size())) {
      const double orig = v[i];
      v[i] = orig + h;
      const double lp = loss(input);
      v[i] = orig - h;
      const double lm = loss(input);
      v[i] = orig;
      record(analytic[k][i], lp, lm, "param[" + std::to_string(k) + "][" + std::to_string(i) + "]");
    }
  }
  return rep;
}

/// Fills a tensor with U(lo, hi) draws.
inline Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  std::uniform_real_distribution<double> d(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

inline void randomize(LayerParams& p, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> d(-scale, scale);
  for (double& v : p.weight.value) v = d(rng);
  for (double& v : p.bias.value) v = d(rng);
  if (p.kind == LayerKind::batchnorm)
    for (double& v : p.weight.value) v = 1.0 + v;
}

}  // namespace reidkit
