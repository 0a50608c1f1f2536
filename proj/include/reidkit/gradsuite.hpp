#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "reidkit/architecture.hpp"
#include "reidkit/attention.hpp"
#include "reidkit/gradcheck.hpp"

namespace reidkit {

/// Named gradient probes over every differentiable piece of the network.
/// Each probe draws its inputs and parameters from `seed`.
struct GradProbe {
  std::string op;
  bool smooth = true;  // smooth ops are held to a tighter tolerance
};

inline const std::vector<GradProbe>& grad_probes() {
  static const std::vector<GradProbe> probes{
      {"conv", true},       {"linear", true},   {"bn", true},         {"relu", false},
      {"sigmoid", true},    {"gap", true},      {"maxpool", false},   {"widthpool", true},
      {"mul", true},        {"add", true},      {"l2norm", true},     {"cwa", false},
      {"cwa-add", false},   {"bottleneck", false}, {"basic", false},  {"model", false},
  };
  return probes;
}

inline double grad_tolerance(const std::string& op) {
  for (const auto& p : grad_probes())
    if (p.op == op) return p.smooth ? 1e-6 : 1e-4;
  throw ConfigError("unknown gradient probe '" + op + "'");
}

namespace detail {

/// Moves every entry at least `gap` away from zero, keeping its sign.
inline Tensor away_from_zero(Tensor t, double gap) {
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += t[i] >= 0.0 ? gap : -gap;
  return t;
}

/// Tensor view over a Param's storage.
inline Tensor param_tensor(const Param& p, Shape s) { return Tensor(s, p.value); }

}  // namespace detail

/// Runs one probe. `channels` and `reduction` size the attention-bearing
/// probes; the rest use fixed small shapes.
inline GradCheckReport run_grad_probe(const std::string& op, std::uint64_t seed, int channels = 8,
                                      int reduction = 4, GradCheckOptions opt = {}) {
  std::mt19937_64 rng(seed);
  const int C = channels;
  if (opt.kink_tolerance == 0.0 && grad_tolerance(op) > 1e-6) opt.kink_tolerance = 2 * grad_tolerance(op);
  if (op == "conv") {
    auto p = LayerParams::conv(4, 3, 3, true);
    randomize(p, rng);
    FnGraph g{op, nullptr, nullptr, {}};
    Tensor in;
    g.fwd = [&](const Tensor& x) {
      in = x;
      return conv2d(x, p, 2, 1);
    };
    g.bwd = [&](const Tensor& gy) { return conv2d_backward(in, p, 2, 1, gy); };
    p.collect(g.params);
    return grad_check(g, random_tensor({2, 3, 5, 5}, rng), seed, op, opt);
  }
  if (op == "linear") {
    auto p = LayerParams::linear(3, 8);
    randomize(p, rng);
    FnGraph g{op, nullptr, nullptr, {}};
    Tensor in;
    g.fwd = [&](const Tensor& x) {
      in = x;
      return linear(x, p);
    };
    g.bwd = [&](const Tensor& gy) { return linear_backward(in, p, gy); };
    p.collect(g.params);
    return grad_check(g, random_tensor({4, 8, 1, 1}, rng), seed, op, opt);
  }
  if (op == "bn") {
    auto p = LayerParams::batchnorm(3);
    randomize(p, rng);
    FnGraph g{op, nullptr, nullptr, {}};
    Tensor in;
    g.fwd = [&](const Tensor& x) {
      in = x;
      return batch_norm(x, p, Mode::train);
    };
    g.bwd = [&](const Tensor& gy) { return batch_norm_backward(in, p, Mode::train, gy); };
    p.collect(g.params);
    return grad_check(g, random_tensor({4, 3, 2, 2}, rng), seed, op, opt);
  }
  if (op == "relu" || op == "sigmoid") {
    FnGraph g{op, nullptr, nullptr, {}};
    Tensor out;
    const bool is_relu = op == "relu";
    g.fwd = [&](const Tensor& x) { return out = is_relu ? relu(x) : sigmoid(x); };
    g.bwd = [&](const Tensor& gy) {
      return is_relu ? relu_backward(out, gy) : sigmoid_backward(out, gy);
    };
    Tensor x = random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0);
    if (is_relu) x = detail::away_from_zero(x, 0.1);
    return grad_check(g, x, seed, op, opt);
  }
  if (op == "gap") {
    FnGraph g{op, nullptr, nullptr, {}};
    Shape s{2, 3, 4, 5};
    g.fwd = [](const Tensor& x) { return global_avg_pool(x); };
    g.bwd = [&](const Tensor& gy) { return global_avg_pool_backward(s, gy); };
    return grad_check(g, random_tensor(s, rng), seed, op, opt);
  }
  if (op == "maxpool") {
    FnGraph g{op, nullptr, nullptr, {}};
    Shape s{2, 2, 6, 6};
    std::vector<std::size_t> argmax;
    g.fwd = [&](const Tensor& x) { return max_pool2d(x, 3, 2, 1, &argmax); };
    g.bwd = [&](const Tensor& gy) { return max_pool2d_backward(s, argmax, gy); };
    return grad_check(g, random_tensor(s, rng), seed, op, opt);
  }
  if (op == "widthpool") {
    FnGraph g{op, nullptr, nullptr, {}};
    Shape s{2, 3, 4, 5};
    g.fwd = [](const Tensor& x) { return width_mean_pool(x); };
    g.bwd = [&](const Tensor& gy) { return width_mean_pool_backward(s, gy); };
    return grad_check(g, random_tensor(s, rng), seed, op, opt);
  }
  if (op == "mul" || op == "add") {
    const auto eop = op == "mul" ? ElementwiseOp::mul : ElementwiseOp::add;
    const Shape bs{2, 3, 1, 1};
    Param b(bs.size());
    for (double& v : b.value) v = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    FnGraph g{op, nullptr, nullptr, {&b}};
    Tensor in;
    g.fwd = [&](const Tensor& x) {
      in = x;
      return elementwise(x, detail::param_tensor(b, bs), eop, Broadcast::per_channel);
    };
    g.bwd = [&](const Tensor& gy) {
      auto [ga, gb] =
          elementwise_backward(in, detail::param_tensor(b, bs), eop, Broadcast::per_channel, gy);
      for (std::size_t i = 0; i < gb.size(); ++i) b.grad[i] += gb[i];
      return ga;
    };
    return grad_check(g, random_tensor({2, 3, 3, 3}, rng), seed, op, opt);
  }
  if (op == "l2norm") {
    FnGraph g{op, nullptr, nullptr, {}};
    Tensor in;
    g.fwd = [&](const Tensor& x) {
      in = x;
      return l2_normalize_rows(x);
    };
    g.bwd = [&](const Tensor& gy) { return l2_normalize_rows_backward(in, gy); };
    return grad_check(g, random_tensor({3, 6, 1, 1}, rng), seed, op, opt);
  }
  if (op == "cwa" || op == "cwa-add") {
    CwaBlock blk(C, reduction, op == "cwa" ? Fusion::mul : Fusion::add);
    blk.visit([&](LayerParams& p) { randomize(p, rng); });
    FnGraph g{op, [&](const Tensor& x) { return blk.forward(x, Mode::train); },
              [&](const Tensor& gy) { return blk.backward(gy); }, blk.parameters()};
    return grad_check(g, random_tensor({4, C, 3, 3}, rng), seed, op, opt);
  }
  if (op == "bottleneck" || op == "basic") {
    ResidualBlock blk = op == "bottleneck"
                            ? make_cwa_bottleneck(C, C / 4 > 0 ? C / 4 : 1, 2, reduction)
                            : ResidualBlock(BlockKind::basic, C, C, 1, CwaBlock(C, reduction));
    blk.visit([&](LayerParams& p) { randomize(p, rng); });
    FnGraph g{op, [&](const Tensor& x) { return blk.forward(x, Mode::train); },
              [&](const Tensor& gy) { return blk.backward(gy); }, blk.parameters()};
    if (opt.max_coords == 0) opt.max_coords = 40;
    return grad_check(g, random_tensor({2, C, 6, 6}, rng), seed, op, opt);
  }
  if (op == "model") {
    ArchSpec spec;
    spec.variant = Variant::resnet18;
    spec.width = {1, 8};
    spec.attention_layers = {3, 4};
    spec.last_stride = 1;
    spec.num_classes = 4;
    spec.local_dim = 8;
    Model model = build(spec, seed);
    const std::uint64_t drop_seed = seed ^ 0x5eed;
    ForwardOutput last;
    auto flat = [](const ForwardOutput& o) {
      const std::size_t n = o.global_feat.size() + o.local_feats.size() + o.logits.size();
      Tensor t(1, static_cast<int>(n), 1, 1);
      std::size_t k = 0;
      for (const Tensor* p : {&o.global_feat, &o.local_feats, &o.logits})
        for (std::size_t i = 0; i < p->size(); ++i) t[k++] = (*p)[i];
      return t;
    };
    FnGraph g{op, nullptr, nullptr, model.parameters()};
    g.fwd = [&](const Tensor& x) {
      last = model.forward(x, Mode::train, drop_seed);
      return flat(last);
    };
    g.bwd = [&](const Tensor& gy) {
      ForwardGrads fg{Tensor(last.global_feat.shape()), Tensor(last.local_feats.shape()),
                      Tensor(last.logits.shape())};
      std::size_t k = 0;
      for (Tensor* p : {&fg.global_feat, &fg.local_feats, &fg.logits})
        for (std::size_t i = 0; i < p->size(); ++i) (*p)[i] = gy[k++];
      return model.backward(fg);
    };
    if (opt.max_coords == 0) opt.max_coords = 2;
    return grad_check(g, random_tensor({4, 3, 32, 16}, rng), seed, op, opt);
  }
  throw ConfigError("unknown gradient probe '" + op + "'");
}

}  // namespace reidkit
