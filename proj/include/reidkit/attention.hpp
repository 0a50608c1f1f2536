#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "reidkit/numerics.hpp"

namespace reidkit {

/// How attention weights are fused with the feature map: CWA(x) or CWA(+).
enum class Fusion { mul, add };

inline const char* to_string(Fusion f) { return f == Fusion::mul ? "mul" : "add"; }

inline int reduced_width(int channels, int reduction) {
  if (channels < 1 || reduction < 1)
    throw ConfigError("channel-wise attention needs positive channels and reduction");
  return (channels + reduction - 1) / reduction;
}

/// Learnable parameters of one channel-wise attention block with reduction
/// width m = ceil(C / r): two biased MLP maps and a BN affine over m units.
inline std::size_t cwa_param_count(int channels, int reduction) {
  const std::size_t c = channels;
  const std::size_t m = reduced_width(channels, reduction);
  return (c * m + m) + 2 * m + (m * c + c);
}

/// Channel-wise attention: GAP descriptor, reduce MLP, BN, ReLU, expand MLP,
/// sigmoid, then per-channel fusion with the input map.
class CwaBlock {
 public:
  CwaBlock() = default;
  CwaBlock(int channels, int reduction, Fusion fusion = Fusion::mul)
      : channels(channels),
        reduction(reduction),
        fusion(fusion),
        mlp1(LayerParams::linear(reduced_width(channels, reduction), channels)),
        bn(LayerParams::batchnorm(reduced_width(channels, reduction))),
        mlp2(LayerParams::linear(channels, reduced_width(channels, reduction))) {}

  int reduced() const { return reduced_width(channels, reduction); }
  std::size_t param_count() const {
    return mlp1.learnable_count() + bn.learnable_count() + mlp2.learnable_count();
  }

  void init(std::mt19937_64& rng) {
    visit([&](LayerParams& p) { kaiming_init(p, rng); });
  }

  template <class F>
  void visit(F&& f) {
    f(mlp1);
    f(bn);
    f(mlp2);
  }
  void collect(std::vector<Param*>& out) {
    visit([&](LayerParams& p) { p.collect(out); });
  }
  std::vector<Param*> parameters() {
    std::vector<Param*> out;
    collect(out);
    return out;
  }

  /// f' for input f; caches intermediates for backward.
  Tensor forward(const Tensor& f, Mode mode);
  /// Gradient w.r.t. f through both the fusion node and the weights' own
  /// dependence on f. Parameter grads accumulate.
  Tensor backward(const Tensor& gy);

  /// Weights from the most recent forward, shape (N, C, 1, 1).
  const Tensor& last_weights() const { return w_; }

  int channels = 1;
  int reduction = 16;
  Fusion fusion = Fusion::mul;
  LayerParams mlp1, bn, mlp2;

 private:
  Tensor f_, desc_, h1_, h3_, w_;
  Mode mode_ = Mode::train;
};

inline Tensor channel_descriptor(const Tensor& f) { return global_avg_pool(f); }

inline Tensor reduce_activate(const Tensor& descriptor, CwaBlock& block, Mode mode) {
  if (descriptor.c() != block.channels)
    throw ConfigError("reduce_activate: descriptor has " + std::to_string(descriptor.c()) +
                      " channels, block expects " + std::to_string(block.channels));
  return relu(batch_norm(linear(descriptor, block.mlp1), block.bn, mode));
}

inline Tensor attention_weights(const Tensor& f, CwaBlock& block, Mode mode) {
  if (f.c() != block.channels)
    throw ConfigError("attention_weights: feature map has " + std::to_string(f.c()) +
                      " channels, block expects " + std::to_string(block.channels));
  return sigmoid(linear(reduce_activate(channel_descriptor(f), block, mode), block.mlp2));
}

inline Tensor apply_attention(const Tensor& f, const Tensor& w, Fusion fusion) {
  return elementwise(f, w, fusion == Fusion::mul ? ElementwiseOp::mul : ElementwiseOp::add,
                     Broadcast::per_channel);
}

inline Tensor CwaBlock::forward(const Tensor& f, Mode mode) {
  if (f.c() != channels)
    throw ConfigError("cwa: feature map has " + std::to_string(f.c()) + " channels, block expects " +
                      std::to_string(channels));
  mode_ = mode;
  f_ = f;
  desc_ = channel_descriptor(f);
  h1_ = linear(desc_, mlp1);
  h3_ = relu(batch_norm(h1_, bn, mode));
  w_ = sigmoid(linear(h3_, mlp2));
  return apply_attention(f, w_, fusion);
}

inline Tensor CwaBlock::backward(const Tensor& gy) {
  const auto op = fusion == Fusion::mul ? ElementwiseOp::mul : ElementwiseOp::add;
  auto [gf, gw] = elementwise_backward(f_, w_, op, Broadcast::per_channel, gy);
  Tensor g = sigmoid_backward(w_, gw);
  g = linear_backward(h3_, mlp2, g);
  g = relu_backward(h3_, g);
  g = batch_norm_backward(h1_, bn, mode_, g);
  g = linear_backward(desc_, mlp1, g);
  const Tensor gdesc = global_avg_pool_backward(f_.shape(), g);
  for (std::size_t i = 0; i < gf.size(); ++i) gf[i] += gdesc[i];
  return gf;
}

enum class BlockKind { basic, bottleneck };

inline int expansion(BlockKind k) { return k == BlockKind::basic ? 1 : 4; }

/// ResNet residual unit. Bottleneck: 1x1 reduce, 3x3 (carries the stride),
/// 1x1 expand, each followed by BN (ReLU on all but the last). Basic: two
/// 3x3 convs. When attention is attached it acts on the residual branch
/// output, before the shortcut add.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(BlockKind kind, int in_channels, int planes, int stride,
                std::optional<CwaBlock> cwa = std::nullopt)
      : kind_(kind), in_(in_channels), out_(planes * expansion(kind)), cwa(std::move(cwa)) {
    if (kind == BlockKind::bottleneck) {
      convs.emplace_back(in_channels, planes, 1, 1, 0);
      convs.emplace_back(planes, planes, 3, stride, 1);
      convs.emplace_back(planes, out_, 1, 1, 0);
    } else {
      convs.emplace_back(in_channels, planes, 3, stride, 1);
      convs.emplace_back(planes, planes, 3, 1, 1);
    }
    for (const auto& c : convs) bns.emplace_back(c.params.out_channels());
    if (stride != 1 || in_channels != out_) {
      downsample_conv = Conv2d(in_channels, out_, 1, stride, 0);
      downsample_bn = BatchNorm2d(out_);
    }
    if (this->cwa && this->cwa->channels != out_)
      throw ConfigError("residual block: attention covers " + std::to_string(this->cwa->channels) +
                        " channels, block outputs " + std::to_string(out_));
  }

  BlockKind kind() const { return kind_; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int stride() const { return convs.at(kind_ == BlockKind::bottleneck ? 1 : 0).stride; }
  bool has_downsample() const { return downsample_conv.has_value(); }

  void init(std::mt19937_64& rng) {
    visit([&](LayerParams& p) { kaiming_init(p, rng); });
  }

  template <class F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      f(convs[i].params);
      f(bns[i].params);
    }
    if (cwa) cwa->visit(f);
    if (downsample_conv) {
      f(downsample_conv->params);
      f(downsample_bn->params);
    }
  }
  void collect(std::vector<Param*>& out) {
    visit([&](LayerParams& p) { p.collect(out); });
  }
  std::vector<Param*> parameters() {
    std::vector<Param*> out;
    collect(out);
    return out;
  }

  Tensor forward(const Tensor& x, Mode mode) {
    if (x.c() != in_)
      throw ConfigError("residual block: input has " + std::to_string(x.c()) +
                        " channels, plan expects " + std::to_string(in_));
    Tensor t = x;
    relu_out_.resize(convs.size());
    for (std::size_t i = 0; i < convs.size(); ++i) {
      t = bns[i].forward(convs[i].forward(t), mode);
      if (i + 1 < convs.size()) {
        t = relu(t);
        relu_out_[i] = t;
      }
    }
    if (cwa) t = cwa->forward(t, mode);
    const Tensor sc = downsample_conv
                          ? downsample_bn->forward(downsample_conv->forward(x), mode)
                          : x;
    require_same_shape(t, sc, "residual block shortcut");
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += sc[i];
    y_ = relu(t);
    return y_;
  }

  Tensor backward(const Tensor& gy) {
    const Tensor g = relu_backward(y_, gy);
    Tensor gt = cwa ? cwa->backward(g) : g;
    for (std::size_t i = convs.size(); i-- > 0;) {
      if (i + 1 < convs.size()) gt = relu_backward(relu_out_[i], gt);
      gt = convs[i].backward(bns[i].backward(gt));
    }
    const Tensor gs =
        downsample_conv ? downsample_conv->backward(downsample_bn->backward(g)) : g;
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += gs[i];
    return gt;
  }

  std::vector<Conv2d> convs;
  std::vector<BatchNorm2d> bns;
  std::optional<Conv2d> downsample_conv;
  std::optional<BatchNorm2d> downsample_bn;
  std::optional<CwaBlock> cwa;

 private:
  BlockKind kind_ = BlockKind::bottleneck;
  int in_ = 0, out_ = 0;
  std::vector<Tensor> relu_out_;
  Tensor y_;
};

/// Bottleneck with channel-wise attention on its residual branch.
using CwaBottleneck = ResidualBlock;

inline CwaBottleneck make_cwa_bottleneck(int in_channels, int planes, int stride, int reduction,
                                         Fusion fusion = Fusion::mul) {
  return CwaBottleneck(BlockKind::bottleneck, in_channels, planes, stride,
                       CwaBlock(planes * expansion(BlockKind::bottleneck), reduction, fusion));
}

inline Tensor cwa_bottleneck_forward(const Tensor& x, CwaBottleneck& block, Mode mode) {
  return block.forward(x, mode);
}

}  // namespace reidkit
