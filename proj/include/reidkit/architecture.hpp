#pragma once

#include <array>
#include <cstdint>
#include <iostream>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "reidkit/attention.hpp"
#include "reidkit/numerics.hpp"

namespace reidkit {

enum class Variant { resnet18, resnet34, resnet50, resnet101 };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::resnet18: return "resnet18";
    case Variant::resnet34: return "resnet34";
    case Variant::resnet50: return "resnet50";
    case Variant::resnet101: return "resnet101";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "resnet18") return Variant::resnet18;
  if (s == "resnet34") return Variant::resnet34;
  if (s == "resnet50") return Variant::resnet50;
  if (s == "resnet101") return Variant::resnet101;
  throw ConfigError("unknown backbone variant '" + s + "'");
}

/// Channel-plan scale as an exact fraction.
struct WidthMultiplier {
  int num = 1;
  int den = 1;

  int scale(int channels) const {
    const long long v = static_cast<long long>(channels) * num;
    if (v % den != 0)
      throw ConfigError("width multiplier " + std::to_string(num) + "/" + std::to_string(den) +
                        " does not scale " + std::to_string(channels) + " channels to an integer");
    if (v / den < 1)
      throw ConfigError("width multiplier scales " + std::to_string(channels) +
                        " channels below 1");
    return static_cast<int>(v / den);
  }
  bool is_unit() const { return num == den; }
  friend bool operator==(const WidthMultiplier&, const WidthMultiplier&) = default;
};

/// Declarative backbone + head description.
struct ArchSpec {
  Variant variant = Variant::resnet50;
  WidthMultiplier width;
  std::set<int> attention_layers;  // subset of {1,2,3,4}
  Fusion fusion = Fusion::mul;
  int last_stride = 1;
  int num_classes = 751;
  int local_dim = 128;
  bool band_enabled = true;
  int reduction = 16;
  double dropout = 0.5;

  void validate() const {
    if (width.num < 1 || width.den < 1) throw ConfigError("width multiplier must be positive");
    for (int l : attention_layers)
      if (l < 1 || l > 4)
        throw ConfigError("attention layer index " + std::to_string(l) + " outside {1,2,3,4}");
    if (last_stride != 1 && last_stride != 2) throw ConfigError("last_stride must be 1 or 2");
    if (num_classes < 1) throw ConfigError("num_classes must be positive");
    if (local_dim < 1) throw ConfigError("local_dim must be positive");
    if (reduction < 1) throw ConfigError("reduction must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    stem_channels();
    for (int l = 0; l < 4; ++l) width.scale(kBasePlanes[l]);
  }

  static constexpr std::array<int, 4> kBasePlanes{64, 128, 256, 512};

  BlockKind block_kind() const {
    return variant == Variant::resnet18 || variant == Variant::resnet34 ? BlockKind::basic
                                                                        : BlockKind::bottleneck;
  }
  std::array<int, 4> blocks_per_layer() const {
    switch (variant) {
      case Variant::resnet18: return {2, 2, 2, 2};
      case Variant::resnet34:
      case Variant::resnet50: return {3, 4, 6, 3};
      case Variant::resnet101: return {3, 4, 23, 3};
    }
    return {0, 0, 0, 0};
  }
  int stem_channels() const { return width.scale(64); }
  int planes(int layer) const { return width.scale(kBasePlanes.at(layer - 1)); }
  int layer_stride(int layer) const { return layer == 1 ? 1 : layer == 4 ? last_stride : 2; }
  int global_dim() const { return planes(4) * expansion(block_kind()); }
};

/// Exact learnable-parameter count of the model `build(spec)` would produce:
/// backbone convs and BNs, attention blocks, classifier, local projection
/// and the BaND batchnorm. BN running statistics are not counted.
inline std::size_t count_params(const ArchSpec& spec) {
  spec.validate();
  using sz = std::size_t;
  const BlockKind kind = spec.block_kind();
  const sz stem = spec.stem_channels();
  sz total = 3 * stem * 49 + 2 * stem;
  sz in = stem;
  const auto blocks = spec.blocks_per_layer();
  for (int layer = 1; layer <= 4; ++layer) {
    const sz p = spec.planes(layer);
    const sz out = p * expansion(kind);
    for (int b = 0; b < blocks[layer - 1]; ++b) {
      const int stride = b == 0 ? spec.layer_stride(layer) : 1;
      if (kind == BlockKind::bottleneck)
        total += in * p + 2 * p + p * p * 9 + 2 * p + p * out + 2 * out;
      else
        total += in * p * 9 + 2 * p + p * p * 9 + 2 * p;
      if (stride != 1 || in != out) total += in * out + 2 * out;
      if (spec.attention_layers.contains(layer))
        total += cwa_param_count(static_cast<int>(out), spec.reduction);
      in = out;
    }
  }
  const sz g = spec.global_dim();
  if (spec.band_enabled) total += 2 * g;
  total += g * spec.num_classes + spec.num_classes;
  total += g * spec.local_dim + spec.local_dim;
  return total;
}

/// Closed-form attention overhead for a placement set: one block per
/// residual unit in each listed layer.
inline std::size_t attention_overhead(const ArchSpec& spec) {
  std::size_t total = 0;
  const auto blocks = spec.blocks_per_layer();
  for (int layer : spec.attention_layers) {
    const int out = spec.planes(layer) * expansion(spec.block_kind());
    total += blocks[layer - 1] * cwa_param_count(out, spec.reduction);
  }
  return total;
}

/// Final feature-map spatial dims for an input of (h, w).
inline std::pair<int, int> output_shape(const ArchSpec& spec, int input_h, int input_w) {
  const int factor = spec.last_stride == 2 ? 32 : 16;
  if (input_h < 1 || input_w < 1 || input_h % factor != 0 || input_w % factor != 0)
    throw ConfigError("input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                      " is not divisible by the total downsample factor " +
                      std::to_string(factor));
  int h = conv_out_dim(input_h, 7, 2, 3), w = conv_out_dim(input_w, 7, 2, 3);
  h = conv_out_dim(h, 3, 2, 1);
  w = conv_out_dim(w, 3, 2, 1);
  for (int layer = 1; layer <= 4; ++layer) {
    const int s = spec.layer_stride(layer);
    h = conv_out_dim(h, 3, s, 1);
    w = conv_out_dim(w, 3, s, 1);
  }
  return {h, w};
}

struct ForwardOutput {
  Tensor global_feat;  // (N, G, 1, 1), unit L2 rows
  Tensor local_feats;  // (N, local_dim, H', 1)
  Tensor logits;       // (N, num_classes, 1, 1)
};

/// Upstream gradients for a backward pass; empty tensors count as zero.
struct ForwardGrads {
  Tensor global_feat;
  Tensor local_feats;
  Tensor logits;
};

/// Row-wise L2 normalization of an (N, C, 1, 1) tensor.
inline Tensor l2_normalize_rows(const Tensor& v) {
  Tensor u(v.shape());
  const std::size_t d = static_cast<std::size_t>(v.c()) * v.h() * v.w();
  for (int n = 0; n < v.n(); ++n) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += v[n * d + i] * v[n * d + i];
    const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
    for (std::size_t i = 0; i < d; ++i) u[n * d + i] = v[n * d + i] * inv;
  }
  return u;
}

inline Tensor l2_normalize_rows_backward(const Tensor& v, const Tensor& gu) {
  require_same_shape(v, gu, "l2_normalize_rows_backward");
  Tensor gv(v.shape());
  const std::size_t d = static_cast<std::size_t>(v.c()) * v.h() * v.w();
  for (int n = 0; n < v.n(); ++n) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += v[n * d + i] * v[n * d + i];
    const double norm = std::max(std::sqrt(s), 1e-12);
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += v[n * d + i] / norm * gu[n * d + i];
    for (std::size_t i = 0; i < d; ++i)
      gv[n * d + i] = (gu[n * d + i] - v[n * d + i] / norm * dot) / norm;
  }
  return gv;
}

class Model;
std::pair<Tensor, Tensor> band_head(const Tensor& feature_map, Model& model, Mode mode,
                                    std::uint64_t seed);

/// ResNet backbone with a global branch (optional BaND, GAP, classifier,
/// L2-normalized retrieval feature) and a local branch (1x1 projection,
/// horizontal pooling).
class Model {
 public:
  Model() = default;
  explicit Model(const ArchSpec& spec) : spec_(spec) {
    spec.validate();
    const int stem = spec.stem_channels();
    stem_conv_ = Conv2d(3, stem, 7, 2, 3);
    stem_bn_ = BatchNorm2d(stem);
    int in = stem;
    const auto blocks = spec.blocks_per_layer();
    const BlockKind kind = spec.block_kind();
    for (int layer = 1; layer <= 4; ++layer) {
      const int p = spec.planes(layer);
      for (int b = 0; b < blocks[layer - 1]; ++b) {
        std::optional<CwaBlock> cwa;
        if (spec.attention_layers.contains(layer))
          cwa = CwaBlock(p * expansion(kind), spec.reduction, spec.fusion);
        blocks_.emplace_back(kind, in, p, b == 0 ? spec.layer_stride(layer) : 1, std::move(cwa));
        in = blocks_.back().out_channels();
      }
    }
    const int g = spec.global_dim();
    if (spec.band_enabled) band_bn_ = BatchNorm2d(g);
    classifier_ = Linear(g, spec.num_classes);
    local_proj_ = Conv2d(g, spec.local_dim, 1, 1, 0, true);
  }

  const ArchSpec& spec() const { return spec_; }
  std::size_t num_blocks() const { return blocks_.size(); }
  ResidualBlock& block(std::size_t i) { return blocks_.at(i); }

  /// Visits every layer's parameters in a fixed order.
  template <class F>
  void visit(F&& f) {
    f(stem_conv_.params);
    f(stem_bn_.params);
    for (auto& b : blocks_) b.visit(f);
    if (band_bn_) f(band_bn_->params);
    f(classifier_.params);
    f(local_proj_.params);
  }

  std::vector<Param*> parameters() {
    std::vector<Param*> out;
    visit([&](LayerParams& p) { p.collect(out); });
    return out;
  }
  std::size_t param_count() {
    std::size_t n = 0;
    for (Param* p : parameters()) n += p->size();
    return n;
  }
  void zero_grad() {
    for (Param* p : parameters()) p->zero_grad();
  }

  /// Backbone feature map f.
  Tensor backbone(const Tensor& images, Mode mode) {
    if (images.c() != 3)
      throw ConfigError("model: images must have 3 channels, got " + images.shape().str());
    output_shape(spec_, images.h(), images.w());
    Tensor t = stem_bn_.forward(stem_conv_.forward(images), mode);
    stem_relu_ = relu(t);
    t = max_pool2d(stem_relu_, 3, 2, 1, &pool_argmax_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      try {
        t = blocks_[i].forward(t, mode);
      } catch (const ConfigError& e) {
        throw ConfigError("block " + std::to_string(i) + ": " + e.what());
      }
    }
    return t;
  }

  ForwardOutput forward(const Tensor& images, Mode mode, std::uint64_t seed) {
    mode_ = mode;
    fmap_ = backbone(images, mode);
    auto [f_gap, f_n] = band_head(fmap_, *this, mode, seed);
    gvec_ = std::move(f_gap);
    ForwardOutput out;
    out.logits = classifier_.forward(gvec_);
    out.global_feat = l2_normalize_rows(gvec_);
    proj_ = local_proj_.forward(fmap_);
    out.local_feats = width_mean_pool(proj_);
    return out;
  }

  /// Accumulates parameter gradients for the last forward call and returns
  /// the gradient w.r.t. the input images.
  Tensor backward(const ForwardGrads& g) {
    const Shape vs = gvec_.shape();
    Tensor gvec(vs);
    if (!g.logits.empty()) {
      const Tensor t = classifier_.backward(g.logits);
      for (std::size_t i = 0; i < t.size(); ++i) gvec[i] += t[i];
    }
    if (!g.global_feat.empty()) {
      const Tensor t = l2_normalize_rows_backward(gvec_, g.global_feat);
      for (std::size_t i = 0; i < t.size(); ++i) gvec[i] += t[i];
    }
    Tensor gf;
    if (spec_.band_enabled) {
      if (!mask_.empty())
        for (std::size_t i = 0; i < gvec.size(); ++i) gvec[i] *= mask_[i];
      Tensor gn = global_avg_pool_backward(fmap_.shape(), gvec);
      gn = relu_backward(f_n_, gn);
      gf = band_bn_->backward(gn);
    } else {
      gf = global_avg_pool_backward(fmap_.shape(), gvec);
    }
    if (!g.local_feats.empty()) {
      const Tensor gp = width_mean_pool_backward(proj_.shape(), g.local_feats);
      const Tensor t = local_proj_.backward(gp);
      for (std::size_t i = 0; i < t.size(); ++i) gf[i] += t[i];
    }
    for (std::size_t i = blocks_.size(); i-- > 0;) gf = blocks_[i].backward(gf);
    gf = max_pool2d_backward(stem_relu_.shape(), pool_argmax_, gf);
    gf = relu_backward(stem_relu_, gf);
    return stem_conv_.backward(stem_bn_.backward(gf));
  }

 private:
  friend std::pair<Tensor, Tensor> band_head(const Tensor&, Model&, Mode, std::uint64_t);

  ArchSpec spec_;
  Conv2d stem_conv_;
  BatchNorm2d stem_bn_;
  std::vector<ResidualBlock> blocks_;
  std::optional<BatchNorm2d> band_bn_;
  Linear classifier_;
  Conv2d local_proj_;

  Mode mode_ = Mode::eval;
  Tensor stem_relu_;
  std::vector<std::size_t> pool_argmax_;
  Tensor fmap_, f_n_, gvec_, proj_, mask_;
};

/// BaND head: f_n = ReLU(BN(f)); f_gap = Dropout(GAP(f_n)). Dropout is
/// inverted (survivors scaled by 1/(1-p)) and only active in train mode.
/// Without BaND the head reduces to GAP(f).
inline std::pair<Tensor, Tensor> band_head(const Tensor& feature_map, Model& model, Mode mode,
                                           std::uint64_t seed) {
  model.mask_ = Tensor();
  if (!model.spec_.band_enabled) {
    model.f_n_ = feature_map;
    return {global_avg_pool(feature_map), feature_map};
  }
  model.f_n_ = relu(model.band_bn_->forward(feature_map, mode));
  Tensor gap = global_avg_pool(model.f_n_);
  if (mode == Mode::train && model.spec_.dropout > 0.0) {
    model.mask_ = dropout_mask(gap.shape(), model.spec_.dropout, seed);
    gap = elementwise(gap, model.mask_, ElementwiseOp::mul);
  }
  return {std::move(gap), model.f_n_};
}

/// Instantiates and deterministically initializes a model. Full-scale
/// widths are allowed but warned about.
inline Model build(const ArchSpec& spec, std::uint64_t seed) {
  const std::size_t expected = count_params(spec);
  if (expected > 5'000'000)
    std::clog << "warning: building " << expected
              << " parameters; training at this width is not desk-scale\n";
  Model m(spec);
  std::mt19937_64 rng(seed);
  m.visit([&](LayerParams& p) { kaiming_init(p, rng); });
  return m;
}

}  // namespace reidkit
