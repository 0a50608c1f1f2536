#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "reidkit/tensor.hpp"

namespace reidkit {

/// A learnable array with its accumulated gradient.
struct Param {
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  explicit Param(std::size_t n, double fill = 0.0) : value(n, fill), grad(n, 0.0) {}
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

enum class LayerKind { conv, linear, batchnorm };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::linear: return "linear";
    case LayerKind::batchnorm: return "batchnorm";
  }
  return "?";
}

/// Parameters of one conv, linear or batchnorm layer.
///
/// conv:      dims = {out, in, k, k}, weight out*in*k*k, optional bias out
/// linear:    dims = {out, in},       weight out*in, bias out
/// batchnorm: dims = {C},             weight = gamma, bias = beta, plus
///            non-learnable running statistics
struct LayerParams {
  LayerKind kind = LayerKind::linear;
  std::vector<int> dims;
  Param weight;
  Param bias;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;

  static LayerParams conv(int out, int in, int k, bool with_bias = false) {
    if (out < 1 || in < 1 || k < 1)
      throw ConfigError("conv dims must be positive");
    LayerParams p;
    p.kind = LayerKind::conv;
    p.dims = {out, in, k, k};
    p.weight = Param(static_cast<std::size_t>(out) * in * k * k);
    if (with_bias) p.bias = Param(out);
    return p;
  }
  static LayerParams linear(int out, int in) {
    if (out < 1 || in < 1) throw ConfigError("linear dims must be positive");
    LayerParams p;
    p.kind = LayerKind::linear;
    p.dims = {out, in};
    p.weight = Param(static_cast<std::size_t>(out) * in);
    p.bias = Param(out);
    return p;
  }
  static LayerParams batchnorm(int channels) {
    if (channels < 1) throw ConfigError("batchnorm channels must be positive");
    LayerParams p;
    p.kind = LayerKind::batchnorm;
    p.dims = {channels};
    p.weight = Param(channels, 1.0);
    p.bias = Param(channels, 0.0);
    p.running_mean.assign(channels, 0.0);
    p.running_var.assign(channels, 1.0);
    return p;
  }

  int out_channels() const { return dims.at(0); }
  int in_channels() const { return kind == LayerKind::batchnorm ? dims.at(0) : dims.at(1); }
  int kernel() const { return kind == LayerKind::conv ? dims.at(2) : 1; }
  bool has_bias() const { return !bias.value.empty(); }

  std::size_t learnable_count() const { return weight.size() + bias.size(); }

  void validate() const {
    std::size_t expect = 1;
    for (int d : dims) expect *= static_cast<std::size_t>(d);
    if (weight.size() != expect)
      throw ConfigError(std::string(to_string(kind)) + " weight length " +
                        std::to_string(weight.size()) + " != declared " + std::to_string(expect));
    if (kind == LayerKind::batchnorm) {
      const auto c = static_cast<std::size_t>(dims[0]);
      if (bias.size() != c || running_mean.size() != c || running_var.size() != c)
        throw ConfigError("batchnorm per-channel arrays must have length " + std::to_string(c));
      for (double v : running_var)
        if (!(v > 0.0)) throw ConfigError("batchnorm running_var must be strictly positive");
    } else if (has_bias() && bias.size() != static_cast<std::size_t>(dims[0])) {
      throw ConfigError("bias length must equal output channels");
    }
  }

  void zero_grad() {
    weight.zero_grad();
    bias.zero_grad();
  }
  void collect(std::vector<Param*>& out) {
    out.push_back(&weight);
    if (!bias.value.empty()) out.push_back(&bias);
  }
};

/// Kaiming fan-in normal initialization for conv/linear; BN gets gamma 1, beta 0.
inline void kaiming_init(LayerParams& p, std::mt19937_64& rng) {
  if (p.kind == LayerKind::batchnorm) {
    std::fill(p.weight.value.begin(), p.weight.value.end(), 1.0);
    std::fill(p.bias.value.begin(), p.bias.value.end(), 0.0);
    return;
  }
  const int fan_in = p.in_channels() * p.kernel() * p.kernel();
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (double& v : p.weight.value) v = dist(rng);
  std::fill(p.bias.value.begin(), p.bias.value.end(), 0.0);
}

// ---------------------------------------------------------------------------
// conv2d

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// col has (Cin*k*k) rows of (OH*OW) entries.
inline void im2col(const double* x, int cin, int h, int w, int k, int stride, int pad, int oh,
                   int ow, double* col) {
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < cin; ++ci) {
    const double* xc = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          double* dst = row + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im(const double* col, int cin, int h, int w, int k, int stride, int pad, int oh,
                   int ow, double* gx) {
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < cin; ++ci) {
    double* gc = gx + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * ow;
          double* dst = gc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline void check_conv(const Shape& s, const LayerParams& p, int stride, int pad) {
  if (p.kind != LayerKind::conv) throw ConfigError("conv2d: params are not conv");
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
  if (s.c != p.in_channels())
    throw ConfigError("conv2d: input has " + std::to_string(s.c) + " channels, kernel expects " +
                      std::to_string(p.in_channels()));
  const int k = p.kernel();
  if (s.h + 2 * pad < k || s.w + 2 * pad < k)
    throw ConfigError("conv2d: kernel " + std::to_string(k) + " does not fit padded input " +
                      s.str() + " with padding " + std::to_string(pad));
}

inline bool is_pointwise(const LayerParams& p, int stride, int pad) {
  return p.kernel() == 1 && stride == 1 && pad == 0;
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const LayerParams& p, int stride, int pad) {
  detail::check_conv(x.shape(), p, stride, pad);
  const int k = p.kernel(), cin = x.c(), cout = p.out_channels();
  const int oh = conv_out_dim(x.h(), k, stride, pad);
  const int ow = conv_out_dim(x.w(), k, stride, pad);
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  const std::size_t kk = static_cast<std::size_t>(cin) * k * k;
  Tensor y(x.n(), cout, oh, ow);
  std::vector<double> col;
  const bool pointwise = detail::is_pointwise(p, stride, pad);
  if (!pointwise) col.resize(kk * plane);
  for (int n = 0; n < x.n(); ++n) {
    const double* xn = x.data() + static_cast<std::size_t>(n) * cin * x.shape().plane();
    const double* cm = xn;
    if (!pointwise) {
      detail::im2col(xn, cin, x.h(), x.w(), k, stride, pad, oh, ow, col.data());
      cm = col.data();
    }
    double* yn = y.data() + static_cast<std::size_t>(n) * cout * plane;
    for (int co = 0; co < cout; ++co) {
      double* yr = yn + co * plane;
      const double b = p.has_bias() ? p.bias.value[co] : 0.0;
      std::fill(yr, yr + plane, b);
      const double* wr = p.weight.value.data() + co * kk;
      for (std::size_t r = 0; r < kk; ++r) {
        const double wv = wr[r];
        const double* cr = cm + r * plane;
        for (std::size_t q = 0; q < plane; ++q) yr[q] += wv * cr[q];
      }
    }
  }
  return y;
}

/// Accumulates weight/bias gradients into `p` and returns the input gradient.
inline Tensor conv2d_backward(const Tensor& x, LayerParams& p, int stride, int pad,
                              const Tensor& gy) {
  detail::check_conv(x.shape(), p, stride, pad);
  const int k = p.kernel(), cin = x.c(), cout = p.out_channels();
  const int oh = conv_out_dim(x.h(), k, stride, pad);
  const int ow = conv_out_dim(x.w(), k, stride, pad);
  if (gy.shape() != Shape{x.n(), cout, oh, ow})
    throw ConfigError("conv2d_backward: upstream grad shape " + gy.shape().str());
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  const std::size_t kk = static_cast<std::size_t>(cin) * k * k;
  const bool pointwise = detail::is_pointwise(p, stride, pad);
  Tensor gx(x.shape());
  std::vector<double> col(pointwise ? 0 : kk * plane);
  std::vector<double> gcol(kk * plane);
  for (int n = 0; n < x.n(); ++n) {
    const double* xn = x.data() + static_cast<std::size_t>(n) * cin * x.shape().plane();
    const double* cm = xn;
    if (!pointwise) {
      detail::im2col(xn, cin, x.h(), x.w(), k, stride, pad, oh, ow, col.data());
      cm = col.data();
    }
    const double* gn = gy.data() + static_cast<std::size_t>(n) * cout * plane;
    std::fill(gcol.begin(), gcol.end(), 0.0);
    for (int co = 0; co < cout; ++co) {
      const double* gr = gn + co * plane;
      if (p.has_bias()) {
        double s = 0.0;
        for (std::size_t q = 0; q < plane; ++q) s += gr[q];
        p.bias.grad[co] += s;
      }
      const double* wr = p.weight.value.data() + co * kk;
      double* gw = p.weight.grad.data() + co * kk;
      for (std::size_t r = 0; r < kk; ++r) {
        const double* cr = cm + r * plane;
        double* gc = gcol.data() + r * plane;
        const double wv = wr[r];
        double s = 0.0;
        for (std::size_t q = 0; q < plane; ++q) {
          s += gr[q] * cr[q];
          gc[q] += wv * gr[q];
        }
        gw[r] += s;
      }
    }
    double* gxn = gx.data() + static_cast<std::size_t>(n) * cin * x.shape().plane();
    if (pointwise)
      std::copy(gcol.begin(), gcol.end(), gxn);
    else
      detail::col2im(gcol.data(), cin, x.h(), x.w(), k, stride, pad, oh, ow, gxn);
  }
  return gx;
}

// ---------------------------------------------------------------------------
// linear

inline void check_linear(const Tensor& x, const LayerParams& p) {
  if (p.kind != LayerKind::linear) throw ConfigError("linear: params are not linear");
  if (x.h() != 1 || x.w() != 1)
    throw ConfigError("linear: input must be vector-shaped (N, C, 1, 1), got " + x.shape().str());
  if (x.c() != p.in_channels())
    throw ConfigError("linear: input dim " + std::to_string(x.c()) + " != weight columns " +
                      std::to_string(p.in_channels()));
}

inline Tensor linear(const Tensor& x, const LayerParams& p) {
  check_linear(x, p);
  const int in = p.in_channels(), out = p.out_channels();
  Tensor y(x.n(), out, 1, 1);
  for (int n = 0; n < x.n(); ++n) {
    const double* xn = x.data() + static_cast<std::size_t>(n) * in;
    for (int o = 0; o < out; ++o) {
      const double* wr = p.weight.value.data() + static_cast<std::size_t>(o) * in;
      double s = p.bias.value[o];
      for (int i = 0; i < in; ++i) s += wr[i] * xn[i];
      y[static_cast<std::size_t>(n) * out + o] = s;
    }
  }
  return y;
}

inline Tensor linear_backward(const Tensor& x, LayerParams& p, const Tensor& gy) {
  check_linear(x, p);
  const int in = p.in_channels(), out = p.out_channels();
  if (gy.shape() != Shape{x.n(), out, 1, 1})
    throw ConfigError("linear_backward: upstream grad shape " + gy.shape().str());
  Tensor gx(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    const double* xn = x.data() + static_cast<std::size_t>(n) * in;
    double* gxn = gx.data() + static_cast<std::size_t>(n) * in;
    for (int o = 0; o < out; ++o) {
      const double g = gy[static_cast<std::size_t>(n) * out + o];
      p.bias.grad[o] += g;
      const double* wr = p.weight.value.data() + static_cast<std::size_t>(o) * in;
      double* gw = p.weight.grad.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) {
        gw[i] += g * xn[i];
        gxn[i] += g * wr[i];
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// batch norm

namespace detail {

inline void check_bn(const Tensor& x, const LayerParams& p) {
  if (p.kind != LayerKind::batchnorm) throw ConfigError("batch_norm: params are not batchnorm");
  if (x.c() != p.dims.at(0))
    throw ConfigError("batch_norm: input has " + std::to_string(x.c()) +
                      " channels, params cover " + std::to_string(p.dims.at(0)));
}

struct ChannelStats {
  std::vector<double> mean, var;  // biased variance
};

inline ChannelStats channel_stats(const Tensor& x) {
  const int C = x.c();
  const std::size_t plane = x.shape().plane();
  const double m = static_cast<double>(x.n()) * plane;
  ChannelStats s{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  for (int c = 0; c < C; ++c) {
    double sum = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      const double* p = x.data() + x.index(n, c, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) sum += p[q];
    }
    const double mean = sum / m;
    double sq = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      const double* p = x.data() + x.index(n, c, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) sq += (p[q] - mean) * (p[q] - mean);
    }
    s.mean[c] = mean;
    s.var[c] = sq / m;
  }
  return s;
}

}  // namespace detail

/// Train mode normalizes with batch statistics and updates the running
/// statistics in `p`; eval mode uses the running statistics.
inline Tensor batch_norm(const Tensor& x, LayerParams& p, Mode mode) {
  detail::check_bn(x, p);
  const int C = x.c();
  const std::size_t plane = x.shape().plane();
  std::vector<double> mean, inv(C);
  if (mode == Mode::train) {
    auto st = detail::channel_stats(x);
    const double m = static_cast<double>(x.n()) * plane;
    for (int c = 0; c < C; ++c) {
      inv[c] = 1.0 / std::sqrt(st.var[c] + p.epsilon);
      const double unbiased = m > 1 ? st.var[c] * m / (m - 1) : st.var[c];
      p.running_mean[c] = (1 - p.momentum) * p.running_mean[c] + p.momentum * st.mean[c];
      p.running_var[c] = (1 - p.momentum) * p.running_var[c] + p.momentum * unbiased;
    }
    mean = std::move(st.mean);
  } else {
    mean = p.running_mean;
    for (int c = 0; c < C; ++c) inv[c] = 1.0 / std::sqrt(p.running_var[c] + p.epsilon);
  }
  Tensor y(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < C; ++c) {
      const double a = p.weight.value[c] * inv[c];
      const double b = p.bias.value[c] - a * mean[c];
      const std::size_t off = x.index(n, c, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) y[off + q] = a * x[off + q] + b;
    }
  }
  return y;
}

/// Backward of batch_norm given the forward input. In train mode the batch
/// statistics are recomputed from `x`.
inline Tensor batch_norm_backward(const Tensor& x, LayerParams& p, Mode mode, const Tensor& gy) {
  detail::check_bn(x, p);
  require_same_shape(x, gy, "batch_norm_backward");
  const int C = x.c();
  const std::size_t plane = x.shape().plane();
  const double m = static_cast<double>(x.n()) * plane;
  Tensor gx(x.shape());
  std::vector<double> mean(C), inv(C);
  if (mode == Mode::train) {
    auto st = detail::channel_stats(x);
    for (int c = 0; c < C; ++c) {
      mean[c] = st.mean[c];
      inv[c] = 1.0 / std::sqrt(st.var[c] + p.epsilon);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = p.running_mean[c];
      inv[c] = 1.0 / std::sqrt(p.running_var[c] + p.epsilon);
    }
  }
  for (int c = 0; c < C; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      const std::size_t off = x.index(n, c, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) {
        const double xh = (x[off + q] - mean[c]) * inv[c];
        sum_g += gy[off + q];
        sum_gx += gy[off + q] * xh;
      }
    }
    p.weight.grad[c] += sum_gx;
    p.bias.grad[c] += sum_g;
    const double gamma = p.weight.value[c];
    for (int n = 0; n < x.n(); ++n) {
      const std::size_t off = x.index(n, c, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) {
        if (mode == Mode::train) {
          const double xh = (x[off + q] - mean[c]) * inv[c];
          gx[off + q] = gamma * inv[c] / m * (m * gy[off + q] - sum_g - xh * sum_gx);
        } else {
          gx[off + q] = gamma * inv[c] * gy[off + q];
        }
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// activations

inline Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

/// `y` is the forward output.
inline Tensor relu_backward(const Tensor& y, const Tensor& gy) {
  require_same_shape(y, gy, "relu_backward");
  Tensor gx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) gx[i] = y[i] > 0.0 ? gy[i] : 0.0;
  return gx;
}

inline double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
  return y;
}

/// `y` is the forward output.
inline Tensor sigmoid_backward(const Tensor& y, const Tensor& gy) {
  require_same_shape(y, gy, "sigmoid_backward");
  Tensor gx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) gx[i] = gy[i] * y[i] * (1.0 - y[i]);
  return gx;
}

// ---------------------------------------------------------------------------
// pooling

inline Tensor global_avg_pool(const Tensor& x) {
  Tensor y(x.n(), x.c(), 1, 1);
  const std::size_t plane = x.shape().plane();
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const std::size_t off = x.index(n, c, 0, 0);
      double s = 0.0;
      for (std::size_t q = 0; q < plane; ++q) s += x[off + q];
      y[static_cast<std::size_t>(n) * x.c() + c] = s / static_cast<double>(plane);
    }
  return y;
}

inline Tensor global_avg_pool_backward(const Shape& in, const Tensor& gy) {
  if (gy.shape() != Shape{in.n, in.c, 1, 1})
    throw ConfigError("global_avg_pool_backward: upstream grad shape " + gy.shape().str());
  Tensor gx(in);
  const std::size_t plane = in.plane();
  for (int n = 0; n < in.n; ++n)
    for (int c = 0; c < in.c; ++c) {
      const double g = gy[static_cast<std::size_t>(n) * in.c + c] / static_cast<double>(plane);
      const std::size_t off = gx.index(n, c, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) gx[off + q] = g;
    }
  return gx;
}

/// Max pooling; `argmax` receives the flat input index chosen for each output.
inline Tensor max_pool2d(const Tensor& x, int k, int stride, int pad,
                         std::vector<std::size_t>* argmax = nullptr) {
  const int oh = conv_out_dim(x.h(), k, stride, pad);
  const int ow = conv_out_dim(x.w(), k, stride, pad);
  if (oh < 1 || ow < 1) throw ConfigError("max_pool2d: window does not fit " + x.shape().str());
  Tensor y(x.n(), x.c(), oh, ow);
  if (argmax) argmax->assign(y.size(), 0);
  std::size_t o = 0;
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = 0;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= x.h()) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= x.w()) continue;
              const std::size_t i = x.index(n, c, iy, ix);
              if (x[i] > best) {
                best = x[i];
                best_i = i;
              }
            }
          }
          y[o] = best;
          if (argmax) (*argmax)[o] = best_i;
        }
  return y;
}

inline Tensor max_pool2d_backward(const Shape& in, const std::vector<std::size_t>& argmax,
                                  const Tensor& gy) {
  if (argmax.size() != gy.size()) throw ConfigError("max_pool2d_backward: index size mismatch");
  Tensor gx(in);
  for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax[o]] += gy[o];
  return gx;
}

/// Mean over the width axis: (N, C, H, W) -> (N, C, H, 1).
inline Tensor width_mean_pool(const Tensor& x) {
  Tensor y(x.n(), x.c(), x.h(), 1);
  for (std::size_t r = 0; r < y.size(); ++r) {
    const double* row = x.data() + r * x.w();
    double s = 0.0;
    for (int j = 0; j < x.w(); ++j) s += row[j];
    y[r] = s / x.w();
  }
  return y;
}

inline Tensor width_mean_pool_backward(const Shape& in, const Tensor& gy) {
  if (gy.shape() != Shape{in.n, in.c, in.h, 1})
    throw ConfigError("width_mean_pool_backward: upstream grad shape " + gy.shape().str());
  Tensor gx(in);
  for (std::size_t r = 0; r < gy.size(); ++r)
    for (int j = 0; j < in.w; ++j) gx[r * in.w + j] = gy[r] / in.w;
  return gx;
}

// ---------------------------------------------------------------------------
// elementwise

enum class ElementwiseOp { mul, add };
enum class Broadcast { none, per_channel };

namespace detail {
inline void check_elementwise(const Tensor& a, const Tensor& b, Broadcast bc) {
  if (bc == Broadcast::none) {
    require_same_shape(a, b, "elementwise");
  } else if (b.shape() != Shape{a.n(), a.c(), 1, 1}) {
    throw ConfigError("elementwise: per-channel operand must be " +
                      Shape{a.n(), a.c(), 1, 1}.str() + ", got " + b.shape().str());
  }
}
}  // namespace detail

inline Tensor elementwise(const Tensor& a, const Tensor& b, ElementwiseOp op,
                          Broadcast bc = Broadcast::none) {
  detail::check_elementwise(a, b, bc);
  Tensor y(a.shape());
  const std::size_t plane = bc == Broadcast::none ? 1 : a.shape().plane();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double bv = b[i / plane];
    y[i] = op == ElementwiseOp::mul ? a[i] * bv : a[i] + bv;
  }
  return y;
}

/// Returns {grad_a, grad_b}; broadcast dimensions are summed into grad_b.
inline std::pair<Tensor, Tensor> elementwise_backward(const Tensor& a, const Tensor& b,
                                                      ElementwiseOp op, Broadcast bc,
                                                      const Tensor& gy) {
  detail::check_elementwise(a, b, bc);
  require_same_shape(a, gy, "elementwise_backward");
  Tensor ga(a.shape()), gb(b.shape());
  const std::size_t plane = bc == Broadcast::none ? 1 : a.shape().plane();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::size_t j = i / plane;
    if (op == ElementwiseOp::mul) {
      ga[i] = gy[i] * b[j];
      gb[j] += gy[i] * a[i];
    } else {
      ga[i] = gy[i];
      gb[j] += gy[i];
    }
  }
  return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------------------
// dropout

/// Inverted-dropout mask: each entry is 0 with probability p, else 1/(1-p).
inline Tensor dropout_mask(const Shape& s, double p, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  Tensor mask(s);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? scale : 0.0;
  return mask;
}

// ---------------------------------------------------------------------------
// stateful wrappers that cache their input for backward

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in, int out, int k, int stride, int pad, bool bias = false)
      : params(LayerParams::conv(out, in, k, bias)), stride(stride), pad(pad) {}

  Tensor forward(const Tensor& x) {
    in_ = x;
    return conv2d(x, params, stride, pad);
  }
  Tensor backward(const Tensor& gy) { return conv2d_backward(in_, params, stride, pad, gy); }

  LayerParams params;
  int stride = 1;
  int pad = 0;

 private:
  Tensor in_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int c) : params(LayerParams::batchnorm(c)) {}

  Tensor forward(const Tensor& x, Mode mode) {
    in_ = x;
    mode_ = mode;
    return batch_norm(x, params, mode);
  }
  Tensor backward(const Tensor& gy) { return batch_norm_backward(in_, params, mode_, gy); }

  LayerParams params;

 private:
  Tensor in_;
  Mode mode_ = Mode::train;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in, int out) : params(LayerParams::linear(out, in)) {}

  Tensor forward(const Tensor& x) {
    in_ = x;
    return linear(x, params);
  }
  Tensor backward(const Tensor& gy) { return linear_backward(in_, params, gy); }

  LayerParams params;

 private:
  Tensor in_;
};

}  // namespace reidkit
