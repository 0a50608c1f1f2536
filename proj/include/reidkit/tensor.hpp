#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace reidkit {

/// Raised when shapes, channel plans or hyperparameters are inconsistent.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on bad input data (labels out of range, degenerate batches, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on non-finite values (divergence, failed gradient checks).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { train, eval };

struct Shape {
  int n = 1, c = 1, h = 1, w = 1;

  constexpr std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  constexpr std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
    return os.str();
  }
};

/// Dense N-C-H-W tensor of doubles, row-major. The gradient buffer is
/// allocated lazily and always matches the value buffer in length.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape_(s), values_(s.size(), fill) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
      throw ConfigError("tensor dims must be positive, got " + s.str());
  }
  Tensor(int n, int c, int h, int w, double fill = 0.0) : Tensor(Shape{n, c, h, w}, fill) {}
  Tensor(Shape s, std::vector<double> values) : shape_(s), values_(std::move(values)) {
    if (values_.size() != s.size())
      throw ConfigError("value count " + std::to_string(values_.size()) +
                        " does not match shape " + s.str());
  }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  double& at(int n, int c, int h, int w) { return values_[index(n, c, h, w)]; }
  double at(int n, int c, int h, int w) const { return values_[index(n, c, h, w)]; }

  bool has_grad() const { return !grad_.empty(); }
  std::span<double> grad() {
    if (grad_.empty()) grad_.assign(values_.size(), 0.0);
    return grad_;
  }
  std::span<const double> grad() const { return grad_; }

  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor reshaped(Shape s) const {
    if (s.size() != values_.size())
      throw ConfigError("cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(s, values_);
  }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<double> values_;
  std::vector<double> grad_;
};

/// Dense row-major matrix of doubles (distance matrices and the like).
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0)
      : rows(rows), cols(cols), values(static_cast<std::size_t>(rows) * cols, fill) {}
  double& operator()(int i, int j) { return values[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const {
    return values[static_cast<std::size_t>(i) * cols + j];
  }
  std::span<const double> row(int i) const {
    return std::span<const double>(values).subspan(static_cast<std::size_t>(i) * cols, cols);
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                      b.shape().str());
}

}  // namespace reidkit
