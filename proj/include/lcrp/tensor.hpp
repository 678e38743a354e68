#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lcrp/errors.hpp"

namespace lcrp {

// Dimension sizes, channel-major: (C), (N, K) or (C, H, W).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims) : dims_(dims) {}
  explicit Shape(std::vector<int> dims) : dims_(std::move(dims)) {}

  int rank() const noexcept { return static_cast<int>(dims_.size()); }
  int operator[](int i) const { return dims_.at(static_cast<std::size_t>(i)); }
  const std::vector<int>& dims() const noexcept { return dims_; }

  std::size_t numel() const noexcept {
    if (dims_.empty()) return 0;
    std::size_t n = 1;
    for (int d : dims_) n *= static_cast<std::size_t>(d);
    return n;
  }

  // Leading axis is the channel axis; the remaining axes form the spatial extent.
  int channels() const noexcept { return dims_.empty() ? 0 : dims_[0]; }
  std::size_t spatial() const noexcept {
    return dims_.empty() ? 0 : numel() / static_cast<std::size_t>(dims_[0]);
  }
  int height() const noexcept { return rank() == 3 ? dims_[1] : 1; }
  int width() const noexcept { return rank() == 3 ? dims_[2] : 1; }

  std::string str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ')';
    return os.str();
  }

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<int> dims_;
};

// Dense row-major float32 array.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(shape_.numel(), fill) {}
  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  const std::vector<float>& vec() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  float at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  // Contiguous view of one channel (all spatial positions).
  std::span<float> channel(int c) {
    const auto n = shape_.spatial();
    return {data_.data() + static_cast<std::size_t>(c) * n, n};
  }
  std::span<const float> channel(int c) const {
    const auto n = shape_.spatial();
    return {data_.data() + static_cast<std::size_t>(c) * n, n};
  }

  Tensor reshaped(Shape s) const {
    if (s.numel() != size()) throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(std::move(s), data_);
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(float s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  double sum() const {
    double s = 0.0;
    for (float v : data_) s += v;
    return s;
  }
  float max_abs() const {
    float m = 0.0f;
    for (float v : data_) m = std::max(m, std::fabs(v));
    return m;
  }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * static_cast<std::size_t>(shape_.height()) +
            static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(shape_.width()) +
           static_cast<std::size_t>(x);
  }
  void require_same(const Tensor& o, const char* op) const {
    if (!(shape_ == o.shape_))
      throw ShapeError(std::string("operand shapes differ for ") + op + ": " + shape_.str() +
                       " vs " + o.shape_.str());
  }

  Shape shape_;
  std::vector<float> data_;
};

// Maximum elementwise absolute difference; shapes must match.
inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape()))
    throw ShapeError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

// Per-channel spatial sum.
inline std::vector<double> channel_sums(const Tensor& t) {
  std::vector<double> out(static_cast<std::size_t>(t.shape().channels()), 0.0);
  for (int c = 0; c < t.shape().channels(); ++c) {
    double s = 0.0;
    for (float v : t.channel(c)) s += v;
    out[static_cast<std::size_t>(c)] = s;
  }
  return out;
}

}  // namespace lcrp
