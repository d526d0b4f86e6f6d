#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace efb::nn {

/// Dense row-major shape; rank 0 denotes a scalar (numel 1).
using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

/// Plain value container used for parameters, buffers and tape nodes.
struct Tensor {
  Shape shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), v(static_cast<std::size_t>(numel(shape)), 0.0) {}
  Tensor(Shape s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {}

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double value) {
    Tensor t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), value);
    return t;
  }
  static Tensor scalar(double value) { return Tensor({}, {value}); }

  std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  void set_zero() { std::fill(v.begin(), v.end(), 0.0); }
};

/// A learnable tensor with its accumulated gradient.
struct Param {
  Tensor value;
  Tensor grad;

  Param() = default;
  explicit Param(Shape s) : value(s), grad(std::move(s)) {}

  void zero_grad() { grad.set_zero(); }
  std::int64_t size() const { return value.size(); }
};

}  // namespace efb::nn
