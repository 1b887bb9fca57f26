#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace dseal {

// Dense row-major float tensor. All model math in this project is f32;
// shapes follow the (batch, channel, height, width) convention for
// activations and (out, in, kh, kw) for conv weights.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.0f) {}
  Tensor(std::vector<int> s, float fill) : shape(std::move(s)), data(count(shape), fill) {}
  Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    assert(static_cast<int64_t>(data.size()) == count(shape));
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }
  float& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  void fill(float v) { std::fill(data.begin(), data.end(), v); }
  void zero() { fill(0.0f); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

bool all_finite(const Tensor& t);

}  // namespace dseal
