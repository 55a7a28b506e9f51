#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

namespace rigidreg::ad {

// Dense row-major tensor of doubles. Shapes are small and fixed per graph;
// rank 0 (scalar) through rank 3 are used.
struct Tensor {
  std::vector<int> dims;
  std::vector<double> data;

  Tensor() = default;

  static Tensor zeros(std::vector<int> d) {
    Tensor t;
    t.dims = std::move(d);
    t.data.assign(static_cast<size_t>(count(t.dims)), 0.0);
    return t;
  }

  static Tensor scalar(double v) {
    Tensor t;
    t.data.assign(1, v);
    return t;
  }

  static int64_t count(const std::vector<int>& dims) {
    int64_t n = 1;
    for (int d : dims) n *= d;
    return n;
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(dims.size()); }
  int dim(int i) const { return dims[static_cast<size_t>(i)]; }

  double& operator()(int i) { return data[static_cast<size_t>(i)]; }
  double operator()(int i) const { return data[static_cast<size_t>(i)]; }
  double& operator()(int i, int j) { return data[static_cast<size_t>(i * dims[1] + j)]; }
  double operator()(int i, int j) const { return data[static_cast<size_t>(i * dims[1] + j)]; }
  double& operator()(int i, int j, int k) {
    return data[static_cast<size_t>((i * dims[1] + j) * dims[2] + k)];
  }
  double operator()(int i, int j, int k) const {
    return data[static_cast<size_t>((i * dims[1] + j) * dims[2] + k)];
  }

  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Ordered by name so that iteration (serialization, gradient reduction,
// optimizer updates) is deterministic.
using TensorMap = std::map<std::string, Tensor>;

}  // namespace rigidreg::ad
