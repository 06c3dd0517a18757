#pragma once

#include <cstdint>
#include <vector>

#include "taskdiff/common.hpp"

namespace td {

// Dense row-major float32 array. Shapes follow [C,H,W] for images and [T,C]
// for token matrices. Value semantics; copies are explicit vector copies.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> v;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<float> data)
      : shape(std::move(s)), v(std::move(data)) {}

  static Tensor zeros(const std::vector<int>& s);
  static Tensor full(const std::vector<int>& s, float value);
  static Tensor scalar(float value) { return Tensor({}, {value}); }
  static Tensor randn(Rng& rng, const std::vector<int>& s, float stddev = 1.0f);

  int64_t size() const;
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const;
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  float& at(int i) { return v[static_cast<size_t>(i)]; }
  float at(int i) const { return v[static_cast<size_t>(i)]; }
  float& at(int i, int j);
  float at(int i, int j) const;
  float& at(int c, int y, int x);
  float at(int c, int y, int x) const;

  bool finite() const;
  float item() const;
};

int64_t numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Elementwise helpers on raw tensors (no autodiff); used by the schedule,
// sampler arithmetic and image pipelines.
Tensor t_add(const Tensor& a, const Tensor& b);
Tensor t_sub(const Tensor& a, const Tensor& b);
Tensor t_mul(const Tensor& a, const Tensor& b);
Tensor t_scale(const Tensor& a, float s);
Tensor t_axpy(float alpha, const Tensor& x, const Tensor& y);  // alpha*x + y
Tensor t_clamp(const Tensor& a, float lo, float hi);
Tensor t_abs(const Tensor& a);
float t_dot(const Tensor& a, const Tensor& b);
float t_norm(const Tensor& a);
float t_max_abs(const Tensor& a);
float t_mean(const Tensor& a);
// Mean of |a-b| over all elements.
float t_l1(const Tensor& a, const Tensor& b);
bool t_equal(const Tensor& a, const Tensor& b);

}  // namespace td
