#include "taskdiff/tensor.hpp"

#include <cmath>
#include <sstream>

namespace td {

int64_t numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(const std::vector<int>& s) {
  return Tensor(s, std::vector<float>(static_cast<size_t>(numel(s)), 0.0f));
}

Tensor Tensor::full(const std::vector<int>& s, float value) {
  return Tensor(s, std::vector<float>(static_cast<size_t>(numel(s)), value));
}

Tensor Tensor::randn(Rng& rng, const std::vector<int>& s, float stddev) {
  Tensor t = zeros(s);
  for (auto& x : t.v) x = static_cast<float>(rng.normal()) * stddev;
  return t;
}

int64_t Tensor::size() const { return numel(shape); }

int Tensor::dim(int i) const {
  TD_CHECK(i >= 0 && i < rank(), "bad_dim", "dim index out of range");
  return shape[static_cast<size_t>(i)];
}

float& Tensor::at(int i, int j) {
  return v[static_cast<size_t>(i) * shape[1] + j];
}
float Tensor::at(int i, int j) const {
  return v[static_cast<size_t>(i) * shape[1] + j];
}
float& Tensor::at(int c, int y, int x) {
  return v[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
}
float Tensor::at(int c, int y, int x) const {
  return v[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
}

bool Tensor::finite() const {
  for (float x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

float Tensor::item() const {
  TD_CHECK(v.size() == 1, "not_scalar", "item() on tensor of size " + std::to_string(v.size()));
  return v[0];
}

static void check_same(const Tensor& a, const Tensor& b, const char* op) {
  TD_CHECK(a.shape == b.shape, "shape_mismatch",
           std::string(op) + ": " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

Tensor t_add(const Tensor& a, const Tensor& b) {
  check_same(a, b, "t_add");
  Tensor out = a;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
  return out;
}

Tensor t_sub(const Tensor& a, const Tensor& b) {
  check_same(a, b, "t_sub");
  Tensor out = a;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= b.v[i];
  return out;
}

Tensor t_mul(const Tensor& a, const Tensor& b) {
  check_same(a, b, "t_mul");
  Tensor out = a;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.v[i];
  return out;
}

Tensor t_scale(const Tensor& a, float s) {
  Tensor out = a;
  for (auto& x : out.v) x *= s;
  return out;
}

Tensor t_axpy(float alpha, const Tensor& x, const Tensor& y) {
  check_same(x, y, "t_axpy");
  Tensor out = y;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += alpha * x.v[i];
  return out;
}

Tensor t_clamp(const Tensor& a, float lo, float hi) {
  Tensor out = a;
  for (auto& x : out.v) x = x < lo ? lo : (x > hi ? hi : x);
  return out;
}

Tensor t_abs(const Tensor& a) {
  Tensor out = a;
  for (auto& x : out.v) x = std::fabs(x);
  return out;
}

float t_dot(const Tensor& a, const Tensor& b) {
  check_same(a, b, "t_dot");
  double s = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i)
    s += static_cast<double>(a.v[i]) * static_cast<double>(b.v[i]);
  return static_cast<float>(s);
}

float t_norm(const Tensor& a) {
  double s = 0.0;
  for (float x : a.v) s += static_cast<double>(x) * static_cast<double>(x);
  return static_cast<float>(std::sqrt(s));
}

float t_max_abs(const Tensor& a) {
  float m = 0.0f;
  for (float x : a.v) m = std::max(m, std::fabs(x));
  return m;
}

float t_mean(const Tensor& a) {
  TD_CHECK(!a.v.empty(), "empty_tensor", "t_mean of empty tensor");
  double s = 0.0;
  for (float x : a.v) s += x;
  return static_cast<float>(s / static_cast<double>(a.v.size()));
}

float t_l1(const Tensor& a, const Tensor& b) {
  check_same(a, b, "t_l1");
  double s = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) s += std::fabs(static_cast<double>(a.v[i]) - b.v[i]);
  return static_cast<float>(s / static_cast<double>(a.v.size()));
}

bool t_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.v == b.v;
}

}  // namespace td
