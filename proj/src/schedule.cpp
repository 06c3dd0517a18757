#include "taskdiff/schedule.hpp"

#include <cmath>

namespace td {

PredKind pred_kind_from_string(const std::string& s) {
  if (s == "epsilon") return PredKind::epsilon;
  if (s == "v") return PredKind::v;
  if (s == "sample") return PredKind::sample;
  fail("bad_arg", "unknown prediction kind '" + s + "' (epsilon|v|sample)");
}

std::string to_string(PredKind k) {
  switch (k) {
    case PredKind::epsilon: return "epsilon";
    case PredKind::v: return "v";
    case PredKind::sample: return "sample";
  }
  return "?";
}

void DiffusionSchedule::check_t(int t, const char* where) const {
  TD_CHECK(t >= 0 && t < T, "bad_timestep",
           std::string(where) + ": t=" + std::to_string(t) + " outside [0," +
               std::to_string(T) + ")");
}

double DiffusionSchedule::alpha_bar(int t) const {
  check_t(t, "alpha_bar");
  return alpha_bars[static_cast<size_t>(t)];
}

double DiffusionSchedule::snr(int t) const {
  double ab = alpha_bar(t);
  if (ab <= 0.0) return 0.0;
  return ab / (1.0 - ab);
}

DiffusionSchedule make_linear_schedule(int T, double beta_min, double beta_max) {
  TD_CHECK(T >= 2, "bad_arg", "schedule needs at least 2 steps");
  TD_CHECK(beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max, "bad_arg",
           "schedule: betas must satisfy 0 < beta_min <= beta_max < 1");
  DiffusionSchedule s;
  s.T = T;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.betas.resize(static_cast<size_t>(T));
  s.alphas.resize(static_cast<size_t>(T));
  s.alpha_bars.resize(static_cast<size_t>(T));
  double ab = 1.0;
  for (int t = 0; t < T; ++t) {
    double beta = beta_min + (beta_max - beta_min) * static_cast<double>(t) / (T - 1);
    s.betas[static_cast<size_t>(t)] = beta;
    s.alphas[static_cast<size_t>(t)] = 1.0 - beta;
    ab *= 1.0 - beta;
    s.alpha_bars[static_cast<size_t>(t)] = ab;
  }
  return s;
}

DiffusionSchedule rescale_zero_terminal_snr(const DiffusionSchedule& in) {
  TD_CHECK(in.T >= 2, "bad_arg", "rescale: schedule needs at least 2 steps");
  std::vector<double> sq(static_cast<size_t>(in.T));
  for (int t = 0; t < in.T; ++t) sq[static_cast<size_t>(t)] = std::sqrt(in.alpha_bars[static_cast<size_t>(t)]);
  double first = sq.front();
  double last = sq.back();
  TD_CHECK(first > last, "bad_arg", "rescale: schedule already degenerate");
  double gain = first / (first - last);
  for (auto& x : sq) x = (x - last) * gain;
  // The subtraction makes the terminal entry identically zero; the gain pins
  // the first entry back to its original value.
  DiffusionSchedule out;
  out.T = in.T;
  out.beta_min = in.beta_min;
  out.beta_max = in.beta_max;
  out.zero_terminal = true;
  out.betas.resize(sq.size());
  out.alphas.resize(sq.size());
  out.alpha_bars.resize(sq.size());
  double prev = 1.0;
  for (int t = 0; t < out.T; ++t) {
    double ab = sq[static_cast<size_t>(t)] * sq[static_cast<size_t>(t)];
    out.alpha_bars[static_cast<size_t>(t)] = ab;
    double alpha = prev > 0.0 ? ab / prev : 0.0;
    out.alphas[static_cast<size_t>(t)] = alpha;
    out.betas[static_cast<size_t>(t)] = 1.0 - alpha;
    prev = ab;
  }
  out.alpha_bars.back() = 0.0;
  return out;
}

Tensor q_sample(const Tensor& x0, const Tensor& eps, const DiffusionSchedule& s, int t) {
  s.check_t(t, "q_sample");
  TD_CHECK(x0.shape == eps.shape, "shape_mismatch",
           "q_sample: x0 " + shape_str(x0.shape) + " eps " + shape_str(eps.shape));
  double ab = s.alpha_bar(t);
  float a = static_cast<float>(std::sqrt(ab));
  float b = static_cast<float>(std::sqrt(1.0 - ab));
  Tensor out = x0;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * out.v[i] + b * eps.v[i];
  return out;
}

Tensor make_v_target(const Tensor& x0, const Tensor& eps, const DiffusionSchedule& s, int t) {
  s.check_t(t, "make_v_target");
  TD_CHECK(x0.shape == eps.shape, "shape_mismatch", "make_v_target: shape mismatch");
  double ab = s.alpha_bar(t);
  float a = static_cast<float>(std::sqrt(ab));
  float b = static_cast<float>(std::sqrt(1.0 - ab));
  Tensor out = eps;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * out.v[i] - b * x0.v[i];
  return out;
}

void pred_to_x0_eps(const Tensor& z, const Tensor& pred, const DiffusionSchedule& s,
                    PredKind kind, int t, Tensor* x0, Tensor* eps) {
  s.check_t(t, "pred_to_x0_eps");
  TD_CHECK(z.shape == pred.shape, "shape_mismatch",
           "pred_to_x0_eps: z " + shape_str(z.shape) + " pred " + shape_str(pred.shape));
  double ab = s.alpha_bar(t);
  float a = static_cast<float>(std::sqrt(ab));
  float b = static_cast<float>(std::sqrt(1.0 - ab));
  Tensor x0_out = Tensor::zeros(z.shape);
  Tensor eps_out = Tensor::zeros(z.shape);
  switch (kind) {
    case PredKind::epsilon: {
      TD_CHECK(ab > 0.0, "zero_snr_epsilon",
               "epsilon parameterization cannot recover x0 at a zero-signal step; "
               "use v or sample, or start one step earlier");
      for (size_t i = 0; i < z.v.size(); ++i) {
        eps_out.v[i] = pred.v[i];
        x0_out.v[i] = (z.v[i] - b * pred.v[i]) / a;
      }
      break;
    }
    case PredKind::v: {
      for (size_t i = 0; i < z.v.size(); ++i) {
        x0_out.v[i] = a * z.v[i] - b * pred.v[i];
        eps_out.v[i] = b * z.v[i] + a * pred.v[i];
      }
      break;
    }
    case PredKind::sample: {
      TD_CHECK(ab < 1.0, "bad_timestep", "sample parameterization: no noise at alpha_bar=1");
      for (size_t i = 0; i < z.v.size(); ++i) {
        x0_out.v[i] = pred.v[i];
        eps_out.v[i] = (z.v[i] - a * pred.v[i]) / b;
      }
      break;
    }
  }
  if (x0) *x0 = std::move(x0_out);
  if (eps) *eps = std::move(eps_out);
}

Tensor ddim_step(const Tensor& z, const Tensor& pred, const DiffusionSchedule& s,
                 PredKind kind, int t_from, int t_to) {
  s.check_t(t_from, "ddim_step");
  TD_CHECK(t_to == -1 || (t_to >= 0 && t_to < t_from), "bad_timestep",
           "ddim_step: t_to=" + std::to_string(t_to) + " must be -1 or below t_from=" +
               std::to_string(t_from));
  Tensor x0, eps;
  pred_to_x0_eps(z, pred, s, kind, t_from, &x0, &eps);
  double ab_to = t_to == -1 ? 1.0 : s.alpha_bar(t_to);
  float a = static_cast<float>(std::sqrt(ab_to));
  float b = static_cast<float>(std::sqrt(1.0 - ab_to));
  Tensor out = x0;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * out.v[i] + b * eps.v[i];
  return out;
}

}  // namespace td
