#pragma once

#include <vector>

#include "taskdiff/tensor.hpp"

namespace td {

// What the network output means. Conversions between parameterizations live
// in pred_to_x0_eps so samplers and losses share one definition.
enum class PredKind { epsilon, v, sample };

PredKind pred_kind_from_string(const std::string& s);
std::string to_string(PredKind k);

// Forward-process constants for steps t = 0..T-1 (step t uses alpha_bars[t]).
// Stored in double so the rescaled terminal step is exactly zero and
// signal-to-noise stays strictly monotone even for large T.
struct DiffusionSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  bool zero_terminal = false;
  double beta_min = 0.0, beta_max = 0.0;

  double alpha_bar(int t) const;
  // alpha_bar / (1 - alpha_bar); 0 at an exactly-zero terminal step.
  double snr(int t) const;
  void check_t(int t, const char* where) const;
};

DiffusionSchedule make_linear_schedule(int T, double beta_min = 1e-4,
                                       double beta_max = 0.02);

// Shifts and rescales sqrt(alpha_bar) so the last step carries zero signal
// while the first step is unchanged, then rebuilds alphas/betas from the new
// cumulative products.
DiffusionSchedule rescale_zero_terminal_snr(const DiffusionSchedule& s);

// z_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps
Tensor q_sample(const Tensor& x0, const Tensor& eps, const DiffusionSchedule& s, int t);

// Training target for a v-parameterized model: v = sqrt(ab) eps - sqrt(1-ab) x0.
Tensor make_v_target(const Tensor& x0, const Tensor& eps, const DiffusionSchedule& s, int t);

// Recovers the (x0, eps) pair implied by a model output at step t. Errors for
// PredKind::epsilon at a zero-signal step, where x0 is not recoverable.
void pred_to_x0_eps(const Tensor& z, const Tensor& pred, const DiffusionSchedule& s,
                    PredKind kind, int t, Tensor* x0, Tensor* eps);

// Deterministic DDIM update from step t_from to t_to (t_to == -1 denotes the
// fully denoised output, i.e. alpha_bar = 1).
Tensor ddim_step(const Tensor& z, const Tensor& pred, const DiffusionSchedule& s,
                 PredKind kind, int t_from, int t_to);

}  // namespace td
