#pragma once

#include <string>
#include <utility>
#include <vector>

#include "taskdiff/checkpoint.hpp"
#include "taskdiff/denoiser.hpp"
#include "taskdiff/schedule.hpp"

namespace td {

struct GuidanceConfig {
  float gamma_image = 1.5f;
  float gamma_text = 5.0f;
  int steps = 64;
  float eta = 0.0f;
};
void validate_guidance(const GuidanceConfig& g, const DiffusionSchedule& s,
                       PredKind kind);

struct AttentionControlConfig {
  float n_cross = 0.0f;       // fraction of steps sharing cross-attention rows
  float n_self = 0.0f;        // fraction of steps sharing self-attention maps
  float blend_start = 0.0f;   // fraction of steps replaced wholesale by the noised input
  float spatial_share = 0.0f; // recorded in provenance, no sampling effect here
};
void validate_attention_control(const AttentionControlConfig& ac);

struct ThresholdConfig {
  float alpha = 0.03f;
  float blur_sigma = 1.0f;
};

// Descending timestep subsequence with uniform stride, ending at 0. For an
// epsilon-parameterized model on a zero-terminal schedule the sequence
// starts one step early, since the terminal step defines no clean image.
std::vector<int> ddim_timesteps(const DiffusionSchedule& s, PredKind kind, int steps);

// Guided noise prediction from three conditioning branches:
//   eps = e(img,txt) + (gamma_text-1)*(e(img,txt) - e(img,0))
//                    + (gamma_image-1)*(e(img,0) - e(0,0))
// The task vector rides with the text branch and is nulled whenever the text
// is nulled. Pass an empty image/tokens/task_vec for a null condition.
Tensor dual_cfg_eps(const DenoiserParams& params, const DenoiserConfig& cfg,
                    const Tensor& z_t, int t, const Tensor& image_cond,
                    const std::vector<int>& tokens, const Tensor& task_vec,
                    const GuidanceConfig& g);

// Task selection for an edit: a table row index, kPredictTask to run the
// instruction through the stored predictor, or kNullTask for the learned
// null row. A non-empty task_override wins over all of these.
constexpr int kPredictTask = -1;
constexpr int kNullTask = -2;

struct EditRequest {
  Tensor image;             // [3,32,32] in [0,1]
  std::string instruction;
  int task = kPredictTask;
  Tensor task_override;     // optional explicit embedding row [d_task]
  GuidanceConfig guidance;
  uint64_t seed = 0;
};

// Full DDIM edit from noise, conditioned on the input image and instruction;
// output decoded and clamped to [0,1]. Deterministic for eta=0.
Tensor edit(const ModelBundle& m, const EditRequest& req);

// Region-constrained edit. The trajectory is replaced wholesale by the
// noised input for the first blend_start fraction of steps, then blended
// as mask*x + (1-mask)*y every step and once more after the last step, so
// pixels outside the mask equal the input bit-for-bit.
Tensor blended_edit(const ModelBundle& m, const EditRequest& req, const Tensor& mask,
                    const AttentionControlConfig& ac);

// Two caption-conditioned DDIM trajectories from one shared initial noise.
// For the first n_self fraction of steps the target's self-attention maps
// are overwritten by the source's; for the first n_cross fraction the
// target's cross-attention columns of tokens common to both captions are
// overwritten. Returns (source image, target image).
std::pair<Tensor, Tensor> attention_share_pair(const ModelBundle& m,
                                               const std::string& caption_src,
                                               const std::string& caption_tgt,
                                               const AttentionControlConfig& ac,
                                               const GuidanceConfig& g, uint64_t seed);

// Per-pixel change gate for sequential editing: keep the previous pixel
// where the blurred channel-mean |next - prev| stays below alpha, take the
// next pixel elsewhere. Idempotent: re-applying the gate to its own output
// reproduces it bit-for-bit, because gating never increases the difference
// map.
Tensor sequential_threshold(const Tensor& prev, const Tensor& next,
                            const ThresholdConfig& tc);

struct SessionTurn {
  std::string instruction;
  std::string task;     // table row name; empty = predict from the instruction
  float alpha = -1.0f;  // per-turn override; negative = session default
};

struct TurnResult {
  Tensor image;
  std::string instruction;
  std::string task;
  float confidence = 1.0f;  // predictor confidence, 1 when the task was given
  uint64_t seed = 0;
  float alpha = 0.0f;
};

// `# comment` lines and blank lines are skipped; `@task=<name>` and
// `@alpha=<float>` words anywhere in a line configure that turn.
std::vector<SessionTurn> parse_session_script(const std::string& text);

// Sequential edits, each gated by sequential_threshold against the previous
// turn's output. Turn i derives its seed from the session seed and i.
std::vector<TurnResult> multi_turn(const ModelBundle& m, const Tensor& image,
                                   const std::vector<SessionTurn>& turns,
                                   const ThresholdConfig& tc, const GuidanceConfig& g,
                                   uint64_t seed);

}  // namespace td
