#pragma once

#include <map>
#include <string>
#include <vector>

#include "taskdiff/autodiff.hpp"
#include "taskdiff/schedule.hpp"

namespace td {

// Image <-> latent mapping. The default works directly in pixel space, so
// encode/decode are exact inverses; a learned codec could slot in behind the
// same two calls.
struct Codec {
  int channels = 3;
  Tensor encode(const Tensor& img) const;
  Tensor decode(const Tensor& latent) const;
};
Codec make_identity_codec();

struct DenoiserConfig {
  int base_channels = 32;
  std::vector<int> channel_mults = {1, 2};  // exactly two levels, 32x32 and 16x16
  std::vector<int> attn_resolutions = {16};  // self-attention sites; cross runs at both
  int d_model = 128;
  int d_task = 64;
  int text_vocab = 0;  // set from the grammar vocabulary
  int max_len = 16;
  PredKind param_kind = PredKind::epsilon;
  bool image_conditioned = true;
  // Task-vector injection sites; both on by default. Exposed so the two
  // contribution paths can be isolated in tests and ablations.
  bool task_to_timestep = true;
  bool task_to_context = true;
};
DenoiserConfig default_denoiser_config();
void validate_config(const DenoiserConfig& cfg);

// Named parameter store; map order fixes gradient and serialization order.
using DenoiserParams = std::map<std::string, Tensor>;

// All conditioning inputs for one forward call. Null slots: a zero image for
// the image branch, an empty token list for text (replaced by the learned
// null token), an empty task_vec for the task (replaced by the learned null
// task row).
struct ConditioningBundle {
  Tensor image_cond;        // [3,32,32]
  std::vector<int> tokens;  // instruction token ids, truncated to max_len
  Tensor task_vec;          // [d_task] or empty
  int t = 0;
};

// Fresh parameters; image-conditioned nets widen the input convolution with
// zero weights so the image branch starts inert.
DenoiserParams make_denoiser_params(const DenoiserConfig& cfg, uint64_t seed);
// Widens the input convolution of a 3-channel model to accept the channel-
// concatenated conditioning image; new input channels are exactly zero and
// every other tensor is copied bit-identically.
DenoiserParams init_for_editing(const DenoiserParams& unconditional,
                                const DenoiserConfig& cfg);
size_t param_count(const DenoiserParams& p);

// One leaf per named parameter on the given tape.
std::map<std::string, Var> make_leaves(Tape& tape, const DenoiserParams& params,
                                       bool requires_grad = true);

// Sinusoidal timestep features -> 2-layer MLP, plus the projected task vector
// (bias-free, so a zero task vector leaves the embedding untouched).
Var embed_timestep(Tape& tape, const std::map<std::string, Var>& p,
                   const DenoiserConfig& cfg, int t, Var task_row);

struct AttnRecord {
  std::string name;  // "xa0", "sa1", "xa1"
  bool cross = false;
  int h = 0, w = 0;  // query grid
  Attention attn;
};

struct ForwardResult {
  Var pred;
  std::vector<AttnRecord> attn;
};

// UNet forward pass on an existing tape. task_row is a [1,d_task] Var (for
// example a gather from the embedding table) or invalid to use the learned
// null row. attn_override replaces the softmax maps of the named attention
// sites (grad-disabled tapes only).
ForwardResult denoiser_forward(Tape& tape, const std::map<std::string, Var>& p,
                               const DenoiserConfig& cfg, const Tensor& z,
                               const ConditioningBundle& bundle, Var task_row = {},
                               const std::map<std::string, Tensor>* attn_override = nullptr);

// Convenience inference call: grad-disabled tape, task taken from the bundle.
Tensor denoiser_predict(const DenoiserParams& params, const DenoiserConfig& cfg,
                        const Tensor& z, const ConditioningBundle& bundle);

}  // namespace td
