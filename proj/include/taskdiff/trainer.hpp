#pragma once

#include <map>
#include <string>
#include <vector>

#include "taskdiff/checkpoint.hpp"
#include "taskdiff/datagen.hpp"
#include "taskdiff/denoiser.hpp"
#include "taskdiff/schedule.hpp"
#include "taskdiff/taskspace.hpp"

namespace td {

// Probabilities of the three mutually exclusive guidance-dropout events per
// sample. "both" clears text and image together and also nulls the task
// vector, so the fully unconditional branch sees no task signal either.
struct DropoutRates {
  float text = 0.05f;
  float image = 0.05f;
  float both = 0.05f;
};

struct ConditionDropout {
  bool text = false;
  bool image = false;
  bool task = false;
};

ConditionDropout draw_dropout(Rng& rng, const DropoutRates& rates);
// Applies one dropout draw to a bundle: dropped text becomes the null token,
// a dropped image becomes the zero image, a dropped task empties task_vec.
ConditioningBundle condition_dropout(const ConditioningBundle& bundle, Rng& rng,
                                     const DropoutRates& rates);

struct TrainConfig {
  int steps = 5000;
  int batch_size = 16;
  float lr_peak = 1e-3f;
  int warmup_steps = 200;
  DropoutRates dropout;
  uint64_t seed = 0;
  int checkpoint_every = 0;   // 0 disables periodic checkpoints
  std::string ckpt_path;      // used by periodic checkpoints
  std::string log_path;       // CSV `step,loss,lr`; empty disables logging
};
void validate_train_config(const TrainConfig& tc);

// Linear warmup from zero, cosine decay to zero afterwards.
float lr_at(const TrainConfig& tc, int step);

// Mean denoising loss over one batch plus gradient sums for every denoiser
// parameter and the task-embedding rows referenced by the batch. Gradients
// are averaged over the batch and accumulated in sample order.
struct TrainStepResult {
  float loss = 0.0f;
  std::map<std::string, Tensor> grads;  // keyed like DenoiserParams
  Tensor table_grads;                   // same shape as table.rows
};
TrainStepResult loss_step(const std::vector<EditSample>& batch,
                          const DenoiserParams& params, const TaskEmbeddingTable& table,
                          const DenoiserConfig& cfg, const DiffusionSchedule& schedule,
                          const DropoutRates& rates, Rng& rng);

// Joint optimization of the denoiser and all task rows on a multi-task
// dataset. Every registered task must appear in the dataset.
ModelBundle train_multitask(const std::vector<EditSample>& dataset,
                            const DenoiserConfig& cfg, const DiffusionSchedule& schedule,
                            const TrainConfig& tc);

// Same loop restricted to one task's samples; the table keeps its full shape
// so expert checkpoints stay name-compatible with multi-task ones.
ModelBundle train_expert(const std::vector<EditSample>& dataset, int task,
                         const DenoiserConfig& cfg, const DiffusionSchedule& schedule,
                         const TrainConfig& tc);

// Same loop restricted to a subset of registry tasks; every listed task must
// appear in the dataset at least once.
ModelBundle train_on_tasks(const std::vector<EditSample>& dataset,
                           const std::vector<int>& tasks, const DenoiserConfig& cfg,
                           const DiffusionSchedule& schedule, const TrainConfig& tc);

// Continues optimizing an existing model and its task table on more data with
// fresh optimizer state. Sample labels index table rows rather than the
// registry, so rows appended after the original run are trainable too.
ModelBundle train_resume(const ModelBundle& start, const std::vector<EditSample>& dataset,
                         const TrainConfig& tc);

}  // namespace td
