#pragma once

#include <string>
#include <utility>
#include <vector>

#include "taskdiff/datagen.hpp"
#include "taskdiff/denoiser.hpp"
#include "taskdiff/schedule.hpp"
#include "taskdiff/tasks.hpp"

namespace td {

// Learned embedding rows, one per registered task, plus named extra rows
// appended by task inversion. Registry rows keep their registry index; the
// whole matrix is serialized with checkpoints.
struct TaskEmbeddingTable {
  int d = 0;
  uint64_t init_seed = 0;
  std::vector<std::string> names;
  Tensor rows;  // [names.size(), d]
};

// Registry-order rows drawn N(0, 0.02^2) from the given seed; replaying the
// seed reproduces the table exactly.
TaskEmbeddingTable make_task_table(int d_task, uint64_t seed);
// Row i as a [d] tensor. Errors on an out-of-range index.
Tensor lookup(const TaskEmbeddingTable& table, int index);
// Index of a named row, -1 when absent.
int find_row(const TaskEmbeddingTable& table, const std::string& name);
// Appends a named row (inverted tasks). Name must be new, v finite with d
// entries.
void add_task_row(TaskEmbeddingTable& table, const std::string& name, const Tensor& v);

// Bag-of-words softmax classifier over the grammar vocabulary. Token counts
// are normalized to frequencies, so repeating an instruction leaves the
// features (and therefore the argmax) unchanged.
struct TaskPredictor {
  Tensor w;  // [|V|, task_count]
  Tensor b;  // [task_count]
};

struct PredictorTrainConfig {
  int iters = 800;
  float lr = 0.1f;
};

// Normalized token-frequency feature row, [1, |V|]. Errors on instructions
// with no tokens.
Tensor instruction_features(const std::string& instruction);

// Full-batch Adam on the softmax cross-entropy until the iteration budget.
// Every registered task must appear at least once in the corpus.
TaskPredictor train_predictor(const std::vector<std::pair<std::string, int>>& corpus,
                              const PredictorTrainConfig& cfg = {});
// Argmax class and its probability.
std::pair<TaskId, float> predict_task(const TaskPredictor& model,
                                      const std::string& instruction);

struct InversionConfig {
  int steps = 500;
  float lr = 1e-2f;
  uint64_t seed = 0;
};

struct InversionResult {
  Tensor v;                   // [d_task]
  Tensor v_init;              // the row before any optimization, for displacement checks
  std::vector<float> losses;  // one entry per optimization step
};

// Optimizes a fresh task row against the denoising loss on the given
// examples while every model parameter stays frozen. The result is meant to
// be registered with add_task_row under a caller-chosen name.
InversionResult task_inversion(const std::vector<EditSample>& examples,
                               const DenoiserParams& frozen, const DenoiserConfig& cfg,
                               const DiffusionSchedule& schedule,
                               const InversionConfig& opt);

// Mean denoising loss of a candidate task row over a fixed set of (example,
// timestep, noise) draws; the draws depend only on the seed, so different
// rows are compared on identical ground.
float embedding_loss(const std::vector<EditSample>& examples,
                     const DenoiserParams& params, const DenoiserConfig& cfg,
                     const DiffusionSchedule& schedule, const Tensor& v,
                     uint64_t seed, int draws);

}  // namespace td
