#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "taskdiff/checkpoint.hpp"
#include "taskdiff/sampler.hpp"
#include "taskdiff/trainer.hpp"

namespace td {

// ---------------------------------------------------------------------------
// Contrastive image/text embedder
// ---------------------------------------------------------------------------

// Two small towers projecting images and captions onto a shared d_e
// dimensional unit sphere: a strided conv stack for images, a linear map over
// token frequencies for text. Trained once on (image, caption) pairs, then
// frozen; every similarity metric below reads embeddings from it.
struct Embedder {
  int d_e = 0;
  NamedTensors params;
};

struct EmbedderTrainConfig {
  int d_e = 32;
  int conv_channels = 8;
  int steps = 1500;
  int batch_size = 32;
  float lr = 2e-3f;
  float logit_scale = 10.0f;  // fixed temperature on the cosine logits
  int min_pairs = 1000;
  uint64_t seed = 0;
};

using ImageCaptionPair = std::pair<Tensor, std::string>;

// Both sides of every sample: (input, input_caption) and (target,
// output_caption).
std::vector<ImageCaptionPair> embedder_corpus(const std::vector<EditSample>& samples);

// Symmetric cross-entropy over in-batch cosine logits, scored in both the
// image-to-caption and caption-to-image directions. Errors when the corpus
// is smaller than cfg.min_pairs.
Embedder train_embedder(const std::vector<ImageCaptionPair>& corpus,
                        const EmbedderTrainConfig& cfg = {});

// Unit-norm [d_e] embeddings.
Tensor embed_image(const Embedder& e, const Tensor& img);
Tensor embed_text(const Embedder& e, const std::string& caption);

// Fraction of images whose own caption scores highest within a batch. Pairs
// are scored in consecutive batches; a trailing partial batch is dropped.
float retrieval_at_1(const Embedder& e, const std::vector<ImageCaptionPair>& pairs,
                     int batch_size = 32);

// Checkpoint section carried by ModelBundle::embedder. The weights are
// self-describing, so the section is exactly the parameter map.
NamedTensors pack_embedder(const Embedder& e);
Embedder unpack_embedder(const NamedTensors& entries);

// ---------------------------------------------------------------------------
// Similarity metrics
// ---------------------------------------------------------------------------

// Cosine between the image-embedding change and the caption-embedding
// change. Zero when either change is the zero vector.
float clip_dir(const Tensor& input_img, const Tensor& output_img,
               const std::string& input_caption, const std::string& output_caption,
               const Embedder& e);
// Cosine between two image embeddings.
float clip_im(const Tensor& a, const Tensor& b, const Embedder& e);
// Cosine between an image embedding and a caption embedding.
float clip_out(const Tensor& img, const std::string& caption, const Embedder& e);
// Mean absolute pixel difference.
float pixel_l1(const Tensor& a, const Tensor& b);

// Handcrafted structural descriptor: the Sobel edge map average-pooled to
// 8x8, concatenated with per-cell color means on a 4x4 grid. [112] for RGB.
Tensor structure_features(const Tensor& img);
// Cosine between structure_features of the two images; emphasizes layout
// over appearance since edge terms outweigh the color terms.
float dino_sim(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Benchmark evaluation
// ---------------------------------------------------------------------------

struct MetricValues {
  float clip_dir = 0.0f;
  float clip_im = 0.0f;
  float clip_out = 0.0f;
  float l1 = 0.0f;
  float dino = 0.0f;
  int count = 0;
};

struct MetricsReport {
  std::map<std::string, MetricValues> per_category;
  MetricValues aggregate;  // sample-weighted means over every category
};

// CSV rows `category,count,clip_dir,clip_im,clip_out,l1,dino`, the aggregate
// last under the reserved name "all". Floats use enough digits to round-trip
// exactly through metrics_from_csv.
std::string metrics_to_csv(const MetricsReport& r);
MetricsReport metrics_from_csv(const std::string& csv);
std::string metrics_to_json(const MetricsReport& r);

// How the edit of a benchmark sample picks its task conditioning.
enum class TaskMode { gt, predicted, none };
TaskMode task_mode_from_string(const std::string& s);
std::string to_string(TaskMode m);

struct EvalConfig {
  GuidanceConfig guidance;
  uint64_t seed = 0;
};

// Edits every benchmark sample and scores it against its input and captions:
// clip_dir for instruction compliance, clip_im / l1 / dino for input
// preservation, clip_out for output-caption agreement. The per-sample edit
// seed mixes cfg.seed with the sample seed, so reports are reproducible.
MetricsReport evaluate_model(const ModelBundle& m, const Benchmark& bench,
                             const Embedder& e, TaskMode mode,
                             const EvalConfig& cfg = {});

// ---------------------------------------------------------------------------
// Multi-task vs expert comparison
// ---------------------------------------------------------------------------

struct ComparisonRow {
  std::string category;
  MetricValues multitask;
  MetricValues expert;
};

// Ground-truth-task evaluation of one shared model against one expert per
// category; `experts` maps benchmark category names to expert checkpoints.
// Errors when an expert's category is missing from the benchmark.
std::vector<ComparisonRow> compare_multitask_vs_experts(
    const ModelBundle& multitask, const std::map<std::string, ModelBundle>& experts,
    const Benchmark& bench, const Embedder& e, const EvalConfig& cfg = {});
std::string comparison_to_csv(const std::vector<ComparisonRow>& rows);

// ---------------------------------------------------------------------------
// Task-count ablation
// ---------------------------------------------------------------------------

struct SweepConfig {
  DenoiserConfig model;
  DiffusionSchedule schedule;
  TrainConfig train;
  EvalConfig eval;
  std::vector<std::string> focus_categories = {"style", "texture"};
};

struct SweepPoint {
  int task_count = 0;
  float clip_dir = 0.0f;
  int sample_count = 0;
};

// Trains one model per task subset on the filtered dataset and reports the
// mean ground-truth-task clip_dir over the focus categories present in the
// benchmark. Errors when a subset is empty or no focus category is present.
std::vector<SweepPoint> task_count_sweep(const std::vector<std::vector<int>>& subsets,
                                         const std::vector<EditSample>& dataset,
                                         const Benchmark& bench, const Embedder& e,
                                         const SweepConfig& sc);
std::string sweep_to_csv(const std::vector<SweepPoint>& curve);

// ---------------------------------------------------------------------------
// Few-shot adaptation
// ---------------------------------------------------------------------------

enum class FewShotMode { scratch, finetune, inversion };
FewShotMode few_shot_mode_from_string(const std::string& s);
std::string to_string(FewShotMode m);

// Names of the held-out adaptation tasks: "inpaint", "upscale", "contour"
// and "add_detect".
const std::vector<std::string>& few_shot_tasks();

// Procedural example of one adaptation task, fully determined by (new_task,
// seed). The task label is left at -1; harnesses assign their own row index.
EditSample make_few_shot_sample(const std::string& new_task, uint64_t seed);

struct FewShotConfig {
  std::vector<int> shots = {0, 1, 10, 100};
  int adapt_steps = 200;  // scratch / finetune optimizer budget
  int adapt_batch = 4;
  float adapt_lr = 1e-3f;
  int inversion_steps = 200;
  float inversion_lr = 1e-2f;
  int val_samples = 16;    // held-out examples behind val_loss
  int val_draws = 4;       // (timestep, noise) draws per example
  int metric_samples = 4;  // edited images scored against the oracle target
  GuidanceConfig guidance;
  uint64_t seed = 0;
};

struct FewShotPoint {
  std::string mode;
  int shots = 0;
  float val_loss = 0.0f;
  float oracle_l1 = 0.0f;  // mean pixel L1 between the edit and the oracle target
};

// Adapts the base model to new_task with n examples for each n in fc.shots:
//   scratch    fresh denoiser and fresh task row, trained on the n examples
//   finetune   base weights plus a fresh row, all of it optimized
//   inversion  base weights frozen, only the new row optimized
// n = 0 scores the unadapted starting point. All points share one held-out
// validation set, so losses are comparable across n and across modes.
std::vector<FewShotPoint> few_shot_experiment(const ModelBundle& base,
                                              const std::string& new_task,
                                              FewShotMode mode,
                                              const FewShotConfig& fc);

// Upper-bound reference: a fresh model trained on expert_n generated examples
// under the explicit budget tc, scored like the experiment points.
FewShotPoint few_shot_expert(const ModelBundle& base, const std::string& new_task,
                             int expert_n, const TrainConfig& tc,
                             const FewShotConfig& fc);

std::string few_shot_to_csv(const std::vector<FewShotPoint>& points);

}  // namespace td
