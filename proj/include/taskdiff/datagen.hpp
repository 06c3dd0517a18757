#pragma once

#include <map>
#include <string>
#include <vector>

#include "taskdiff/grammar.hpp"

namespace td {

enum class MaskVariant { precise, dilated_blurred, bbox };
std::string to_string(MaskVariant v);
MaskVariant mask_variant_from_string(const std::string& s);

struct MaskSpec {
  MaskVariant variant = MaskVariant::precise;
  int dilation_radius = 2;
  float blur_sigma = 1.5f;
};

// One supervised editing example. Images are [3,32,32] on the 8-bit grid so
// disk round trips are lossless; the mask is stored only for region tasks.
struct EditSample {
  Tensor input;
  Tensor target;
  std::string instruction;
  std::vector<int> tokens;
  int task = -1;
  bool has_mask = false;
  Tensor mask;
  std::string input_caption;
  std::string output_caption;
  uint64_t seed = 0;
  std::string mask_variant;  // "" when has_mask is false
  std::map<std::string, std::string> provenance;
};

// Region mask for one object under the requested variant:
//   precise         exact rasterized footprint
//   dilated_blurred dilate(radius) -> gaussian blur(sigma) -> threshold 0.5
//   bbox            filled bounding rectangle of the dilated_blurred mask
// so the three variants are nested. Errors when the object is absent.
Tensor extract_mask(const Scene& scene, const std::string& object, const MaskSpec& ms);
// Same variant post-processing applied to an arbitrary {0,1} mask.
Tensor apply_mask_variant(const Tensor& precise, const MaskSpec& ms);

// Draws a scene, samples an applicable edit and composites the target.
// Fully determined by (task, seed); the mask variant is sampled per call.
EditSample synth_pair(int task, uint64_t seed);
EditSample synth_pair(int task, uint64_t seed, const MaskSpec& ms);

struct DatasetConfig {
  uint64_t base_seed = 1;
  int count = 0;
  std::vector<float> task_weights;  // defaults to default_task_weights()
  int dilation_radius = 2;
  float blur_sigma = 1.5f;
};

// Sampling mix over the registry, heaviest on single-object edits.
std::vector<float> default_task_weights();

// Record j depends only on mix(base_seed, j), so any sample can be
// regenerated in isolation. Parallel across samples.
std::vector<EditSample> make_dataset(const DatasetConfig& cfg);

// index.jsonl plus PPM images (and PGM masks) in dir; load re-tokenizes.
void save_dataset(const std::string& dir, const std::vector<EditSample>& samples);
std::vector<EditSample> load_dataset(const std::string& dir);

// Held-out evaluation sets for the seven editing categories, written under
// root/<category>/. Benchmark seeds live in an index range disjoint from
// training seeds of the same base seed.
struct Benchmark {
  std::vector<std::string> categories;
  std::map<std::string, std::vector<EditSample>> samples;
};
Benchmark build_benchmark(const std::string& root, int n_per_task, uint64_t seed);
Benchmark load_benchmark(const std::string& root);

}  // namespace td
