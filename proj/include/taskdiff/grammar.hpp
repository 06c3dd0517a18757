#pragma once

#include <map>
#include <string>
#include <vector>

#include "taskdiff/scene.hpp"
#include "taskdiff/tasks.hpp"

namespace td {

// Everything needed to realize one edit: the instruction text shown to the
// model, before/after captions for metric computation, and the exact
// parameters the deterministic edit oracle consumes.
struct EditSpec {
  int task = -1;
  std::string instruction;
  std::string input_caption;
  std::string output_caption;
  std::string edited_object;  // "red circle" for object-level tasks, else ""
  std::map<std::string, std::string> oracle_params;
};

// Samples a concrete edit of the given task that is applicable to the scene
// (object choices, new attributes, phrasing) and fills in all EditSpec
// fields. Errors with "inapplicable_task" when the scene admits no valid
// edit of that task, e.g. no free cell for an insertion.
EditSpec make_instruction(int task, const Scene& scene, uint64_t seed);
EditSpec make_instruction(int task, const Scene& scene, Rng& rng);

// Insertion spec for a shape the caller already placed (used when the edited
// scene is drawn first and the input is derived by deleting the shape).
EditSpec make_add_instruction(const Scene& input_scene, const Shape& added, Rng& rng);

// Applies a scene-graph edit and returns the edited scene. Supports the
// tasks that act on scene structure (add, remove, local, texture,
// background, global, style); errors with "unsupported_task" for the
// image-space tasks.
Scene apply_edit_oracle(const Scene& scene, const EditSpec& spec);

// "a striped red circle and a blue square on a navy background", shapes in
// painter's order, plus a suffix when scene.fx is set.
std::string scene_caption(const Scene& scene);
std::string caption_suffix_for_fx(PostFx fx);

// Closed vocabulary covering every string the grammar can emit.
// ids: 0 = <null> (empty conditioning), 1 = <pad>, 2 = <unk>.
const std::vector<std::string>& vocabulary();
constexpr int kNullToken = 0;
constexpr int kPadToken = 1;
constexpr int kUnkToken = 2;

// Lowercases, strips punctuation, splits on whitespace, maps to ids.
std::vector<int> tokenize(const std::string& text);
int token_id(const std::string& word);  // kUnkToken when unknown
std::string detokenize(const std::vector<int>& ids);

}  // namespace td
