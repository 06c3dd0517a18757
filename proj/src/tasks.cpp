#include "taskdiff/tasks.hpp"

namespace td {

namespace {

const std::vector<TaskId>& registry() {
  static const std::vector<TaskId> tasks = {
      {0, "add", TaskCategory::region_based},
      {1, "remove", TaskCategory::region_based},
      {2, "local", TaskCategory::region_based},
      {3, "texture", TaskCategory::region_based},
      {4, "background", TaskCategory::region_based},
      {5, "global", TaskCategory::free_form},
      {6, "style", TaskCategory::free_form},
      {7, "color", TaskCategory::vision},
      {8, "detect", TaskCategory::vision},
      {9, "segment", TaskCategory::vision},
      {10, "edges", TaskCategory::vision},
      {11, "from_edges", TaskCategory::vision},
  };
  return tasks;
}

}  // namespace

int task_count() { return static_cast<int>(registry().size()); }

const TaskId& task_by_index(int i) {
  TD_CHECK(i >= 0 && i < task_count(), "unknown_task",
           "task index " + std::to_string(i) + " outside registry");
  return registry()[static_cast<size_t>(i)];
}

const TaskId& task_by_name(const std::string& name) {
  for (const TaskId& t : registry())
    if (t.name == name) return t;
  fail("unknown_task", "no task named '" + name + "'");
}

bool task_exists(const std::string& name) {
  for (const TaskId& t : registry())
    if (t.name == name) return true;
  return false;
}

std::string to_string(TaskCategory c) {
  switch (c) {
    case TaskCategory::region_based: return "region_based";
    case TaskCategory::free_form: return "free_form";
    case TaskCategory::vision: return "vision";
  }
  return "?";
}

const std::vector<std::string>& benchmark_categories() {
  static const std::vector<std::string> cats = {"add",    "background", "color", "global",
                                                "remove", "local",      "style"};
  return cats;
}

}  // namespace td
