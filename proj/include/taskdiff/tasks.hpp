#pragma once

#include <string>
#include <vector>

#include "taskdiff/common.hpp"

namespace td {

enum class TaskCategory { region_based, free_form, vision };

struct TaskId {
  int index = -1;
  std::string name;
  TaskCategory category = TaskCategory::region_based;
};

// Canonical task registry. Order is stable and serialized with checkpoints;
// embedding-table rows and dataset labels index into it.
int task_count();
const TaskId& task_by_index(int i);
const TaskId& task_by_name(const std::string& name);
bool task_exists(const std::string& name);

std::string to_string(TaskCategory c);

// The seven held-out evaluation categories (a subset of the registry).
const std::vector<std::string>& benchmark_categories();

}  // namespace td
