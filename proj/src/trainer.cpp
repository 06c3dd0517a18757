#include "taskdiff/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "taskdiff/tasks.hpp"

namespace td {
namespace {

void check_rates(const DropoutRates& r) {
  TD_CHECK(r.text >= 0.0f && r.image >= 0.0f && r.both >= 0.0f, "bad_config",
           "dropout rates must be non-negative");
  TD_CHECK(r.text + r.image + r.both <= 1.0f, "bad_config",
           "dropout rates must sum to at most 1");
}

// One sample's contribution: draws dropout, timestep and noise from rng,
// then backpropagates the denoising loss. task_leaf/table_var wire the
// sample's task row; an invalid row means the learned null task.
float sample_loss_grads(const EditSample& ex, Tape& tape,
                        const std::map<std::string, Var>& leaves, Var table_var,
                        const DenoiserConfig& cfg, const DiffusionSchedule& s,
                        const DropoutRates& rates, Rng& rng) {
  ConditionDropout drop = draw_dropout(rng, rates);
  int t = rng.uniform_int(0, s.T - 1);

  Codec codec = make_identity_codec();
  Tensor x0 = codec.encode(ex.target);
  Tensor eps = Tensor::randn(rng, x0.shape);
  Tensor z_t = q_sample(x0, eps, s, t);
  Tensor target =
      cfg.param_kind == PredKind::v ? make_v_target(x0, eps, s, t) : std::move(eps);

  ConditioningBundle bundle;
  bundle.t = t;
  if (!drop.text) bundle.tokens = ex.tokens;
  if (!drop.image) bundle.image_cond = codec.encode(ex.input);

  Var task_row;
  if (!drop.task) task_row = tape.gather_rows(table_var, {ex.task});

  Var pred = denoiser_forward(tape, leaves, cfg, z_t, bundle, task_row).pred;
  Var loss = tape.mse_loss(pred, tape.constant(target));
  float value = tape.val(loss).item();
  tape.backward(loss);
  return value;
}

std::vector<const EditSample*> draw_batch(const std::vector<EditSample>& dataset,
                                          int batch_size, Rng& rng) {
  std::vector<int> idx(static_cast<size_t>(batch_size));
  for (int& i : idx) i = rng.uniform_int(0, static_cast<int>(dataset.size()) - 1);
  std::sort(idx.begin(), idx.end());
  std::vector<const EditSample*> batch;
  batch.reserve(idx.size());
  for (int i : idx) batch.push_back(&dataset[static_cast<size_t>(i)]);
  return batch;
}

ModelBundle run_training(ModelBundle m, const std::vector<EditSample>& dataset,
                         const TrainConfig& tc) {
  validate_train_config(tc);
  validate_config(m.cfg);
  TD_CHECK(!dataset.empty(), "bad_data", "train: empty dataset");
  for (const EditSample& ex : dataset)
    TD_CHECK(ex.task >= 0 && ex.task < m.table.rows.dim(0), "bad_data",
             "train: sample task out of table range");
  const DenoiserConfig& cfg = m.cfg;
  const DiffusionSchedule& schedule = m.schedule;

  std::map<std::string, AdamState> opt;
  AdamState table_opt;

  std::ofstream log;
  if (!tc.log_path.empty()) {
    log.open(tc.log_path, std::ios::trunc);
    TD_CHECK(log.good(), "io_error", "train: cannot open log " + tc.log_path);
    log << "step,loss,lr\n";
  }

  for (int step = 0; step < tc.steps; ++step) {
    Rng rng(Rng::mix(tc.seed, static_cast<uint64_t>(step)));
    auto batch = draw_batch(dataset, tc.batch_size, rng);

    float loss_sum = 0.0f;
    std::map<std::string, Tensor> grad_sum;
    Tensor table_grad_sum = Tensor::zeros(m.table.rows.shape);
    for (const EditSample* ex : batch) {
      Tape tape(true);
      auto leaves = make_leaves(tape, m.params, true);
      Var table_var = tape.leaf(&m.table.rows, true);
      loss_sum +=
          sample_loss_grads(*ex, tape, leaves, table_var, cfg, schedule, tc.dropout, rng);
      for (const auto& [name, leaf] : leaves) {
        const Tensor& g = tape.grad(leaf);
        auto it = grad_sum.find(name);
        if (it == grad_sum.end()) grad_sum.emplace(name, g);
        else it->second = t_add(it->second, g);
      }
      table_grad_sum = t_add(table_grad_sum, tape.grad(table_var));
    }

    float inv_b = 1.0f / static_cast<float>(batch.size());
    float loss = loss_sum * inv_b;
    TD_CHECK(std::isfinite(loss), "nan_loss",
             "train: non-finite loss " + std::to_string(loss) + " at step " +
                 std::to_string(step));

    float lr = lr_at(tc, step);
    for (auto& [name, g] : grad_sum)
      adam_step(m.params.at(name), t_scale(g, inv_b), opt[name], lr);
    adam_step(m.table.rows, t_scale(table_grad_sum, inv_b), table_opt, lr);

    if (log.is_open()) {
      char line[96];
      std::snprintf(line, sizeof(line), "%d,%.6f,%.8f\n", step, loss, lr);
      log << line;
    }
    if (tc.checkpoint_every > 0 && !tc.ckpt_path.empty() &&
        (step + 1) % tc.checkpoint_every == 0)
      save_model(tc.ckpt_path, m);
  }
  return m;
}

ModelBundle train_loop(const std::vector<EditSample>& dataset, const DenoiserConfig& cfg,
                       const DiffusionSchedule& schedule, const TrainConfig& tc) {
  ModelBundle m;
  m.cfg = cfg;
  m.schedule = schedule;
  m.params = make_denoiser_params(cfg, tc.seed);
  m.table = make_task_table(cfg.d_task, Rng::mix(tc.seed, 0x7461626cULL));
  return run_training(std::move(m), dataset, tc);
}

}  // namespace

ConditionDropout draw_dropout(Rng& rng, const DropoutRates& rates) {
  check_rates(rates);
  double u = rng.uniform();
  ConditionDropout d;
  if (u < rates.text) {
    d.text = true;
  } else if (u < rates.text + rates.image) {
    d.image = true;
  } else if (u < rates.text + rates.image + rates.both) {
    d.text = d.image = d.task = true;
  }
  return d;
}

ConditioningBundle condition_dropout(const ConditioningBundle& bundle, Rng& rng,
                                     const DropoutRates& rates) {
  ConditionDropout d = draw_dropout(rng, rates);
  ConditioningBundle out = bundle;
  if (d.text) out.tokens.clear();
  if (d.image) out.image_cond = Tensor();
  if (d.task) out.task_vec = Tensor();
  return out;
}

void validate_train_config(const TrainConfig& tc) {
  TD_CHECK(tc.steps > 0, "bad_config", "train: steps must be positive");
  TD_CHECK(tc.batch_size > 0, "bad_config", "train: batch_size must be positive");
  TD_CHECK(tc.warmup_steps >= 0 && tc.warmup_steps < tc.steps, "bad_config",
           "train: warmup_steps must lie inside the run");
  TD_CHECK(tc.lr_peak > 0.0f, "bad_config", "train: lr_peak must be positive");
  check_rates(tc.dropout);
}

float lr_at(const TrainConfig& tc, int step) {
  if (step <= 0) return 0.0f;
  if (step <= tc.warmup_steps)
    return tc.lr_peak * static_cast<float>(step) / static_cast<float>(tc.warmup_steps);
  double progress = static_cast<double>(step - tc.warmup_steps) /
                    static_cast<double>(tc.steps - tc.warmup_steps);
  return static_cast<float>(tc.lr_peak * 0.5 * (1.0 + std::cos(progress * M_PI)));
}

TrainStepResult loss_step(const std::vector<EditSample>& batch,
                          const DenoiserParams& params, const TaskEmbeddingTable& table,
                          const DenoiserConfig& cfg, const DiffusionSchedule& schedule,
                          const DropoutRates& rates, Rng& rng) {
  TD_CHECK(!batch.empty(), "bad_arg", "loss_step: empty batch");
  for (const EditSample& ex : batch)
    TD_CHECK(ex.task >= 0 && ex.task < table.rows.dim(0), "bad_arg",
             "loss_step: sample task out of table range");

  TrainStepResult res;
  res.table_grads = Tensor::zeros(table.rows.shape);
  float loss_sum = 0.0f;
  for (const EditSample& ex : batch) {
    Tape tape(true);
    auto leaves = make_leaves(tape, params, true);
    Var table_var = tape.leaf(&table.rows, true);
    loss_sum +=
        sample_loss_grads(ex, tape, leaves, table_var, cfg, schedule, rates, rng);
    for (const auto& [name, leaf] : leaves) {
      const Tensor& g = tape.grad(leaf);
      auto it = res.grads.find(name);
      if (it == res.grads.end()) res.grads.emplace(name, g);
      else it->second = t_add(it->second, g);
    }
    res.table_grads = t_add(res.table_grads, tape.grad(table_var));
  }

  float inv_b = 1.0f / static_cast<float>(batch.size());
  res.loss = loss_sum * inv_b;
  TD_CHECK(std::isfinite(res.loss), "nan_loss",
           "loss_step: non-finite loss " + std::to_string(res.loss));
  for (auto& [name, g] : res.grads) g = t_scale(g, inv_b);
  res.table_grads = t_scale(res.table_grads, inv_b);
  return res;
}

ModelBundle train_multitask(const std::vector<EditSample>& dataset,
                            const DenoiserConfig& cfg, const DiffusionSchedule& schedule,
                            const TrainConfig& tc) {
  std::vector<bool> present(static_cast<size_t>(task_count()), false);
  for (const EditSample& ex : dataset) {
    TD_CHECK(ex.task >= 0 && ex.task < task_count(), "bad_data",
             "train: sample task out of registry range");
    present[static_cast<size_t>(ex.task)] = true;
  }
  for (int i = 0; i < task_count(); ++i)
    TD_CHECK(present[static_cast<size_t>(i)], "bad_data",
             "train: no samples for task '" + task_by_index(i).name + "'");
  return train_loop(dataset, cfg, schedule, tc);
}

ModelBundle train_expert(const std::vector<EditSample>& dataset, int task,
                         const DenoiserConfig& cfg, const DiffusionSchedule& schedule,
                         const TrainConfig& tc) {
  TD_CHECK(task >= 0 && task < task_count(), "bad_arg",
           "train: unknown expert task index " + std::to_string(task));
  std::vector<EditSample> restricted;
  for (const EditSample& ex : dataset)
    if (ex.task == task) restricted.push_back(ex);
  TD_CHECK(!restricted.empty(), "bad_data",
           "train: no samples for task '" + task_by_index(task).name + "'");
  return train_loop(restricted, cfg, schedule, tc);
}

ModelBundle train_on_tasks(const std::vector<EditSample>& dataset,
                           const std::vector<int>& tasks, const DenoiserConfig& cfg,
                           const DiffusionSchedule& schedule, const TrainConfig& tc) {
  TD_CHECK(!tasks.empty(), "bad_arg", "train: empty task subset");
  std::vector<bool> wanted(static_cast<size_t>(task_count()), false);
  for (int t : tasks) {
    TD_CHECK(t >= 0 && t < task_count(), "bad_arg",
             "train: unknown task index " + std::to_string(t));
    wanted[static_cast<size_t>(t)] = true;
  }
  std::vector<EditSample> restricted;
  for (const EditSample& ex : dataset)
    if (ex.task >= 0 && ex.task < task_count() && wanted[static_cast<size_t>(ex.task)])
      restricted.push_back(ex);
  std::vector<bool> present(static_cast<size_t>(task_count()), false);
  for (const EditSample& ex : restricted) present[static_cast<size_t>(ex.task)] = true;
  for (int t : tasks)
    TD_CHECK(present[static_cast<size_t>(t)], "bad_data",
             "train: no samples for task '" + task_by_index(t).name + "'");
  return train_loop(restricted, cfg, schedule, tc);
}

ModelBundle train_resume(const ModelBundle& start, const std::vector<EditSample>& dataset,
                         const TrainConfig& tc) {
  return run_training(start, dataset, tc);
}

}  // namespace td
