#include "taskdiff/taskspace.hpp"

#include <cmath>
#include <set>

#include "taskdiff/grammar.hpp"

namespace td {
namespace {

// One denoising-loss term shared by inversion and embedding_loss. The rng
// drives the (example, timestep, noise) draw; the task row enters as a [1,d]
// tape input so the caller decides whether it trains.
Var denoise_loss(Tape& tape, const std::map<std::string, Var>& leaves,
                 const DenoiserConfig& cfg, const DiffusionSchedule& s,
                 const std::vector<EditSample>& examples, Rng& rng, Var task_row) {
  Codec codec = make_identity_codec();
  const EditSample& ex =
      examples[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(examples.size()) - 1))];
  int t = rng.uniform_int(0, s.T - 1);
  Tensor x0 = codec.encode(ex.target);
  Tensor eps = Tensor::randn(rng, x0.shape);
  Tensor z_t = q_sample(x0, eps, s, t);
  Tensor target =
      cfg.param_kind == PredKind::v ? make_v_target(x0, eps, s, t) : std::move(eps);
  ConditioningBundle bundle;
  bundle.image_cond = codec.encode(ex.input);
  bundle.tokens = ex.tokens;
  bundle.t = t;
  Var pred = denoiser_forward(tape, leaves, cfg, z_t, bundle, task_row).pred;
  return tape.mse_loss(pred, tape.constant(target));
}

}  // namespace

TaskEmbeddingTable make_task_table(int d_task, uint64_t seed) {
  TD_CHECK(d_task > 0, "bad_arg", "task table: d_task must be positive");
  TaskEmbeddingTable table;
  table.d = d_task;
  table.init_seed = seed;
  for (int i = 0; i < task_count(); ++i) table.names.push_back(task_by_index(i).name);
  Rng rng(seed);
  table.rows = Tensor::randn(rng, {task_count(), d_task}, 0.02f);
  return table;
}

Tensor lookup(const TaskEmbeddingTable& table, int index) {
  TD_CHECK(index >= 0 && index < static_cast<int>(table.names.size()), "bad_arg",
           "task table: no row " + std::to_string(index));
  Tensor row = Tensor::zeros({table.d});
  for (int j = 0; j < table.d; ++j) row.v[static_cast<size_t>(j)] = table.rows.at(index, j);
  return row;
}

int find_row(const TaskEmbeddingTable& table, const std::string& name) {
  for (size_t i = 0; i < table.names.size(); ++i)
    if (table.names[i] == name) return static_cast<int>(i);
  return -1;
}

void add_task_row(TaskEmbeddingTable& table, const std::string& name, const Tensor& v) {
  TD_CHECK(!name.empty(), "bad_arg", "task table: row name must not be empty");
  TD_CHECK(find_row(table, name) < 0, "bad_arg",
           "task table: row '" + name + "' already exists");
  TD_CHECK(static_cast<int>(v.v.size()) == table.d, "shape_mismatch",
           "task table: row must have " + std::to_string(table.d) + " entries");
  TD_CHECK(v.finite(), "bad_arg", "task table: row must be finite");
  table.names.push_back(name);
  Tensor grown = Tensor::zeros({static_cast<int>(table.names.size()), table.d});
  std::copy(table.rows.v.begin(), table.rows.v.end(), grown.v.begin());
  std::copy(v.v.begin(), v.v.end(),
            grown.v.end() - static_cast<ptrdiff_t>(v.v.size()));
  table.rows = std::move(grown);
}

Tensor instruction_features(const std::string& instruction) {
  std::vector<int> ids = tokenize(instruction);
  TD_CHECK(!ids.empty(), "bad_arg", "predictor: instruction has no tokens");
  int v = static_cast<int>(vocabulary().size());
  Tensor feat = Tensor::zeros({1, v});
  for (int id : ids) feat.v[static_cast<size_t>(id)] += 1.0f;
  float inv = 1.0f / static_cast<float>(ids.size());
  for (auto& x : feat.v) x *= inv;
  return feat;
}

TaskPredictor train_predictor(const std::vector<std::pair<std::string, int>>& corpus,
                              const PredictorTrainConfig& cfg) {
  int k = task_count();
  int v = static_cast<int>(vocabulary().size());
  TD_CHECK(!corpus.empty(), "bad_data", "predictor: empty corpus");

  std::set<int> seen;
  for (const auto& [text, label] : corpus) {
    TD_CHECK(label >= 0 && label < k, "bad_arg",
             "predictor: label " + std::to_string(label) + " out of range");
    seen.insert(label);
  }
  for (int i = 0; i < k; ++i)
    TD_CHECK(seen.count(i), "bad_data",
             "predictor: no examples for task '" + task_by_index(i).name + "'");

  int n = static_cast<int>(corpus.size());
  Tensor feats = Tensor::zeros({n, v});
  std::vector<int> labels(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor row = instruction_features(corpus[static_cast<size_t>(i)].first);
    std::copy(row.v.begin(), row.v.end(),
              feats.v.begin() + static_cast<ptrdiff_t>(i) * v);
    labels[static_cast<size_t>(i)] = corpus[static_cast<size_t>(i)].second;
  }

  TaskPredictor model{Tensor::zeros({v, k}), Tensor::zeros({k})};
  AdamState w_state, b_state;
  for (int it = 0; it < cfg.iters; ++it) {
    Tape tape(true);
    Var x = tape.constant(feats);
    Var w = tape.leaf(&model.w);
    Var b = tape.leaf(&model.b);
    Var logits = tape.add_row_bias(tape.matmul(x, w), b);
    Var loss = tape.softmax_cross_entropy(logits, labels);
    tape.backward(loss);
    adam_step(model.w, tape.grad(w), w_state, cfg.lr);
    adam_step(model.b, tape.grad(b), b_state, cfg.lr);
  }
  return model;
}

std::pair<TaskId, float> predict_task(const TaskPredictor& model,
                                      const std::string& instruction) {
  TD_CHECK(model.w.rank() == 2 && model.w.dim(1) == task_count(), "bad_params",
           "predictor: model not trained for this registry");
  Tensor feat = instruction_features(instruction);

  Tape tape(false);
  Var logits = tape.add_row_bias(
      tape.matmul(tape.constant(std::move(feat)), tape.leaf(&model.w, false)),
      tape.leaf(&model.b, false));
  const Tensor& probs = tape.val(tape.softmax_rows(logits));
  int best = 0;
  for (int j = 1; j < task_count(); ++j)
    if (probs.at(0, j) > probs.at(0, best)) best = j;
  return {task_by_index(best), probs.at(0, best)};
}

InversionResult task_inversion(const std::vector<EditSample>& examples,
                               const DenoiserParams& frozen, const DenoiserConfig& cfg,
                               const DiffusionSchedule& schedule,
                               const InversionConfig& opt) {
  TD_CHECK(!examples.empty(), "bad_arg", "task inversion needs at least one example");
  TD_CHECK(opt.steps > 0, "bad_arg", "task inversion: steps must be positive");

  Rng init_rng(Rng::mix(opt.seed, 0x696e6974ULL));
  Tensor row = Tensor::randn(init_rng, {1, cfg.d_task}, 0.02f);
  AdamState state;

  InversionResult res;
  res.v_init = Tensor::zeros({cfg.d_task});
  res.v_init.v = row.v;
  res.losses.reserve(static_cast<size_t>(opt.steps));
  for (int step = 0; step < opt.steps; ++step) {
    Rng rng(Rng::mix(opt.seed, static_cast<uint64_t>(step)));
    Tape tape(true);
    auto leaves = make_leaves(tape, frozen, false);
    Var task = tape.input(row, true);
    Var loss = denoise_loss(tape, leaves, cfg, schedule, examples, rng, task);
    res.losses.push_back(tape.val(loss).item());
    tape.backward(loss);
    adam_step(row, tape.grad(task), state, opt.lr);
  }

  res.v = Tensor::zeros({cfg.d_task});
  res.v.v = row.v;
  return res;
}

float embedding_loss(const std::vector<EditSample>& examples,
                     const DenoiserParams& params, const DenoiserConfig& cfg,
                     const DiffusionSchedule& schedule, const Tensor& v,
                     uint64_t seed, int draws) {
  TD_CHECK(!examples.empty(), "bad_arg", "embedding_loss: no examples");
  TD_CHECK(draws > 0, "bad_arg", "embedding_loss: draws must be positive");
  TD_CHECK(static_cast<int>(v.v.size()) == cfg.d_task, "shape_mismatch",
           "embedding_loss: task row must have d_task entries");
  Tensor row = v;
  row.shape = {1, cfg.d_task};

  double total = 0.0;
  for (int i = 0; i < draws; ++i) {
    Rng rng(Rng::mix(seed, static_cast<uint64_t>(i)));
    Tape tape(false);
    auto leaves = make_leaves(tape, params, false);
    Var task = tape.input(row, false);
    Var loss = denoise_loss(tape, leaves, cfg, schedule, examples, rng, task);
    total += tape.val(loss).item();
  }
  return static_cast<float>(total / draws);
}

}  // namespace td
