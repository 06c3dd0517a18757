#include "taskdiff/sampler.hpp"

#include <cmath>
#include <cstdlib>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "taskdiff/common.hpp"
#include "taskdiff/grammar.hpp"
#include "taskdiff/image.hpp"
#include "taskdiff/scene.hpp"
#include "taskdiff/taskspace.hpp"

namespace td {

namespace {

// Highest timestep a sampler may start from. An epsilon model cannot be
// inverted at a zero-signal step, so on a zero-terminal schedule it starts
// one step earlier.
int max_start_step(const DiffusionSchedule& s, PredKind kind) {
  TD_CHECK(s.T >= 2, "bad_config", "schedule must have at least two steps");
  if (s.zero_terminal && kind == PredKind::epsilon) return s.T - 2;
  return s.T - 1;
}

// floor with a tolerance so fraction*steps lands on the intended integer.
int fraction_steps(float fraction, int steps) {
  return (int)std::floor((double)fraction * steps + 1e-6);
}

// DDIM update with optional stochasticity. eta=0 or the final step is the
// deterministic update; otherwise part of the step variance is resampled.
Tensor ddim_advance(const Tensor& z, const Tensor& pred, const DiffusionSchedule& s,
                    PredKind kind, int t_from, int t_to, float eta, const Tensor* noise) {
  if (eta <= 0.0f || t_to < 0) return ddim_step(z, pred, s, kind, t_from, t_to);
  TD_CHECK(noise != nullptr, "bad_arg", "stochastic ddim update needs a noise tensor");
  Tensor x0, eps;
  pred_to_x0_eps(z, pred, s, kind, t_from, &x0, &eps);
  double ab_from = s.alpha_bar(t_from);
  double ab_to = s.alpha_bar(t_to);
  double sigma = eta * std::sqrt((1.0 - ab_to) / (1.0 - ab_from)) *
                 std::sqrt(1.0 - ab_from / ab_to);
  double dir = std::sqrt(std::max(0.0, 1.0 - ab_to - sigma * sigma));
  Tensor out = t_scale(x0, (float)std::sqrt(ab_to));
  out = t_axpy((float)dir, eps, out);
  out = t_axpy((float)sigma, *noise, out);
  return out;
}

Tensor rng_advance(const Tensor& z, const Tensor& pred, const DiffusionSchedule& s,
                   PredKind kind, int t_from, int t_to, float eta, Rng& rng) {
  if (eta <= 0.0f || t_to < 0) return ddim_step(z, pred, s, kind, t_from, t_to);
  Tensor noise = Tensor::randn(rng, z.shape);
  return ddim_advance(z, pred, s, kind, t_from, t_to, eta, &noise);
}

// Adds the two guidance terms to an already-computed fully-conditioned
// prediction. Branches whose scale is exactly 1 contribute a zero term and
// are skipped, so their forward passes never run; with a null conditioning
// image the image branch equals the unconditional one and is skipped too.
Tensor complete_guidance(const DenoiserParams& params, const DenoiserConfig& cfg,
                         const Tensor& z, int t, const Tensor& image_cond,
                         const GuidanceConfig& g, const Tensor& e_full) {
  Tensor out = e_full;
  bool has_image = !image_cond.v.empty();
  bool want_text = g.gamma_text != 1.0f;
  bool want_image = g.gamma_image != 1.0f && has_image;
  if (!want_text && !want_image) return out;
  ConditioningBundle image_only;
  image_only.image_cond = image_cond;
  image_only.t = t;
  Tensor e_img = denoiser_predict(params, cfg, z, image_only);
  if (want_text) out = t_axpy(g.gamma_text - 1.0f, t_sub(e_full, e_img), out);
  if (want_image) {
    ConditioningBundle uncond;
    uncond.t = t;
    Tensor e_unc = denoiser_predict(params, cfg, z, uncond);
    out = t_axpy(g.gamma_image - 1.0f, t_sub(e_img, e_unc), out);
  }
  return out;
}

// What the sampler needs to condition one edit: the embedding row (empty for
// the learned null row), plus provenance for session logs.
struct ResolvedTask {
  Tensor vec;
  std::string name = "<null>";
  float confidence = 1.0f;
};

ResolvedTask resolve_task(const ModelBundle& m, const EditRequest& req) {
  ResolvedTask r;
  if (!req.task_override.v.empty()) {
    TD_CHECK((int)req.task_override.size() == m.cfg.d_task, "shape_mismatch",
             "task_override must have d_task entries");
    r.vec = req.task_override;
    r.name = "<override>";
    return r;
  }
  if (req.task == kNullTask) return r;
  int id = req.task;
  if (id == kPredictTask) {
    auto pred = predict_task(m.predictor, req.instruction);
    id = pred.first.index;
    r.confidence = pred.second;
  }
  TD_CHECK(id >= 0 && id < (int)m.table.names.size(), "bad_arg",
           "task index out of range");
  r.vec = lookup(m.table, id);
  r.name = m.table.names[id];
  return r;
}

void check_image(const Tensor& img, const char* who) {
  TD_CHECK(img.rank() == 3 && img.dim(0) == 3, "bad_arg",
           std::string(who) + " expects a [3,H,W] image");
}

// Full-conditioning forward pass with the attention maps copied off the tape,
// optionally replacing the named softmax maps before they are applied.
struct BranchOut {
  Tensor pred;
  std::map<std::string, Tensor> self_probs;
  std::map<std::string, Tensor> cross_probs;
};

BranchOut forward_recorded(const DenoiserParams& params, const DenoiserConfig& cfg,
                           const Tensor& z, const ConditioningBundle& bundle,
                           const std::map<std::string, Tensor>* attn_override) {
  Tape tape(false);
  auto leaves = make_leaves(tape, params, false);
  ForwardResult fr = denoiser_forward(tape, leaves, cfg, z, bundle, {}, attn_override);
  BranchOut out;
  out.pred = tape.val(fr.pred);
  for (const auto& rec : fr.attn) {
    if (rec.cross)
      out.cross_probs[rec.name] = tape.val(rec.attn.probs);
    else
      out.self_probs[rec.name] = tape.val(rec.attn.probs);
  }
  return out;
}

// Context-column correspondence between two token lists: same token at the
// same position first, otherwise the first occurrence anywhere, -1 when the
// target token never appears in the source.
std::vector<int> common_token_columns(const std::vector<int>& src,
                                      const std::vector<int>& tgt) {
  std::vector<int> map(tgt.size(), -1);
  for (size_t j = 0; j < tgt.size(); ++j) {
    if (j < src.size() && src[j] == tgt[j]) {
      map[j] = (int)j;
      continue;
    }
    for (size_t i = 0; i < src.size(); ++i) {
      if (src[i] == tgt[j]) {
        map[j] = (int)i;
        break;
      }
    }
  }
  return map;
}

std::vector<int> capped_tokens(const std::string& text, const DenoiserConfig& cfg) {
  std::vector<int> ids = tokenize(text);
  if ((int)ids.size() > cfg.max_len) ids.resize(cfg.max_len);
  return ids;
}

float parse_alpha_value(const std::string& s) {
  TD_CHECK(!s.empty(), "bad_config", "@alpha needs a value");
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  TD_CHECK(end == s.c_str() + s.size(), "bad_config", "bad @alpha value: " + s);
  TD_CHECK(v >= 0.0 && v <= 1.0, "bad_config", "@alpha must lie in [0,1]");
  return (float)v;
}

}  // namespace

void validate_guidance(const GuidanceConfig& g, const DiffusionSchedule& s,
                       PredKind kind) {
  TD_CHECK(g.steps >= 1, "bad_config", "guidance steps must be positive");
  TD_CHECK(g.steps <= max_start_step(s, kind) + 1, "bad_config",
           "guidance steps exceed the usable timestep count");
  TD_CHECK(g.eta >= 0.0f, "bad_config", "eta must be non-negative");
  TD_CHECK(std::isfinite(g.gamma_image) && std::isfinite(g.gamma_text), "bad_config",
           "guidance scales must be finite");
}

void validate_attention_control(const AttentionControlConfig& ac) {
  TD_CHECK(ac.n_cross >= 0.0f && ac.n_cross <= 1.0f, "bad_config",
           "n_cross must lie in [0,1]");
  TD_CHECK(ac.n_self >= 0.0f && ac.n_self <= 1.0f, "bad_config",
           "n_self must lie in [0,1]");
  TD_CHECK(ac.blend_start >= 0.0f && ac.blend_start <= 1.0f, "bad_config",
           "blend_start must lie in [0,1]");
  TD_CHECK(ac.spatial_share >= 0.0f && ac.spatial_share <= 1.0f, "bad_config",
           "spatial_share must lie in [0,1]");
}

std::vector<int> ddim_timesteps(const DiffusionSchedule& s, PredKind kind, int steps) {
  TD_CHECK(steps >= 1, "bad_config", "guidance steps must be positive");
  int t_max = max_start_step(s, kind);
  // With steps <= t_max+1 the stride is at least one, so rounding the
  // uniform grid keeps it strictly decreasing.
  TD_CHECK(steps <= t_max + 1, "bad_config",
           "guidance steps exceed the usable timestep count");
  std::vector<int> ts((size_t)steps);
  if (steps == 1) {
    ts[0] = t_max;
    return ts;
  }
  for (int k = 0; k < steps; ++k)
    ts[(size_t)k] = (int)std::llround((double)t_max * (steps - 1 - k) / (double)(steps - 1));
  return ts;
}

Tensor dual_cfg_eps(const DenoiserParams& params, const DenoiserConfig& cfg,
                    const Tensor& z_t, int t, const Tensor& image_cond,
                    const std::vector<int>& tokens, const Tensor& task_vec,
                    const GuidanceConfig& g) {
  ConditioningBundle full;
  full.image_cond = image_cond;
  full.tokens = tokens;
  full.task_vec = task_vec;
  full.t = t;
  Tensor e_full = denoiser_predict(params, cfg, z_t, full);
  return complete_guidance(params, cfg, z_t, t, image_cond, g, e_full);
}

Tensor edit(const ModelBundle& m, const EditRequest& req) {
  validate_guidance(req.guidance, m.schedule, m.cfg.param_kind);
  check_image(req.image, "edit");
  ResolvedTask task = resolve_task(m, req);
  std::vector<int> tokens = capped_tokens(req.instruction, m.cfg);
  Codec codec = make_identity_codec();
  Tensor cond = codec.encode(req.image);
  Rng rng(req.seed);
  Tensor z = Tensor::randn(rng, cond.shape);
  std::vector<int> ts = ddim_timesteps(m.schedule, m.cfg.param_kind, req.guidance.steps);
  for (size_t k = 0; k < ts.size(); ++k) {
    int t_from = ts[k];
    int t_to = (k + 1 < ts.size()) ? ts[k + 1] : -1;
    Tensor pred = dual_cfg_eps(m.params, m.cfg, z, t_from, cond, tokens, task.vec,
                               req.guidance);
    z = rng_advance(z, pred, m.schedule, m.cfg.param_kind, t_from, t_to,
                    req.guidance.eta, rng);
  }
  return t_clamp(codec.decode(z), 0.0f, 1.0f);
}

Tensor blended_edit(const ModelBundle& m, const EditRequest& req, const Tensor& mask,
                    const AttentionControlConfig& ac) {
  validate_attention_control(ac);
  validate_guidance(req.guidance, m.schedule, m.cfg.param_kind);
  check_image(req.image, "blended_edit");
  TD_CHECK(mask.rank() == 3 && mask.dim(0) == 1 && mask.dim(1) == req.image.dim(1) &&
               mask.dim(2) == req.image.dim(2),
           "shape_mismatch", "mask must be [1,H,W] matching the image");
  for (float v : mask.v)
    TD_CHECK(v == 0.0f || v == 1.0f, "bad_arg", "mask must be binary");
  ResolvedTask task = resolve_task(m, req);
  std::vector<int> tokens = capped_tokens(req.instruction, m.cfg);
  Codec codec = make_identity_codec();
  Tensor cond = codec.encode(req.image);
  Rng rng(req.seed);
  Tensor z = Tensor::randn(rng, cond.shape);
  std::vector<int> ts = ddim_timesteps(m.schedule, m.cfg.param_kind, req.guidance.steps);
  int steps = (int)ts.size();
  int wholesale = fraction_steps(ac.blend_start, steps);
  for (int k = 0; k < steps; ++k) {
    int t_from = ts[(size_t)k];
    int t_to = (k + 1 < steps) ? ts[(size_t)k + 1] : -1;
    bool whole = k < wholesale;
    if (!whole) {
      Tensor pred = dual_cfg_eps(m.params, m.cfg, z, t_from, cond, tokens, task.vec,
                                 req.guidance);
      z = rng_advance(z, pred, m.schedule, m.cfg.param_kind, t_from, t_to,
                      req.guidance.eta, rng);
    }
    Tensor y;
    if (t_to >= 0) {
      Tensor noise = Tensor::randn(rng, cond.shape);
      y = q_sample(cond, noise, m.schedule, t_to);
    } else {
      y = cond;
    }
    z = whole ? y : blend_by_mask(z, y, mask);
  }
  Tensor out = t_clamp(codec.decode(z), 0.0f, 1.0f);
  // Final image-space blend so pixels outside the mask match the input even
  // when the input itself is out of range and would have been clamped.
  return blend_by_mask(out, req.image, mask);
}

std::pair<Tensor, Tensor> attention_share_pair(const ModelBundle& m,
                                               const std::string& caption_src,
                                               const std::string& caption_tgt,
                                               const AttentionControlConfig& ac,
                                               const GuidanceConfig& g, uint64_t seed) {
  validate_attention_control(ac);
  validate_guidance(g, m.schedule, m.cfg.param_kind);
  std::vector<int> tok_src = capped_tokens(caption_src, m.cfg);
  std::vector<int> tok_tgt = capped_tokens(caption_tgt, m.cfg);
  TD_CHECK(!tok_src.empty() && !tok_tgt.empty(), "bad_arg",
           "captions must contain at least one token");
  std::vector<int> col_map = common_token_columns(tok_src, tok_tgt);
  Codec codec = make_identity_codec();
  Rng rng(seed);
  Tensor z0 = Tensor::randn(rng, {3, kCanvas, kCanvas});
  Tensor z_src = z0, z_tgt = z0;
  std::vector<int> ts = ddim_timesteps(m.schedule, m.cfg.param_kind, g.steps);
  int steps = (int)ts.size();
  int self_steps = fraction_steps(ac.n_self, steps);
  int cross_steps = fraction_steps(ac.n_cross, steps);
  Tensor no_image;
  for (int k = 0; k < steps; ++k) {
    int t_from = ts[(size_t)k];
    int t_to = (k + 1 < steps) ? ts[(size_t)k + 1] : -1;
    bool want_self = k < self_steps;
    bool want_cross = k < cross_steps;
    ConditioningBundle b_src;
    b_src.tokens = tok_src;
    b_src.t = t_from;
    ConditioningBundle b_tgt;
    b_tgt.tokens = tok_tgt;
    b_tgt.t = t_from;

    Tensor e_src, e_tgt;
    if (want_self || want_cross) {
      BranchOut src = forward_recorded(m.params, m.cfg, z_src, b_src, nullptr);
      e_src = src.pred;
      std::map<std::string, Tensor> override_maps;
      if (want_self)
        for (const auto& it : src.self_probs) override_maps[it.first] = it.second;
      if (want_cross) {
        BranchOut base = forward_recorded(m.params, m.cfg, z_tgt, b_tgt, nullptr);
        for (const auto& it : base.cross_probs) {
          const Tensor& from = src.cross_probs.at(it.first);
          Tensor spliced = it.second;
          int q = spliced.dim(0);
          int ctx_tgt = spliced.dim(1);
          int ctx_src = from.dim(1);
          for (int j = 0; j < (int)col_map.size(); ++j) {
            int i = col_map[j];
            if (i < 0) continue;
            for (int r = 0; r < q; ++r)
              spliced.v[(size_t)r * ctx_tgt + j] = from.v[(size_t)r * ctx_src + i];
          }
          override_maps[it.first] = spliced;
        }
      }
      BranchOut tgt = forward_recorded(m.params, m.cfg, z_tgt, b_tgt, &override_maps);
      e_tgt = tgt.pred;
    } else {
      e_src = denoiser_predict(m.params, m.cfg, z_src, b_src);
      e_tgt = denoiser_predict(m.params, m.cfg, z_tgt, b_tgt);
    }
    Tensor pred_src = complete_guidance(m.params, m.cfg, z_src, t_from, no_image, g, e_src);
    Tensor pred_tgt = complete_guidance(m.params, m.cfg, z_tgt, t_from, no_image, g, e_tgt);

    if (g.eta > 0.0f && t_to >= 0) {
      // One shared draw per step keeps the two trajectories comparable.
      Tensor noise = Tensor::randn(rng, z0.shape);
      z_src = ddim_advance(z_src, pred_src, m.schedule, m.cfg.param_kind, t_from, t_to,
                           g.eta, &noise);
      z_tgt = ddim_advance(z_tgt, pred_tgt, m.schedule, m.cfg.param_kind, t_from, t_to,
                           g.eta, &noise);
    } else {
      z_src = ddim_step(z_src, pred_src, m.schedule, m.cfg.param_kind, t_from, t_to);
      z_tgt = ddim_step(z_tgt, pred_tgt, m.schedule, m.cfg.param_kind, t_from, t_to);
    }
  }
  Tensor img_src = t_clamp(codec.decode(z_src), 0.0f, 1.0f);
  Tensor img_tgt = t_clamp(codec.decode(z_tgt), 0.0f, 1.0f);
  return {img_src, img_tgt};
}

Tensor sequential_threshold(const Tensor& prev, const Tensor& next,
                            const ThresholdConfig& tc) {
  TD_CHECK(prev.same_shape(next), "shape_mismatch",
           "sequential_threshold needs images of one shape");
  TD_CHECK(prev.rank() == 3, "bad_arg", "sequential_threshold expects [C,H,W] images");
  TD_CHECK(tc.alpha >= 0.0f && tc.alpha <= 1.0f, "bad_config", "alpha must lie in [0,1]");
  TD_CHECK(tc.blur_sigma >= 0.0f, "bad_config", "blur_sigma must be non-negative");
  int c = prev.dim(0), h = prev.dim(1), w = prev.dim(2);
  Tensor d = Tensor::zeros({1, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float sum = 0.0f;
      for (int ch = 0; ch < c; ++ch) sum += std::fabs(next.at(ch, y, x) - prev.at(ch, y, x));
      d.at(0, y, x) = sum / (float)c;
    }
  }
  Tensor db = tc.blur_sigma > 0.0f ? blur2d(d, tc.blur_sigma) : d;
  // Output pixels are copied, never recomputed, so re-applying the gate to
  // (output, next) changes nothing: the per-pixel change of the output is at
  // most that of prev, a blur with non-negative weights keeps the ordering,
  // and every newly kept pixel already holds the next value.
  Tensor out = next;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (db.at(0, y, x) < tc.alpha)
        for (int ch = 0; ch < c; ++ch) out.at(ch, y, x) = prev.at(ch, y, x);
  return out;
}

std::vector<SessionTurn> parse_session_script(const std::string& text) {
  std::vector<SessionTurn> turns;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream words(line);
    std::string word;
    SessionTurn turn;
    bool saw_directive = false;
    std::string instruction;
    while (words >> word) {
      if (word[0] == '@') {
        saw_directive = true;
        size_t eq = word.find('=');
        TD_CHECK(eq != std::string::npos, "bad_config",
                 "session directive needs '=': " + word);
        std::string key = word.substr(0, eq);
        std::string value = word.substr(eq + 1);
        if (key == "@task") {
          TD_CHECK(!value.empty(), "bad_config", "@task needs a name");
          turn.task = value;
        } else if (key == "@alpha") {
          turn.alpha = parse_alpha_value(value);
        } else {
          fail("bad_config", "unknown session directive: " + key);
        }
      } else {
        if (!instruction.empty()) instruction += ' ';
        instruction += word;
      }
    }
    if (instruction.empty() && !saw_directive) continue;
    TD_CHECK(!instruction.empty(), "bad_config",
             "session line has directives but no instruction");
    turn.instruction = instruction;
    turns.push_back(std::move(turn));
  }
  return turns;
}

std::vector<TurnResult> multi_turn(const ModelBundle& m, const Tensor& image,
                                   const std::vector<SessionTurn>& turns,
                                   const ThresholdConfig& tc, const GuidanceConfig& g,
                                   uint64_t seed) {
  check_image(image, "multi_turn");
  TD_CHECK(tc.alpha >= 0.0f && tc.alpha <= 1.0f, "bad_config", "alpha must lie in [0,1]");
  std::vector<TurnResult> results;
  results.reserve(turns.size());
  Tensor prev = image;
  for (size_t i = 0; i < turns.size(); ++i) {
    const SessionTurn& turn = turns[i];
    EditRequest req;
    req.image = prev;
    req.instruction = turn.instruction;
    req.guidance = g;
    req.seed = Rng::mix(seed, (uint64_t)i);
    TurnResult tr;
    tr.instruction = turn.instruction;
    tr.seed = req.seed;
    if (turn.task.empty()) {
      auto pred = predict_task(m.predictor, turn.instruction);
      req.task = pred.first.index;
      tr.confidence = pred.second;
    } else {
      int idx = find_row(m.table, turn.task);
      TD_CHECK(idx >= 0, "bad_arg", "unknown task name: " + turn.task);
      req.task = idx;
      tr.confidence = 1.0f;
    }
    tr.task = m.table.names[(size_t)req.task];
    tr.alpha = turn.alpha >= 0.0f ? turn.alpha : tc.alpha;
    TD_CHECK(tr.alpha <= 1.0f, "bad_config", "alpha must lie in [0,1]");
    Tensor raw = edit(m, req);
    ThresholdConfig turn_tc;
    turn_tc.alpha = tr.alpha;
    turn_tc.blur_sigma = tc.blur_sigma;
    tr.image = sequential_threshold(prev, raw, turn_tc);
    prev = tr.image;
    results.push_back(std::move(tr));
  }
  return results;
}

}  // namespace td
