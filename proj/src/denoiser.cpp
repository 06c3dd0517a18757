#include "taskdiff/denoiser.hpp"

#include <cmath>

#include "taskdiff/common.hpp"
#include "taskdiff/grammar.hpp"

namespace td {
namespace {

constexpr int kImageSize = 32;

int level_channels(const DenoiserConfig& cfg, int level) {
  return cfg.base_channels * cfg.channel_mults[static_cast<size_t>(level)];
}

bool has_self_attn(const DenoiserConfig& cfg, int resolution) {
  for (int r : cfg.attn_resolutions)
    if (r == resolution) return true;
  return false;
}

Tensor sinusoidal(int t, int dim) {
  Tensor out = Tensor::zeros({1, dim});
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / half);
    out.v[static_cast<size_t>(i)] = static_cast<float>(std::sin(t * freq));
    out.v[static_cast<size_t>(half + i)] = static_cast<float>(std::cos(t * freq));
  }
  return out;
}

struct Builder {
  Tape& tape;
  const std::map<std::string, Var>& p;
  const DenoiserConfig& cfg;
  const std::map<std::string, Tensor>* override_map;
  std::vector<AttnRecord>* records;

  Var get(const std::string& name) const {
    auto it = p.find(name);
    TD_CHECK(it != p.end(), "bad_params", "denoiser: missing parameter '" + name + "'");
    return it->second;
  }

  Var linear(Var x, const std::string& w, const std::string& b = "") const {
    Var out = tape.matmul(x, get(w));
    if (!b.empty()) out = tape.add_row_bias(out, get(b));
    return out;
  }

  // GroupNorm -> SiLU -> conv -> (+ temb channel shift) -> GroupNorm -> SiLU
  // -> conv, with a 1x1 projection on the skip when widths change.
  Var res_block(const std::string& name, Var x, Var temb, int c_in, int c_out,
                int h, int w) const {
    Var hvar = tape.group_norm(x, get(name + "/gn1_g"), get(name + "/gn1_b"), 8);
    hvar = tape.silu(hvar);
    hvar = tape.conv2d(hvar, get(name + "/conv1_w"), 1);
    hvar = tape.add_channel_bias(hvar, get(name + "/conv1_b"));
    Var shift = linear(temb, name + "/temb_w", name + "/temb_b");
    hvar = tape.add_channel_bias(hvar, tape.reshape(shift, {c_out}));
    hvar = tape.group_norm(hvar, get(name + "/gn2_g"), get(name + "/gn2_b"), 8);
    hvar = tape.silu(hvar);
    hvar = tape.conv2d(hvar, get(name + "/conv2_w"), 1);
    hvar = tape.add_channel_bias(hvar, get(name + "/conv2_b"));
    Var skip = x;
    if (c_in != c_out) {
      Var tks = tape.to_tokens(x);
      skip = tape.from_tokens(tape.matmul(tks, get(name + "/skip_w")), h, w);
    }
    return tape.add(skip, hvar);
  }

  Var attn_block(const std::string& name, Var x, Var ctx, bool cross, int c, int h,
                 int w) const {
    Var normed = tape.group_norm(x, get(name + "/gn_g"), get(name + "/gn_b"), 8);
    Var tokens = tape.to_tokens(normed);
    Var kv = cross ? ctx : tokens;
    Var q = tape.matmul(tokens, get(name + "/q_w"));
    Var k = tape.matmul(kv, get(name + "/k_w"));
    Var v = tape.matmul(kv, get(name + "/v_w"));
    const Tensor* probs = nullptr;
    if (override_map) {
      auto it = override_map->find(name);
      if (it != override_map->end()) probs = &it->second;
    }
    Attention att = tape.attention(q, k, v, probs);
    if (records) records->push_back(AttnRecord{name, cross, h, w, att});
    Var out = tape.add_row_bias(tape.matmul(att.out, get(name + "/o_w")),
                                get(name + "/o_b"));
    return tape.add(x, tape.from_tokens(out, h, w));
  }
};

void init_normal(DenoiserParams& params, const std::string& name,
                 const std::vector<int>& shape, Rng& rng, float stddev = 0.02f) {
  params[name] = Tensor::randn(rng, shape, stddev);
}

void init_zeros(DenoiserParams& params, const std::string& name,
                const std::vector<int>& shape) {
  params[name] = Tensor::zeros(shape);
}

void init_ones(DenoiserParams& params, const std::string& name, int c) {
  params[name] = Tensor::full({c}, 1.0f);
}

void add_res_block(DenoiserParams& p, const std::string& name, int c_in, int c_out,
                   int d_model, Rng& rng) {
  init_ones(p, name + "/gn1_g", c_in);
  init_zeros(p, name + "/gn1_b", {c_in});
  init_normal(p, name + "/conv1_w", {c_out, c_in, 3, 3}, rng);
  init_zeros(p, name + "/conv1_b", {c_out});
  init_normal(p, name + "/temb_w", {d_model, c_out}, rng);
  init_zeros(p, name + "/temb_b", {c_out});
  init_ones(p, name + "/gn2_g", c_out);
  init_zeros(p, name + "/gn2_b", {c_out});
  init_normal(p, name + "/conv2_w", {c_out, c_out, 3, 3}, rng);
  init_zeros(p, name + "/conv2_b", {c_out});
  if (c_in != c_out) init_normal(p, name + "/skip_w", {c_in, c_out}, rng);
}

void add_attn_block(DenoiserParams& p, const std::string& name, int c, int ctx_dim,
                    int key_dim, Rng& rng) {
  init_ones(p, name + "/gn_g", c);
  init_zeros(p, name + "/gn_b", {c});
  init_normal(p, name + "/q_w", {c, key_dim}, rng);
  init_normal(p, name + "/k_w", {ctx_dim, key_dim}, rng);
  init_normal(p, name + "/v_w", {ctx_dim, c}, rng);
  init_zeros(p, name + "/o_w", {c, c});  // attention starts as a no-op
  init_zeros(p, name + "/o_b", {c});
}

}  // namespace

Tensor Codec::encode(const Tensor& img) const {
  TD_CHECK(img.rank() == 3 && img.dim(0) == channels, "shape_mismatch",
           "codec: expected [" + std::to_string(channels) + ",H,W]");
  return img;
}

Tensor Codec::decode(const Tensor& latent) const {
  TD_CHECK(latent.rank() == 3 && latent.dim(0) == channels, "shape_mismatch",
           "codec: expected [" + std::to_string(channels) + ",H,W]");
  return latent;
}

Codec make_identity_codec() { return Codec{3}; }

DenoiserConfig default_denoiser_config() {
  DenoiserConfig cfg;
  cfg.text_vocab = static_cast<int>(vocabulary().size());
  return cfg;
}

void validate_config(const DenoiserConfig& cfg) {
  TD_CHECK(cfg.channel_mults.size() == 2, "bad_config",
           "denoiser: exactly two resolution levels are supported");
  TD_CHECK(cfg.base_channels >= 8 && cfg.base_channels % 8 == 0, "bad_config",
           "denoiser: base_channels must be a positive multiple of 8");
  for (int m : cfg.channel_mults)
    TD_CHECK(m >= 1, "bad_config", "denoiser: channel multiplier must be >= 1");
  for (int r : cfg.attn_resolutions)
    TD_CHECK(r == 32 || r == 16, "bad_config",
             "denoiser: self-attention resolution must be 32 or 16");
  TD_CHECK(cfg.d_model > 0 && cfg.d_model % 2 == 0, "bad_config",
           "denoiser: d_model must be positive and even");
  TD_CHECK(cfg.d_task > 0, "bad_config", "denoiser: d_task must be positive");
  TD_CHECK(cfg.text_vocab > 0, "bad_config", "denoiser: text_vocab unset");
  TD_CHECK(cfg.max_len >= 1, "bad_config", "denoiser: max_len must be >= 1");
}

DenoiserParams make_denoiser_params(const DenoiserConfig& cfg, uint64_t seed) {
  validate_config(cfg);
  Rng rng(seed);
  DenoiserParams p;
  int c0 = level_channels(cfg, 0);
  int c1 = level_channels(cfg, 1);

  init_normal(p, "in_conv/w", {c0, 3, 3, 3}, rng);
  init_zeros(p, "in_conv/b", {c0});

  init_normal(p, "temb/w1", {cfg.d_model, cfg.d_model}, rng);
  init_zeros(p, "temb/b1", {cfg.d_model});
  init_normal(p, "temb/w2", {cfg.d_model, cfg.d_model}, rng);
  init_zeros(p, "temb/b2", {cfg.d_model});

  init_normal(p, "cond/token_emb", {cfg.text_vocab, cfg.d_task}, rng);
  init_normal(p, "cond/task_to_temb", {cfg.d_task, cfg.d_model}, rng);
  init_normal(p, "cond/task_to_ctx", {cfg.d_task, cfg.d_task}, rng);
  init_normal(p, "cond/task_null", {1, cfg.d_task}, rng);

  add_res_block(p, "rb0", c0, c0, cfg.d_model, rng);
  add_attn_block(p, "xa0", c0, cfg.d_task, cfg.d_task, rng);
  if (has_self_attn(cfg, 32)) add_attn_block(p, "sa0", c0, c0, c0, rng);
  init_normal(p, "down/w", {c1, c0, 3, 3}, rng);
  init_zeros(p, "down/b", {c1});
  add_res_block(p, "rb1", c1, c1, cfg.d_model, rng);
  if (has_self_attn(cfg, 16)) add_attn_block(p, "sa1", c1, c1, c1, rng);
  add_attn_block(p, "xa1", c1, cfg.d_task, cfg.d_task, rng);
  add_res_block(p, "rbm", c1, c1, cfg.d_model, rng);
  init_normal(p, "up/w", {c1, c0}, rng);
  init_zeros(p, "up/b", {c0});
  add_res_block(p, "rb2", 2 * c0, c0, cfg.d_model, rng);

  init_ones(p, "out/gn_g", c0);
  init_zeros(p, "out/gn_b", {c0});
  init_zeros(p, "out/conv_w", {3, c0, 3, 3});  // network starts at zero output
  init_zeros(p, "out/conv_b", {3});

  if (cfg.image_conditioned) return init_for_editing(p, cfg);
  return p;
}

DenoiserParams init_for_editing(const DenoiserParams& unconditional,
                                const DenoiserConfig& cfg) {
  auto it = unconditional.find("in_conv/w");
  TD_CHECK(it != unconditional.end(), "bad_params", "init_for_editing: no input conv");
  const Tensor& w = it->second;
  TD_CHECK(w.rank() == 4 && w.dim(1) == 3, "shape_mismatch",
           "init_for_editing: source model must take 3 input channels");
  int c0 = level_channels(cfg, 0);
  TD_CHECK(w.dim(0) == c0, "shape_mismatch",
           "init_for_editing: config does not match source parameters");

  DenoiserParams out = unconditional;
  Tensor wide = Tensor::zeros({c0, 6, 3, 3});
  for (int o = 0; o < c0; ++o)
    for (int i = 0; i < 3; ++i)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx)
          wide.v[static_cast<size_t>(((o * 6 + i) * 3 + ky) * 3 + kx)] =
              w.v[static_cast<size_t>(((o * 3 + i) * 3 + ky) * 3 + kx)];
  out["in_conv/w"] = std::move(wide);
  return out;
}

size_t param_count(const DenoiserParams& p) {
  size_t n = 0;
  for (const auto& [name, t] : p) n += t.v.size();
  return n;
}

std::map<std::string, Var> make_leaves(Tape& tape, const DenoiserParams& params,
                                       bool requires_grad) {
  std::map<std::string, Var> leaves;
  for (const auto& [name, t] : params) leaves[name] = tape.leaf(&t, requires_grad);
  return leaves;
}

Var embed_timestep(Tape& tape, const std::map<std::string, Var>& p,
                   const DenoiserConfig& cfg, int t, Var task_row) {
  Builder b{tape, p, cfg, nullptr, nullptr};
  Var emb = tape.constant(sinusoidal(t, cfg.d_model));
  emb = b.linear(emb, "temb/w1", "temb/b1");
  emb = tape.silu(emb);
  emb = b.linear(emb, "temb/w2", "temb/b2");
  if (cfg.task_to_timestep && task_row.valid())
    emb = tape.add(emb, tape.matmul(task_row, b.get("cond/task_to_temb")));
  return emb;
}

ForwardResult denoiser_forward(Tape& tape, const std::map<std::string, Var>& p,
                               const DenoiserConfig& cfg, const Tensor& z,
                               const ConditioningBundle& bundle, Var task_row,
                               const std::map<std::string, Tensor>* attn_override) {
  validate_config(cfg);
  TD_CHECK(z.rank() == 3 && z.dim(0) == 3 && z.dim(1) == kImageSize &&
               z.dim(2) == kImageSize,
           "shape_mismatch", "denoiser: z must be [3,32,32]");
  TD_CHECK(attn_override == nullptr || !tape.grad_enabled(), "bad_arg",
           "denoiser: attention overrides are inference-only");

  ForwardResult res;
  Builder b{tape, p, cfg, attn_override, &res.attn};

  Var task = task_row;
  if (!task.valid()) task = b.get("cond/task_null");
  TD_CHECK(tape.val(task).rank() == 2 && tape.val(task).dim(0) == 1 &&
               tape.val(task).dim(1) == cfg.d_task,
           "shape_mismatch", "denoiser: task row must be [1,d_task]");

  // Conditioning sequence: embedded instruction tokens plus one projected
  // task token. Empty token list means the learned null token.
  std::vector<int> ids = bundle.tokens;
  if (static_cast<int>(ids.size()) > cfg.max_len)
    ids.resize(static_cast<size_t>(cfg.max_len));
  for (int id : ids)
    TD_CHECK(id >= 0 && id < cfg.text_vocab, "bad_arg",
             "denoiser: token id out of vocabulary");
  if (ids.empty()) ids.push_back(kNullToken);
  Var ctx = tape.gather_rows(b.get("cond/token_emb"), ids);
  if (cfg.task_to_context)
    ctx = tape.concat_rows(ctx, tape.matmul(task, b.get("cond/task_to_ctx")));

  Var temb = embed_timestep(tape, p, cfg, bundle.t, task);

  Var x;
  if (cfg.image_conditioned) {
    Tensor cond = bundle.image_cond;
    if (cond.v.empty()) cond = Tensor::zeros(z.shape);
    TD_CHECK(cond.shape == z.shape, "shape_mismatch",
             "denoiser: image conditioning must match z");
    Var zin = tape.input(z, false);
    Var cin = tape.input(std::move(cond), false);
    x = tape.concat_channels(zin, cin);
  } else {
    x = tape.input(z, false);
  }

  int c0 = level_channels(cfg, 0);
  int c1 = level_channels(cfg, 1);

  x = tape.conv2d(x, b.get("in_conv/w"), 1);
  x = tape.add_channel_bias(x, b.get("in_conv/b"));

  x = b.res_block("rb0", x, temb, c0, c0, 32, 32);
  if (has_self_attn(cfg, 32)) x = b.attn_block("sa0", x, {}, false, c0, 32, 32);
  x = b.attn_block("xa0", x, ctx, true, c0, 32, 32);
  Var skip = x;

  x = tape.conv2d(x, b.get("down/w"), 2);
  x = tape.add_channel_bias(x, b.get("down/b"));
  x = b.res_block("rb1", x, temb, c1, c1, 16, 16);
  if (has_self_attn(cfg, 16)) x = b.attn_block("sa1", x, {}, false, c1, 16, 16);
  x = b.attn_block("xa1", x, ctx, true, c1, 16, 16);
  x = b.res_block("rbm", x, temb, c1, c1, 16, 16);

  x = tape.upsample_nearest2x(x);
  x = tape.from_tokens(
      tape.add_row_bias(tape.matmul(tape.to_tokens(x), b.get("up/w")), b.get("up/b")),
      32, 32);
  x = tape.concat_channels(x, skip);
  x = b.res_block("rb2", x, temb, 2 * c0, c0, 32, 32);

  x = tape.group_norm(x, b.get("out/gn_g"), b.get("out/gn_b"), 8);
  x = tape.silu(x);
  x = tape.conv2d(x, b.get("out/conv_w"), 1);
  res.pred = tape.add_channel_bias(x, b.get("out/conv_b"));
  return res;
}

Tensor denoiser_predict(const DenoiserParams& params, const DenoiserConfig& cfg,
                        const Tensor& z, const ConditioningBundle& bundle) {
  Tape tape(false);
  auto leaves = make_leaves(tape, params, false);
  Var task;
  if (bundle.task_vec.v.size() > 0) {
    TD_CHECK(bundle.task_vec.v.size() == static_cast<size_t>(cfg.d_task),
             "shape_mismatch", "denoiser: task_vec must have d_task entries");
    Tensor row = bundle.task_vec;
    row.shape = {1, cfg.d_task};
    task = tape.input(std::move(row), false);
  }
  return tape.val(denoiser_forward(tape, leaves, cfg, z, bundle, task).pred);
}

}  // namespace td
