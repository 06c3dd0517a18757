#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "taskdiff/denoiser.hpp"
#include "taskdiff/grammar.hpp"

using namespace td;

namespace {

std::string code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code;
  }
  return "";
}

// Fresh parameters start with zeroed output conv and attention projections,
// which is right for training but makes the net constant. Tests that probe
// sensitivity or gradients re-randomize those tensors.
DenoiserParams lively_params(const DenoiserConfig& cfg, uint64_t seed) {
  DenoiserParams p = make_denoiser_params(cfg, seed);
  Rng rng(Rng::mix(seed, 0x6c697665ULL));
  for (auto& [name, t] : p) {
    bool zeroed = name == "out/conv_w" || name == "out/conv_b" ||
                  (name.size() > 4 && name.substr(name.size() - 4) == "/o_w");
    if (zeroed) t = Tensor::randn(rng, t.shape, 0.05f);
  }
  return p;
}

Tensor rand_image(uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({3, 32, 32});
  for (auto& x : t.v) x = static_cast<float>(rng.uniform());
  return t;
}

ConditioningBundle bundle_for(const std::string& text, uint64_t img_seed, int t) {
  ConditioningBundle b;
  b.image_cond = rand_image(img_seed);
  b.tokens = tokenize(text);
  b.t = t;
  return b;
}

Tensor forward_value(const DenoiserParams& p, const DenoiserConfig& cfg,
                     const Tensor& z, const ConditioningBundle& b,
                     const Tensor* task = nullptr) {
  Tape tape(false);
  auto leaves = make_leaves(tape, p, false);
  Var row;
  if (task) row = tape.input(*task, false);
  return tape.val(denoiser_forward(tape, leaves, cfg, z, b, row).pred);
}

}  // namespace

TEST_CASE("config validation") {
  DenoiserConfig cfg = default_denoiser_config();
  CHECK(cfg.text_vocab == static_cast<int>(vocabulary().size()));
  CHECK(code_of([&] { validate_config(cfg); }) == "");

  DenoiserConfig bad = cfg;
  bad.channel_mults = {1, 2, 4};
  CHECK(code_of([&] { validate_config(bad); }) == "bad_config");
  bad = cfg;
  bad.base_channels = 12;
  CHECK(code_of([&] { validate_config(bad); }) == "bad_config");
  bad = cfg;
  bad.attn_resolutions = {8};
  CHECK(code_of([&] { validate_config(bad); }) == "bad_config");
  bad = cfg;
  bad.text_vocab = 0;
  CHECK(code_of([&] { validate_config(bad); }) == "bad_config");
}

TEST_CASE("parameter construction is deterministic and seed-sensitive") {
  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams a = make_denoiser_params(cfg, 7);
  DenoiserParams b = make_denoiser_params(cfg, 7);
  DenoiserParams c = make_denoiser_params(cfg, 8);

  REQUIRE(a.size() == b.size());
  REQUIRE(a.size() == c.size());
  CHECK(param_count(a) == param_count(c));
  CHECK(param_count(a) > 100000);

  bool identical = true, all_same_as_c = true;
  for (const auto& [name, t] : a) {
    identical = identical && t_equal(t, b.at(name));
    all_same_as_c = all_same_as_c && t_equal(t, c.at(name));
  }
  CHECK(identical);
  CHECK_FALSE(all_same_as_c);
}

TEST_CASE("fresh parameters follow the init contract") {
  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams p = make_denoiser_params(cfg, 11);

  const Tensor& w = p.at("in_conv/w");
  REQUIRE(w.shape == std::vector<int>{32, 6, 3, 3});
  for (int o = 0; o < 32; ++o)
    for (int i = 3; i < 6; ++i)
      for (int k = 0; k < 9; ++k)
        REQUIRE(w.v[static_cast<size_t>((o * 6 + i) * 9 + k)] == 0.0f);

  CHECK(t_max_abs(p.at("out/conv_w")) == 0.0f);
  CHECK(t_max_abs(p.at("out/conv_b")) == 0.0f);
  for (const char* site : {"xa0", "sa1", "xa1"})
    CHECK(t_max_abs(p.at(std::string(site) + "/o_w")) == 0.0f);
  CHECK(t_max_abs(t_sub(p.at("rb0/gn1_g"), Tensor::full({32}, 1.0f))) == 0.0f);

  // Zeroed output conv means the prediction starts exactly at zero.
  Tensor z = rand_image(1);
  Tensor pred = forward_value(p, cfg, z, bundle_for("make the image darker", 2, 5));
  CHECK(t_max_abs(pred) == 0.0f);
}

TEST_CASE("forward output shape, purity and convenience wrapper") {
  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams p = lively_params(cfg, 3);
  Tensor z = rand_image(10);
  ConditioningBundle b = bundle_for("turn the circle red", 11, 40);

  Tensor y1 = forward_value(p, cfg, z, b);
  Tensor y2 = forward_value(p, cfg, z, b);
  REQUIRE(y1.shape == std::vector<int>{3, 32, 32});
  CHECK(t_equal(y1, y2));
  CHECK(y1.finite());
  CHECK(t_max_abs(y1) > 0.0f);
  CHECK(t_equal(denoiser_predict(p, cfg, z, b), y1));
}

TEST_CASE("null conditioning slots fall back to the learned rows") {
  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams p = lively_params(cfg, 4);
  Tensor z = rand_image(20);

  ConditioningBundle empty_text = bundle_for("", 21, 12);
  ConditioningBundle null_token = empty_text;
  null_token.tokens = {kNullToken};
  CHECK(t_equal(forward_value(p, cfg, z, empty_text),
                forward_value(p, cfg, z, null_token)));

  // Empty task_vec means the learned null row, passed explicitly or not.
  ConditioningBundle with_null_row = empty_text;
  with_null_row.task_vec = p.at("cond/task_null");
  with_null_row.task_vec.shape = {cfg.d_task};
  CHECK(t_equal(denoiser_predict(p, cfg, z, empty_text),
                denoiser_predict(p, cfg, z, with_null_row)));

  // Empty conditioning image behaves as an all-zero image.
  ConditioningBundle zero_img = empty_text;
  zero_img.image_cond = Tensor::zeros({3, 32, 32});
  ConditioningBundle no_img = empty_text;
  no_img.image_cond = Tensor();
  CHECK(t_equal(forward_value(p, cfg, z, zero_img),
                forward_value(p, cfg, z, no_img)));
}

TEST_CASE("conditioning inputs steer the output") {
  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams p = lively_params(cfg, 5);
  Tensor z = rand_image(30);
  ConditioningBundle b = bundle_for("add a red circle", 31, 17);

  Tensor base = forward_value(p, cfg, z, b);

  ConditioningBundle other_text = b;
  other_text.tokens = tokenize("remove the blue square");
  CHECK(t_l1(forward_value(p, cfg, z, other_text), base) > 0.0f);

  ConditioningBundle other_t = b;
  other_t.t = b.t + 1;
  CHECK(t_l1(forward_value(p, cfg, z, other_t), base) > 0.0f);

  Rng task_rng(40);
  Tensor task_a = Tensor::randn(task_rng, {1, cfg.d_task}, 0.1f);
  Tensor task_b = task_a;
  task_b.v[0] += 0.5f;
  CHECK(t_l1(forward_value(p, cfg, z, b, &task_a),
             forward_value(p, cfg, z, b, &task_b)) > 0.0f);

  // Long token lists are truncated to max_len.
  ConditioningBundle long_text = b;
  for (int i = 0; i < 3 * cfg.max_len; ++i) long_text.tokens.push_back(kPadToken);
  ConditioningBundle cut = b;
  cut.tokens = long_text.tokens;
  cut.tokens.resize(static_cast<size_t>(cfg.max_len));
  CHECK(t_equal(forward_value(p, cfg, z, long_text), forward_value(p, cfg, z, cut)));
}

TEST_CASE("widened input conv ignores the conditioning image until trained") {
  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams p = lively_params(cfg, 6);
  Tensor z = rand_image(50);
  ConditioningBundle a = bundle_for("apply a sepia tone", 51, 9);
  ConditioningBundle b = a;
  b.image_cond = rand_image(52);

  CHECK(t_equal(forward_value(p, cfg, z, a), forward_value(p, cfg, z, b)));
}

TEST_CASE("init_for_editing widens without touching other tensors") {
  DenoiserConfig uncond_cfg = default_denoiser_config();
  uncond_cfg.image_conditioned = false;
  DenoiserParams uncond = make_denoiser_params(uncond_cfg, 9);
  REQUIRE(uncond.at("in_conv/w").shape == std::vector<int>{32, 3, 3, 3});

  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams wide = init_for_editing(uncond, cfg);
  REQUIRE(wide.size() == uncond.size());
  for (const auto& [name, t] : uncond) {
    if (name == "in_conv/w") continue;
    CHECK(t_equal(t, wide.at(name)));
  }
  const Tensor& w0 = uncond.at("in_conv/w");
  const Tensor& w1 = wide.at("in_conv/w");
  REQUIRE(w1.shape == std::vector<int>{32, 6, 3, 3});
  for (int o = 0; o < 32; ++o)
    for (int i = 0; i < 6; ++i)
      for (int k = 0; k < 9; ++k) {
        float got = w1.v[static_cast<size_t>((o * 6 + i) * 9 + k)];
        if (i < 3)
          REQUIRE(got == w0.v[static_cast<size_t>((o * 3 + i) * 9 + k)]);
        else
          REQUIRE(got == 0.0f);
      }

  CHECK(code_of([&] { init_for_editing(wide, cfg); }) == "shape_mismatch");
}

TEST_CASE("widening preserves the unconditional function") {
  DenoiserConfig uncond_cfg = default_denoiser_config();
  uncond_cfg.image_conditioned = false;
  DenoiserParams uncond = make_denoiser_params(uncond_cfg, 12);
  Rng rng(77);
  for (auto& [name, t] : uncond)
    if (t_max_abs(t) == 0.0f && name.find("gn") == std::string::npos)
      t = Tensor::randn(rng, t.shape, 0.05f);

  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams wide = init_for_editing(uncond, cfg);

  Tensor z = rand_image(60);
  ConditioningBundle b = bundle_for("make the background navy", 61, 33);
  ConditioningBundle plain = b;
  plain.image_cond = Tensor();

  Tensor y_uncond = forward_value(uncond, uncond_cfg, z, plain);
  Tensor y_wide = forward_value(wide, cfg, z, b);
  CHECK(t_max_abs(t_sub(y_uncond, y_wide)) < 1e-5f);
}

TEST_CASE("timestep embedding combines sinusoid MLP and task projection") {
  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams p = make_denoiser_params(cfg, 14);
  Tape tape(false);
  auto leaves = make_leaves(tape, p, false);

  Var zero_task = tape.input(Tensor::zeros({1, cfg.d_task}), false);
  Tensor with_zero = tape.val(embed_timestep(tape, leaves, cfg, 25, zero_task));
  Tensor without = tape.val(embed_timestep(tape, leaves, cfg, 25, Var{}));
  REQUIRE(with_zero.shape == std::vector<int>{1, cfg.d_model});
  CHECK(t_equal(with_zero, without));

  Rng rng(15);
  Var task = tape.input(Tensor::randn(rng, {1, cfg.d_task}, 0.1f), false);
  Tensor with_task = tape.val(embed_timestep(tape, leaves, cfg, 25, task));
  CHECK(t_l1(with_task, without) > 0.0f);

  Tensor later = tape.val(embed_timestep(tape, leaves, cfg, 26, Var{}));
  CHECK(t_l1(later, without) > 0.0f);

  DenoiserConfig no_inject = cfg;
  no_inject.task_to_timestep = false;
  Tensor ignored = tape.val(embed_timestep(tape, leaves, no_inject, 25, task));
  CHECK(t_equal(ignored, without));
}

TEST_CASE("task gradient flows through each injection path independently") {
  DenoiserConfig both = default_denoiser_config();
  DenoiserParams p = lively_params(both, 16);
  Tensor z = rand_image(70);
  ConditioningBundle b = bundle_for("mark the circle", 71, 21);
  Rng rng(72);
  Tensor row = Tensor::randn(rng, {1, both.d_task}, 0.1f);
  Tensor target = rand_image(73);

  // With both paths severed the task row is this tape's only differentiable
  // input, so backward() rejects the loss outright; that counts as zero flow.
  auto task_grad = [&](bool to_temb, bool to_ctx) {
    DenoiserConfig cfg = both;
    cfg.task_to_timestep = to_temb;
    cfg.task_to_context = to_ctx;
    Tape tape(true);
    auto leaves = make_leaves(tape, p, false);
    Var task = tape.input(row, true);
    Var pred = denoiser_forward(tape, leaves, cfg, z, b, task).pred;
    Var loss = tape.mse_loss(pred, tape.constant(target));
    try {
      tape.backward(loss);
    } catch (const Error&) {
      return 0.0f;
    }
    return t_max_abs(tape.grad(task));
  };

  CHECK(task_grad(true, false) > 0.0f);
  CHECK(task_grad(false, true) > 0.0f);
  CHECK(task_grad(true, true) > 0.0f);
  CHECK(task_grad(false, false) == 0.0f);
}

TEST_CASE("task row gradient matches finite differences") {
  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams p = lively_params(cfg, 17);
  Tensor z = rand_image(80);
  ConditioningBundle b = bundle_for("highlight the square in magenta", 81, 30);
  Rng rng(82);
  Tensor row = Tensor::randn(rng, {1, cfg.d_task}, 0.1f);
  Tensor target = rand_image(83);
  Tensor dir = Tensor::randn(rng, {1, cfg.d_task}, 1.0f);

  Tape tape(true);
  auto leaves = make_leaves(tape, p, false);
  Var task = tape.input(row, true);
  Var loss = tape.mse_loss(denoiser_forward(tape, leaves, cfg, z, b, task).pred,
                           tape.constant(target));
  tape.backward(loss);
  float analytic = t_dot(tape.grad(task), dir);

  auto loss_at = [&](float h) {
    Tensor shifted = t_axpy(h, dir, row);
    Tape t2(false);
    auto l2 = make_leaves(t2, p, false);
    Var tk = t2.input(shifted, false);
    Var l = t2.mse_loss(denoiser_forward(t2, l2, cfg, z, b, tk).pred,
                        t2.constant(target));
    return t2.val(l).item();
  };
  float h = 0.02f;
  float fd = (loss_at(h) - loss_at(-h)) / (2.0f * h);
  CHECK(std::fabs(fd - analytic) <= 1e-2f * std::max(1.0f, std::fabs(fd)));
}

TEST_CASE("attention maps are recorded at every site") {
  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams p = lively_params(cfg, 18);
  Tensor z = rand_image(90);
  ConditioningBundle b = bundle_for("make the image brighter", 91, 14);

  Tape tape(false);
  auto leaves = make_leaves(tape, p, false);
  ForwardResult res = denoiser_forward(tape, leaves, cfg, z, b);

  REQUIRE(res.attn.size() == 3);
  int ctx_len = static_cast<int>(b.tokens.size()) + 1;
  CHECK(res.attn[0].name == "xa0");
  CHECK(res.attn[0].cross);
  CHECK(res.attn[0].h == 32);
  CHECK(tape.val(res.attn[0].attn.probs).shape == std::vector<int>{1024, ctx_len});
  CHECK(res.attn[1].name == "sa1");
  CHECK_FALSE(res.attn[1].cross);
  CHECK(res.attn[1].h == 16);
  CHECK(tape.val(res.attn[1].attn.probs).shape == std::vector<int>{256, 256});
  CHECK(res.attn[2].name == "xa1");
  CHECK(res.attn[2].cross);
  CHECK(tape.val(res.attn[2].attn.probs).shape == std::vector<int>{256, ctx_len});

  for (const AttnRecord& r : res.attn) {
    const Tensor& probs = tape.val(r.attn.probs);
    for (int i = 0; i < probs.dim(0); ++i) {
      float s = 0.0f;
      for (int j = 0; j < probs.dim(1); ++j) s += probs.at(i, j);
      REQUIRE(s == doctest::Approx(1.0f).epsilon(1e-4));
    }
  }
}

TEST_CASE("attention overrides replace maps and are inference-only") {
  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams p = lively_params(cfg, 19);
  Tensor z = rand_image(95);
  ConditioningBundle b = bundle_for("apply an edge filter", 96, 18);

  Tensor uniform = Tensor::full({256, 256}, 1.0f / 256.0f);
  std::map<std::string, Tensor> override_map{{"sa1", uniform}};

  Tape tape(false);
  auto leaves = make_leaves(tape, p, false);
  ForwardResult res = denoiser_forward(tape, leaves, cfg, z, b, Var{}, &override_map);
  CHECK(t_equal(tape.val(res.attn[1].attn.probs), uniform));

  Tensor plain = forward_value(p, cfg, z, b);
  CHECK(t_l1(tape.val(res.pred), plain) > 0.0f);

  CHECK(code_of([&] {
          Tape gt(true);
          auto gl = make_leaves(gt, p, false);
          denoiser_forward(gt, gl, cfg, z, b, Var{}, &override_map);
        }) == "bad_arg");
}

TEST_CASE("shape and argument errors carry stable codes") {
  DenoiserConfig cfg = default_denoiser_config();
  DenoiserParams p = make_denoiser_params(cfg, 21);
  ConditioningBundle b = bundle_for("make the image darker", 97, 3);

  CHECK(code_of([&] {
          forward_value(p, cfg, Tensor::zeros({3, 16, 16}), b);
        }) == "shape_mismatch");

  ConditioningBundle bad_tok = b;
  bad_tok.tokens = {cfg.text_vocab + 5};
  CHECK(code_of([&] {
          forward_value(p, cfg, Tensor::zeros({3, 32, 32}), bad_tok);
        }) == "bad_arg");

  ConditioningBundle bad_task = b;
  bad_task.task_vec = Tensor::zeros({3});
  CHECK(code_of([&] {
          denoiser_predict(p, cfg, Tensor::zeros({3, 32, 32}), bad_task);
        }) == "shape_mismatch");

  ConditioningBundle bad_img = b;
  bad_img.image_cond = Tensor::zeros({3, 8, 8});
  CHECK(code_of([&] {
          forward_value(p, cfg, Tensor::zeros({3, 32, 32}), bad_img);
        }) == "shape_mismatch");
}

TEST_CASE("identity codec round trips images") {
  Codec codec = make_identity_codec();
  Tensor img = rand_image(99);
  CHECK(t_equal(codec.decode(codec.encode(img)), img));
  CHECK(code_of([&] { codec.encode(Tensor::zeros({1, 4, 4})); }) == "shape_mismatch");
}
