#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>

#include <json.hpp>

#include "taskdiff/eval.hpp"
#include "taskdiff/grammar.hpp"
#include "taskdiff/image.hpp"
#include "taskdiff/scene.hpp"

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

// Fresh nets keep their output conv and attention projections at zero; give
// them random values so conditioning actually reaches the prediction.
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

DenoiserConfig small_config() {
  DenoiserConfig cfg = default_denoiser_config();
  cfg.base_channels = 8;
  return cfg;
}

ModelBundle make_model(uint64_t seed) {
  ModelBundle m;
  m.cfg = small_config();
  m.params = lively_params(m.cfg, seed);
  m.table = make_task_table(m.cfg.d_task, Rng::mix(seed, 0x7462ULL));
  m.schedule = rescale_zero_terminal_snr(make_linear_schedule(32));
  return m;
}

std::vector<std::pair<std::string, int>> grammar_corpus(int per_task, uint64_t seed) {
  std::vector<std::pair<std::string, int>> corpus;
  for (int task = 0; task < task_count(); ++task) {
    Rng rng(Rng::mix(seed, static_cast<uint64_t>(task)));
    int made = 0;
    while (made < per_task) {
      Scene scene = sample_scene(rng);
      try {
        corpus.emplace_back(make_instruction(task, scene, rng).instruction, task);
        ++made;
      } catch (const Error&) {
      }
    }
  }
  return corpus;
}

const TaskPredictor& tiny_predictor() {
  static TaskPredictor model = [] {
    PredictorTrainConfig cfg;
    cfg.iters = 250;
    return train_predictor(grammar_corpus(4, 23), cfg);
  }();
  return model;
}

GuidanceConfig quick_guidance(int steps = 4) {
  GuidanceConfig g;
  g.gamma_image = 1.0f;
  g.gamma_text = 2.0f;
  g.steps = steps;
  return g;
}

const std::vector<EditSample>& embedder_train_set() {
  static const std::vector<EditSample> ds = [] {
    DatasetConfig cfg;
    cfg.base_seed = 7;
    cfg.count = 520;
    return make_dataset(cfg);
  }();
  return ds;
}

const std::vector<ImageCaptionPair>& heldout_pairs() {
  static const std::vector<ImageCaptionPair> pairs = [] {
    DatasetConfig cfg;
    cfg.base_seed = 9;
    cfg.count = 180;
    return embedder_corpus(make_dataset(cfg));
  }();
  return pairs;
}

const Embedder& trained_embedder() {
  static const Embedder e = train_embedder(embedder_corpus(embedder_train_set()));
  return e;
}

Benchmark tiny_benchmark(const std::vector<std::string>& cats, int per_cat,
                         uint64_t seed) {
  Benchmark b;
  b.categories = cats;
  for (const std::string& cat : cats) {
    int task = task_by_name(cat).index;
    for (int i = 0; i < per_cat; ++i)
      b.samples[cat].push_back(
          synth_pair(task, Rng::mix(seed, static_cast<uint64_t>(task * 100 + i))));
  }
  return b;
}

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "taskdiff_eval_test";
  std::filesystem::create_directories(dir);
  return dir;
}

FewShotConfig micro_few_shot() {
  FewShotConfig fc;
  fc.shots = {0, 1};
  fc.adapt_steps = 4;
  fc.adapt_batch = 2;
  fc.inversion_steps = 3;
  fc.val_samples = 2;
  fc.val_draws = 1;
  fc.metric_samples = 1;
  fc.guidance = quick_guidance();
  fc.seed = 5;
  return fc;
}

bool has_marker_pixel(const Tensor& img) {
  RGB mc = marker_color();
  for (int y = 0; y < kCanvas; ++y)
    for (int x = 0; x < kCanvas; ++x)
      if (img.at(0, y, x) == mc.r && img.at(1, y, x) == mc.g && img.at(2, y, x) == mc.b)
        return true;
  return false;
}

}  // namespace

TEST_CASE("embedder corpus collects both sides of every sample") {
  std::vector<EditSample> samples = {synth_pair(0, 11), synth_pair(6, 12)};
  auto pairs = embedder_corpus(samples);
  REQUIRE(pairs.size() == 4);
  CHECK(t_equal(pairs[0].first, samples[0].input));
  CHECK(pairs[0].second == samples[0].input_caption);
  CHECK(t_equal(pairs[1].first, samples[0].target));
  CHECK(pairs[1].second == samples[0].output_caption);
  CHECK(t_equal(pairs[2].first, samples[1].input));
  CHECK(pairs[3].second == samples[1].output_caption);
}

TEST_CASE("trained embedder retrieves captions and stays on the unit sphere") {
  const Embedder& e = trained_embedder();
  const auto& held = heldout_pairs();

  for (int i = 0; i < 16; ++i) {
    Tensor iv = embed_image(e, held[static_cast<size_t>(i)].first);
    Tensor tv = embed_text(e, held[static_cast<size_t>(i)].second);
    CHECK(std::fabs(t_norm(iv) - 1.0f) <= 1e-5f);
    CHECK(std::fabs(t_norm(tv) - 1.0f) <= 1e-5f);
  }
  CHECK(t_equal(embed_image(e, held[0].first), embed_image(e, held[0].first)));
  CHECK(t_equal(embed_text(e, held[0].second), embed_text(e, held[0].second)));

  float r1 = retrieval_at_1(e, held, 32);
  MESSAGE("held-out retrieval@1 = " << r1);
  CHECK(r1 >= 0.8f);

  // Breaking the pairing drops retrieval to chance: every image now has to
  // pick the caption of some other sample.
  std::vector<ImageCaptionPair> shuffled(held.begin(), held.begin() + 64);
  for (size_t i = 0; i < shuffled.size(); ++i)
    shuffled[i].second = held[(i + 1) % shuffled.size()].second;
  float rs = retrieval_at_1(e, shuffled, 32);
  MESSAGE("shuffled retrieval@1 = " << rs);
  CHECK(rs <= 0.25f);
}

TEST_CASE("embedder training and packing validate their inputs") {
  const Embedder& e = trained_embedder();

  std::vector<ImageCaptionPair> tiny(heldout_pairs().begin(), heldout_pairs().begin() + 10);
  CHECK(code_of([&] { train_embedder(tiny); }) == "bad_data");

  EmbedderTrainConfig cfg;
  cfg.batch_size = 1;
  CHECK(code_of([&] { train_embedder(heldout_pairs(), cfg); }) == "bad_config");

  EmbedderTrainConfig loose;
  loose.min_pairs = 4;
  loose.batch_size = 2;
  loose.steps = 1;
  std::vector<ImageCaptionPair> bad_caption(heldout_pairs().begin(),
                                            heldout_pairs().begin() + 4);
  bad_caption[2].second = "";
  CHECK(code_of([&] { train_embedder(bad_caption, loose); }) == "bad_data");
  std::vector<ImageCaptionPair> bad_image(heldout_pairs().begin(),
                                          heldout_pairs().begin() + 4);
  bad_image[1].first = Tensor::zeros({1, kCanvas, kCanvas});
  CHECK(code_of([&] { train_embedder(bad_image, loose); }) == "bad_data");

  Embedder r = unpack_embedder(pack_embedder(e));
  CHECK(r.d_e == e.d_e);
  CHECK(t_equal(embed_image(r, heldout_pairs()[3].first),
                embed_image(e, heldout_pairs()[3].first)));
  CHECK(t_equal(embed_text(r, "add a red circle"), embed_text(e, "add a red circle")));

  NamedTensors broken = pack_embedder(e);
  broken.erase("txt/w");
  CHECK(code_of([&] { unpack_embedder(broken); }) == "bad_data");
  CHECK(code_of([&] { embed_image(Embedder{}, heldout_pairs()[0].first); }) ==
        "bad_params");

  ModelBundle m = make_model(77);
  m.predictor = tiny_predictor();
  m.embedder = pack_embedder(e);
  auto path = (temp_dir() / "with_embedder.tdf").string();
  save_model(path, m);
  ModelBundle loaded = load_model(path);
  Embedder e2 = unpack_embedder(loaded.embedder);
  CHECK(t_equal(embed_image(e2, heldout_pairs()[5].first),
                embed_image(e, heldout_pairs()[5].first)));
}

TEST_CASE("retrieval validates its arguments") {
  const Embedder& e = trained_embedder();
  CHECK(code_of([&] { retrieval_at_1(e, heldout_pairs(), 1); }) == "bad_arg");
  std::vector<ImageCaptionPair> three(heldout_pairs().begin(), heldout_pairs().begin() + 3);
  CHECK(code_of([&] { retrieval_at_1(e, three, 32); }) == "bad_arg");
}

TEST_CASE("similarity metrics hit their identities and bounds") {
  const Embedder& e = trained_embedder();
  Tensor a = synth_pair(0, 41).input;
  Tensor b = synth_pair(6, 42).target;

  CHECK(clip_im(a, a, e) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(dino_sim(a, a) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(pixel_l1(a, a) == 0.0f);

  Tensor black = Tensor::zeros({3, kCanvas, kCanvas});
  Tensor white = Tensor::full({3, kCanvas, kCanvas}, 1.0f);
  CHECK(pixel_l1(black, white) == 1.0f);

  CHECK(clip_dir(a, a, "a red circle", "a blue square", e) == 0.0f);
  CHECK(clip_dir(a, b, "a red circle", "a red circle", e) == 0.0f);

  for (uint64_t s = 0; s < 4; ++s) {
    EditSample ex = synth_pair(static_cast<int>(s * 3 % task_count()), 300 + s);
    float d = clip_dir(ex.input, ex.target, ex.input_caption, ex.output_caption, e);
    float i = clip_im(ex.input, ex.target, e);
    float o = clip_out(ex.target, ex.output_caption, e);
    float n = dino_sim(ex.input, ex.target);
    for (float v : {d, i, o, n}) {
      CHECK(v >= -1.0f);
      CHECK(v <= 1.0f);
    }
    CHECK(pixel_l1(ex.input, ex.target) >= 0.0f);
  }

  CHECK(code_of([&] { pixel_l1(a, Tensor::zeros({3, 16, 16})); }) == "shape_mismatch");
  CHECK(code_of([&] { dino_sim(a, Tensor::zeros({3, 16, 16})); }) == "shape_mismatch");
  CHECK(code_of([&] { structure_features(Tensor::zeros({1, 32, 32})); }) == "bad_arg");
  CHECK(code_of([&] { structure_features(Tensor::zeros({3, 12, 12})); }) == "bad_arg");
  CHECK(code_of([&] { embed_image(e, Tensor::zeros({32, 32})); }) == "bad_arg");
}

TEST_CASE("structure features rank recolorings above different scenes") {
  Rng rng(777);
  double same_sum = 0.0, diff_sum = 0.0;
  for (int i = 0; i < 100; ++i) {
    Scene a = sample_scene(Rng::mix(5000, static_cast<uint64_t>(i)));
    Scene recolored = a;
    int shift = 1 + rng.uniform_int(0, shape_color_count() - 2);
    for (Shape& sh : recolored.shapes)
      sh.color = (sh.color + shift) % shape_color_count();
    Scene other = sample_scene(Rng::mix(9000, static_cast<uint64_t>(i)));
    Tensor ra = render(a);
    same_sum += dino_sim(ra, render(recolored));
    diff_sum += dino_sim(ra, render(other));
  }
  MESSAGE("recolor mean " << same_sum / 100 << " vs other-scene mean " << diff_sum / 100);
  CHECK(same_sum / 100 > diff_sum / 100);
}

TEST_CASE("directional similarity is positive on insertion pairs") {
  const Embedder& e = trained_embedder();
  int add = task_by_name("add").index;
  double sum = 0.0;
  for (int i = 0; i < 200; ++i) {
    EditSample s = synth_pair(add, Rng::mix(600, static_cast<uint64_t>(i)));
    sum += clip_dir(s.input, s.target, s.input_caption, s.output_caption, e);
  }
  MESSAGE("mean insertion clip_dir = " << sum / 200);
  CHECK(sum / 200 > 0.0);
}

TEST_CASE("metrics reports round trip through CSV") {
  MetricsReport r;
  r.per_category["add"] = {0.1f, 1.0f / 3.0f, -0.000123456f, 0.25f, 0.999999f, 4};
  r.per_category["style"] = {-0.5f, 0.7071067f, 0.0f, 1.0f, -1.0f, 3};
  r.aggregate = {0.05f, 0.5f, 0.123456789f, 0.625f, 0.33333334f, 7};

  std::string csv = metrics_to_csv(r);
  MetricsReport p = metrics_from_csv(csv);
  REQUIRE(p.per_category.size() == 2);
  for (const auto& [name, mv] : r.per_category) {
    const MetricValues& q = p.per_category.at(name);
    CHECK(q.count == mv.count);
    CHECK(q.clip_dir == mv.clip_dir);
    CHECK(q.clip_im == mv.clip_im);
    CHECK(q.clip_out == mv.clip_out);
    CHECK(q.l1 == mv.l1);
    CHECK(q.dino == mv.dino);
  }
  CHECK(p.aggregate.clip_out == r.aggregate.clip_out);
  CHECK(p.aggregate.count == 7);

  CHECK(code_of([&] { metrics_from_csv("bogus\n1,2\n"); }) == "bad_data");
  CHECK(code_of([&] {
          metrics_from_csv("category,count,clip_dir,clip_im,clip_out,l1,dino\nadd,1,2\n");
        }) == "bad_data");
  CHECK(code_of([&] {
          metrics_from_csv(
              "category,count,clip_dir,clip_im,clip_out,l1,dino\n"
              "add,1,0,0,0,0,0\nadd,2,0,0,0,0,0\nall,3,0,0,0,0,0\n");
        }) == "bad_data");
  CHECK(code_of([&] {
          metrics_from_csv(
              "category,count,clip_dir,clip_im,clip_out,l1,dino\nadd,1,0,0,0,0,0\n");
        }) == "bad_data");
  CHECK(code_of([&] {
          metrics_from_csv(
              "category,count,clip_dir,clip_im,clip_out,l1,dino\nall,x,0,0,0,0,0\n");
        }) == "bad_data");

  std::string js = metrics_to_json(r);
  auto j = nlohmann::json::parse(js);
  CHECK(j["all"]["count"].get<int>() == 7);
  CHECK(j["categories"]["add"]["l1"].get<float>() == 0.25f);
}

TEST_CASE("evaluate_model scores a benchmark per category and in aggregate") {
  const Embedder& e = trained_embedder();
  ModelBundle m = make_model(21);
  m.predictor = tiny_predictor();
  Benchmark bench = tiny_benchmark({"add", "color"}, 2, 91);
  EvalConfig cfg;
  cfg.guidance = quick_guidance();
  cfg.seed = 17;

  MetricsReport r = evaluate_model(m, bench, e, TaskMode::gt, cfg);
  REQUIRE(r.per_category.size() == 2);
  CHECK(r.per_category.at("add").count == 2);
  CHECK(r.per_category.at("color").count == 2);
  CHECK(r.aggregate.count == 4);
  CHECK(r.aggregate.l1 ==
        doctest::Approx(0.5 * (r.per_category.at("add").l1 +
                               r.per_category.at("color").l1))
            .epsilon(1e-6));

  MetricsReport again = evaluate_model(m, bench, e, TaskMode::gt, cfg);
  CHECK(r.aggregate.clip_dir == again.aggregate.clip_dir);
  CHECK(r.aggregate.l1 == again.aggregate.l1);
  CHECK(r.per_category.at("add").dino == again.per_category.at("add").dino);

  MetricsReport none = evaluate_model(m, bench, e, TaskMode::none, cfg);
  CHECK(none.aggregate.count == 4);
  MetricsReport pred = evaluate_model(m, bench, e, TaskMode::predicted, cfg);
  CHECK(pred.aggregate.count == 4);

  Benchmark broken = bench;
  broken.categories.push_back("style");
  CHECK(code_of([&] { evaluate_model(m, broken, e, TaskMode::gt, cfg); }) == "bad_data");
  CHECK(code_of([&] { evaluate_model(m, Benchmark{}, e, TaskMode::gt, cfg); }) ==
        "bad_data");
  CHECK(code_of([&] { evaluate_model(m, bench, Embedder{}, TaskMode::gt, cfg); }) ==
        "bad_params");
  CHECK(code_of([&] { task_mode_from_string("sideways"); }) == "bad_arg");
  CHECK(task_mode_from_string("gt") == TaskMode::gt);
  CHECK(to_string(TaskMode::predicted) == "predicted");
}

TEST_CASE("ground-truth and predicted modes agree when the predictor is right") {
  const Embedder& e = trained_embedder();
  ModelBundle m = make_model(22);
  m.predictor = tiny_predictor();
  EvalConfig cfg;
  cfg.guidance = quick_guidance();
  cfg.seed = 29;

  Benchmark bench;
  for (const std::string& cat : {"add", "color"}) {
    int task = task_by_name(cat).index;
    int found = 0;
    for (uint64_t i = 0; i < 400 && found < 2; ++i) {
      EditSample s = synth_pair(task, Rng::mix(1300, static_cast<uint64_t>(task) * 1000 + i));
      if (predict_task(m.predictor, s.instruction).first.index != task) continue;
      bench.samples[cat].push_back(std::move(s));
      ++found;
    }
    REQUIRE(found == 2);
    bench.categories.push_back(cat);
  }

  MetricsReport gt = evaluate_model(m, bench, e, TaskMode::gt, cfg);
  MetricsReport pd = evaluate_model(m, bench, e, TaskMode::predicted, cfg);
  CHECK(gt.aggregate.clip_dir == pd.aggregate.clip_dir);
  CHECK(gt.aggregate.clip_im == pd.aggregate.clip_im);
  CHECK(gt.aggregate.clip_out == pd.aggregate.clip_out);
  CHECK(gt.aggregate.l1 == pd.aggregate.l1);
  CHECK(gt.aggregate.dino == pd.aggregate.dino);
}

TEST_CASE("expert comparison reports matched rows") {
  const Embedder& e = trained_embedder();
  ModelBundle m = make_model(23);
  Benchmark bench = tiny_benchmark({"add"}, 2, 57);
  EvalConfig cfg;
  cfg.guidance = quick_guidance();

  std::map<std::string, ModelBundle> experts = {{"add", m}};
  auto rows = compare_multitask_vs_experts(m, experts, bench, e, cfg);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].category == "add");
  CHECK(rows[0].multitask.count == 2);
  CHECK(rows[0].multitask.clip_dir == rows[0].expert.clip_dir);
  CHECK(rows[0].multitask.l1 == rows[0].expert.l1);
  CHECK(rows[0].multitask.dino == rows[0].expert.dino);

  std::string csv = comparison_to_csv(rows);
  CHECK(csv.find("category,count,mt_clip_dir") == 0);
  CHECK(csv.find("\nadd,2,") != std::string::npos);

  std::map<std::string, ModelBundle> off = {{"texture", m}};
  CHECK(code_of([&] { compare_multitask_vs_experts(m, off, bench, e, cfg); }) ==
        "bad_data");
  CHECK(code_of([&] { compare_multitask_vs_experts(m, {}, bench, e, cfg); }) == "bad_arg");
}

TEST_CASE("task count sweep trains one point per subset") {
  const Embedder& e = trained_embedder();
  int style = task_by_name("style").index;
  int texture = task_by_name("texture").index;

  std::vector<EditSample> dataset;
  for (int t : {style, texture})
    for (uint64_t i = 0; i < 6; ++i)
      dataset.push_back(synth_pair(t, Rng::mix(2200, static_cast<uint64_t>(t) * 50 + i)));

  Benchmark bench;
  bench.categories = {"style"};
  bench.samples["style"] = {synth_pair(style, 2301)};

  SweepConfig sc;
  sc.model = small_config();
  sc.schedule = rescale_zero_terminal_snr(make_linear_schedule(32));
  sc.train.steps = 2;
  sc.train.batch_size = 2;
  sc.train.warmup_steps = 1;
  sc.train.seed = 3;
  sc.eval.guidance = quick_guidance();
  sc.eval.seed = 11;

  auto curve = task_count_sweep({{style, texture}}, dataset, bench, e, sc);
  REQUIRE(curve.size() == 1);
  CHECK(curve[0].task_count == 2);
  CHECK(curve[0].sample_count == 1);
  CHECK(std::isfinite(curve[0].clip_dir));

  auto dup = task_count_sweep({{style, style, texture}}, dataset, bench, e, sc);
  CHECK(dup[0].task_count == 2);
  CHECK(dup[0].clip_dir == curve[0].clip_dir);

  std::string csv = sweep_to_csv(curve);
  CHECK(csv.find("task_count,clip_dir,sample_count\n2,") == 0);

  CHECK(code_of([&] { task_count_sweep({}, dataset, bench, e, sc); }) == "bad_arg");
  CHECK(code_of([&] { task_count_sweep({{}}, dataset, bench, e, sc); }) == "bad_arg");
  SweepConfig off = sc;
  off.focus_categories = {"add"};
  CHECK(code_of([&] { task_count_sweep({{style}}, dataset, bench, e, off); }) ==
        "bad_data");
  CHECK(code_of([&] { task_count_sweep({{style, 99}}, dataset, bench, e, sc); }) ==
        "bad_arg");
}

TEST_CASE("few-shot samples are deterministic and shaped for their task") {
  for (const std::string& task : few_shot_tasks()) {
    EditSample a = make_few_shot_sample(task, 321);
    EditSample b = make_few_shot_sample(task, 321);
    CHECK(t_equal(a.input, b.input));
    CHECK(t_equal(a.target, b.target));
    CHECK(a.instruction == b.instruction);
    EditSample c = make_few_shot_sample(task, 322);
    CHECK_FALSE(t_equal(a.input, c.input));

    CHECK(a.input.shape == std::vector<int>{3, kCanvas, kCanvas});
    CHECK(a.target.shape == std::vector<int>{3, kCanvas, kCanvas});
    CHECK(!a.tokens.empty());
    CHECK(a.task == -1);
    CHECK(a.provenance.at("few_shot_task") == task);
  }

  EditSample inp = make_few_shot_sample("inpaint", 40);
  REQUIRE(inp.has_mask);
  float area = mask_area(inp.mask);
  CHECK(area >= 64.0f);
  float gray = 128.0f / 255.0f;
  for (int y = 0; y < kCanvas; ++y)
    for (int x = 0; x < kCanvas; ++x)
      for (int c = 0; c < 3; ++c) {
        if (inp.mask.at(0, y, x) > 0.5f) CHECK(inp.input.at(c, y, x) == gray);
        else CHECK(inp.input.at(c, y, x) == inp.target.at(c, y, x));
      }

  EditSample up = make_few_shot_sample("upscale", 41);
  CHECK_FALSE(t_equal(up.input, up.target));
  for (int c = 0; c < 3; ++c)
    for (int by = 0; by < kCanvas / 2; ++by)
      for (int bx = 0; bx < kCanvas / 2; ++bx) {
        float v = up.input.at(c, 2 * by, 2 * bx);
        CHECK(up.input.at(c, 2 * by, 2 * bx + 1) == v);
        CHECK(up.input.at(c, 2 * by + 1, 2 * bx) == v);
        CHECK(up.input.at(c, 2 * by + 1, 2 * bx + 1) == v);
      }

  EditSample ct = make_few_shot_sample("contour", 42);
  int white = 0, black = 0;
  for (int y = 0; y < kCanvas; ++y)
    for (int x = 0; x < kCanvas; ++x) {
      float v = ct.target.at(0, y, x);
      CHECK((v == 0.0f || v == 1.0f));
      CHECK(ct.target.at(1, y, x) == v);
      CHECK(ct.target.at(2, y, x) == v);
      if (v == 1.0f) ++white;
      else ++black;
    }
  CHECK(white > 0);
  CHECK(black > white);

  EditSample ad = make_few_shot_sample("add_detect", 43);
  CHECK(has_marker_pixel(ad.target));
  CHECK_FALSE(has_marker_pixel(ad.input));
  CHECK(ad.instruction.find("and mark it with a box") != std::string::npos);

  CHECK(code_of([&] { make_few_shot_sample("outpaint", 1); }) == "bad_arg");
}

TEST_CASE("few-shot experiment adapts per mode and keeps frozen weights frozen") {
  ModelBundle base = make_model(31);
  FewShotConfig fc = micro_few_shot();

  DenoiserParams before = base.params;
  size_t table_rows_before = base.table.names.size();
  auto inv = few_shot_experiment(base, "contour", FewShotMode::inversion, fc);
  REQUIRE(inv.size() == 2);
  CHECK(inv[0].mode == "inversion");
  CHECK(inv[0].shots == 0);
  CHECK(inv[1].shots == 1);
  for (const auto& p : inv) {
    CHECK(std::isfinite(p.val_loss));
    CHECK(p.oracle_l1 >= 0.0f);
  }
  for (const auto& [name, t] : base.params) CHECK(t_equal(t, before.at(name)));
  CHECK(base.table.names.size() == table_rows_before);

  auto inv2 = few_shot_experiment(base, "contour", FewShotMode::inversion, fc);
  CHECK(inv[1].val_loss == inv2[1].val_loss);
  CHECK(inv[1].oracle_l1 == inv2[1].oracle_l1);

  auto ft = few_shot_experiment(base, "inpaint", FewShotMode::finetune, fc);
  REQUIRE(ft.size() == 2);
  CHECK(ft[1].mode == "finetune");
  CHECK(std::isfinite(ft[1].val_loss));
  CHECK(base.table.names.size() == table_rows_before);

  auto sc = few_shot_experiment(base, "upscale", FewShotMode::scratch, fc);
  REQUIRE(sc.size() == 2);
  CHECK(sc[0].mode == "scratch");
  CHECK(std::isfinite(sc[0].val_loss));

  std::string csv = few_shot_to_csv(ft);
  CHECK(csv.find("mode,shots,val_loss,oracle_l1\nfinetune,0,") == 0);

  CHECK(code_of([&] { few_shot_experiment(base, "outpaint", FewShotMode::scratch, fc); }) ==
        "bad_arg");
  FewShotConfig empty = fc;
  empty.shots = {};
  CHECK(code_of([&] { few_shot_experiment(base, "contour", FewShotMode::scratch, empty); }) ==
        "bad_config");
  FewShotConfig negative = fc;
  negative.shots = {0, -1};
  CHECK(code_of([&] {
          few_shot_experiment(base, "contour", FewShotMode::scratch, negative);
        }) == "bad_config");
  CHECK(code_of([&] { few_shot_mode_from_string("transfer"); }) == "bad_arg");
  CHECK(few_shot_mode_from_string("inversion") == FewShotMode::inversion);
  CHECK(to_string(FewShotMode::finetune) == "finetune");
}

TEST_CASE("few-shot expert trains a fresh reference model") {
  ModelBundle base = make_model(33);
  FewShotConfig fc = micro_few_shot();
  TrainConfig tc;
  tc.steps = 2;
  tc.batch_size = 2;
  tc.warmup_steps = 1;
  tc.seed = 9;

  FewShotPoint pt = few_shot_expert(base, "contour", 2, tc, fc);
  CHECK(pt.mode == "expert");
  CHECK(pt.shots == 2);
  CHECK(std::isfinite(pt.val_loss));
  CHECK(pt.oracle_l1 >= 0.0f);

  CHECK(code_of([&] { few_shot_expert(base, "contour", 0, tc, fc); }) == "bad_arg");
  CHECK(code_of([&] { few_shot_expert(base, "nonsense", 2, tc, fc); }) == "bad_arg");
}
