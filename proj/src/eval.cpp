#include "taskdiff/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "taskdiff/grammar.hpp"
#include "taskdiff/image.hpp"
#include "taskdiff/scene.hpp"

namespace td {
namespace {

constexpr const char* kEmbedderNames[] = {"img/conv1_w", "img/conv1_b", "img/conv2_w",
                                          "img/conv2_b", "img/proj_w",  "img/proj_b",
                                          "txt/w",       "txt/b"};

void check_embedder(const Embedder& e) {
  TD_CHECK(!e.params.empty(), "bad_params", "embedder is untrained");
  for (const char* name : kEmbedderNames)
    TD_CHECK(e.params.count(name), "bad_params",
             std::string("embedder is missing ") + name);
}

int embedder_channels(const Embedder& e) { return e.params.at("img/conv1_w").dim(0); }

// Conv stride 2 twice, SiLU between, then a linear projection onto the unit
// sphere. Works on the training tape and on grad-disabled inference tapes.
Var image_tower(Tape& tape, const std::map<std::string, Var>& p, Var x, int channels,
                int d_e) {
  Var h = tape.silu(tape.add_channel_bias(tape.conv2d(x, p.at("img/conv1_w"), 2),
                                          p.at("img/conv1_b")));
  h = tape.silu(tape.add_channel_bias(tape.conv2d(h, p.at("img/conv2_w"), 2),
                                      p.at("img/conv2_b")));
  const Tensor& hv = tape.val(h);
  int flat = hv.dim(0) * hv.dim(1) * hv.dim(2);
  TD_CHECK(flat == tape.val(p.at("img/proj_w")).dim(0), "shape_mismatch",
           "embedder image size does not match the projection: " + shape_str(hv.shape));
  Var row = tape.matmul(tape.reshape(h, {1, flat}), p.at("img/proj_w"));
  row = tape.add_row_bias(row, p.at("img/proj_b"));
  (void)channels;
  (void)d_e;
  return tape.l2_normalize_rows(row);
}

Var text_tower(Tape& tape, const std::map<std::string, Var>& p,
               const std::string& caption) {
  Var f = tape.constant(instruction_features(caption));
  Var row = tape.add_row_bias(tape.matmul(f, p.at("txt/w")), p.at("txt/b"));
  return tape.l2_normalize_rows(row);
}

Tensor flat_row(const Tensor& row) { return Tensor({row.dim(1)}, row.v); }

// First k entries of a Fisher-Yates partial shuffle of 0..n-1.
std::vector<int> pick_distinct(int n, int k, Rng& rng) {
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i)
    std::swap(idx[static_cast<size_t>(i)],
              idx[static_cast<size_t>(rng.uniform_int(i, n - 1))]);
  idx.resize(static_cast<size_t>(k));
  return idx;
}

float cosine_clamped(const Tensor& a, const Tensor& b) {
  TD_CHECK(a.same_shape(b), "shape_mismatch",
           "cosine: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  float na = t_norm(a), nb = t_norm(b);
  if (na == 0.0f || nb == 0.0f) return 0.0f;
  float c = t_dot(a, b) / (na * nb);
  return std::max(-1.0f, std::min(1.0f, c));
}

std::string fmt_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  fields.push_back(cur);
  return fields;
}

float parse_float_field(const std::string& s) {
  const char* begin = s.c_str();
  char* end = nullptr;
  float v = std::strtof(begin, &end);
  TD_CHECK(end != begin && *end == '\0', "bad_data", "metrics csv: bad number '" + s + "'");
  return v;
}

int parse_int_field(const std::string& s) {
  const char* begin = s.c_str();
  char* end = nullptr;
  long v = std::strtol(begin, &end, 10);
  TD_CHECK(end != begin && *end == '\0' && v >= 0, "bad_data",
           "metrics csv: bad count '" + s + "'");
  return static_cast<int>(v);
}

struct MetricSums {
  double clip_dir = 0.0, clip_im = 0.0, clip_out = 0.0, l1 = 0.0, dino = 0.0;
  int count = 0;
};

MetricValues finalize(const MetricSums& s) {
  MetricValues mv;
  mv.count = s.count;
  if (s.count == 0) return mv;
  double inv = 1.0 / static_cast<double>(s.count);
  mv.clip_dir = static_cast<float>(s.clip_dir * inv);
  mv.clip_im = static_cast<float>(s.clip_im * inv);
  mv.clip_out = static_cast<float>(s.clip_out * inv);
  mv.l1 = static_cast<float>(s.l1 * inv);
  mv.dino = static_cast<float>(s.dino * inv);
  return mv;
}

Tensor edit_benchmark_sample(const ModelBundle& m, const EditSample& s, TaskMode mode,
                             const EvalConfig& cfg) {
  EditRequest req;
  req.image = s.input;
  req.instruction = s.instruction;
  req.task = mode == TaskMode::gt        ? s.task
             : mode == TaskMode::predicted ? kPredictTask
                                           : kNullTask;
  req.guidance = cfg.guidance;
  req.seed = Rng::mix(cfg.seed, s.seed);
  return edit(m, req);
}

MetricValues eval_samples(const ModelBundle& m, const std::vector<EditSample>& samples,
                          const Embedder& e, TaskMode mode, const EvalConfig& cfg,
                          MetricSums* total) {
  MetricSums sums;
  for (const EditSample& s : samples) {
    Tensor out = edit_benchmark_sample(m, s, mode, cfg);
    float d_dir = clip_dir(s.input, out, s.input_caption, s.output_caption, e);
    float d_im = clip_im(s.input, out, e);
    float d_out = clip_out(out, s.output_caption, e);
    float d_l1 = pixel_l1(s.input, out);
    float d_dino = dino_sim(s.input, out);
    for (MetricSums* acc : {&sums, total}) {
      if (!acc) continue;
      acc->clip_dir += d_dir;
      acc->clip_im += d_im;
      acc->clip_out += d_out;
      acc->l1 += d_l1;
      acc->dino += d_dino;
      acc->count += 1;
    }
  }
  return finalize(sums);
}

Tensor quantize8(Tensor t) {
  for (float& v : t.v)
    v = std::round(std::min(1.0f, std::max(0.0f, v)) * 255.0f) / 255.0f;
  return t;
}

void draw_box_outline(Tensor& img, Box b) {
  int h = img.dim(1), w = img.dim(2);
  b.y0 = std::max(0, b.y0);
  b.x0 = std::max(0, b.x0);
  b.y1 = std::min(h - 1, b.y1);
  b.x1 = std::min(w - 1, b.x1);
  if (b.empty()) return;
  RGB mc = marker_color();
  auto put = [&](int y, int x) {
    img.at(0, y, x) = mc.r;
    img.at(1, y, x) = mc.g;
    img.at(2, y, x) = mc.b;
  };
  for (int x = b.x0; x <= b.x1; ++x) {
    put(b.y0, x);
    put(b.y1, x);
  }
  for (int y = b.y0; y <= b.y1; ++y) {
    put(y, b.x0);
    put(y, b.x1);
  }
}

EditSample base_few_shot_sample(const std::string& new_task, uint64_t seed) {
  EditSample s;
  s.task = -1;
  s.seed = seed;
  s.provenance["few_shot_task"] = new_task;
  return s;
}

EditSample make_inpaint_sample(uint64_t seed, Rng& rng) {
  Scene sc = sample_scene(rng);
  Tensor img = render(sc);
  int hh = rng.uniform_int(8, 14), hw = rng.uniform_int(8, 14);
  int y0 = rng.uniform_int(0, kCanvas - hh), x0 = rng.uniform_int(0, kCanvas - hw);
  EditSample s = base_few_shot_sample("inpaint", seed);
  s.target = quantize8(img);
  s.input = s.target;
  s.mask = Tensor::zeros({1, kCanvas, kCanvas});
  float gray = 128.0f / 255.0f;
  for (int y = y0; y < y0 + hh; ++y)
    for (int x = x0; x < x0 + hw; ++x) {
      for (int c = 0; c < 3; ++c) s.input.at(c, y, x) = gray;
      s.mask.at(0, y, x) = 1.0f;
    }
  s.has_mask = true;
  s.mask_variant = "precise";
  s.instruction = "fill in the missing region";
  s.input_caption = scene_caption(sc);
  s.output_caption = s.input_caption;
  return s;
}

EditSample make_upscale_sample(uint64_t seed, Rng& rng) {
  Scene sc = sample_scene(rng);
  Tensor img = quantize8(render(sc));
  EditSample s = base_few_shot_sample("upscale", seed);
  s.target = img;
  s.input = Tensor::zeros({3, kCanvas, kCanvas});
  for (int c = 0; c < 3; ++c)
    for (int by = 0; by < kCanvas / 2; ++by)
      for (int bx = 0; bx < kCanvas / 2; ++bx) {
        float m = 0.25f * (img.at(c, 2 * by, 2 * bx) + img.at(c, 2 * by, 2 * bx + 1) +
                           img.at(c, 2 * by + 1, 2 * bx) + img.at(c, 2 * by + 1, 2 * bx + 1));
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) s.input.at(c, 2 * by + dy, 2 * bx + dx) = m;
      }
  s.input = quantize8(std::move(s.input));
  s.instruction = "upscale the image";
  s.input_caption = scene_caption(sc);
  s.output_caption = s.input_caption;
  return s;
}

EditSample make_contour_sample(uint64_t seed, Rng& rng) {
  Scene sc = sample_scene(rng);
  EditSample s = base_few_shot_sample("contour", seed);
  s.input = quantize8(render(sc));
  Tensor uni = Tensor::zeros({1, kCanvas, kCanvas});
  for (const Shape& sh : sc.shapes) uni = mask_union(uni, shape_footprint(sh));
  auto inside = [&](int y, int x) {
    return y >= 0 && y < kCanvas && x >= 0 && x < kCanvas && uni.at(0, y, x) > 0.5f;
  };
  s.target = Tensor::zeros({3, kCanvas, kCanvas});
  for (int y = 0; y < kCanvas; ++y)
    for (int x = 0; x < kCanvas; ++x) {
      if (!inside(y, x)) continue;
      if (inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1))
        continue;
      for (int c = 0; c < 3; ++c) s.target.at(c, y, x) = 1.0f;
    }
  s.instruction = "trace the outline of every shape";
  s.input_caption = scene_caption(sc);
  s.output_caption = "the outline of every shape";
  return s;
}

EditSample make_add_detect_sample(uint64_t seed, Rng& rng) {
  int add_task = task_by_name("add").index;
  for (int attempt = 0; attempt < 64; ++attempt) {
    Scene sc = sample_scene(rng);
    if (static_cast<int>(sc.shapes.size()) > 2) continue;
    EditSpec es;
    try {
      es = make_instruction(add_task, sc, rng);
    } catch (const Error& err) {
      if (err.code == "inapplicable_task") continue;
      throw;
    }
    Scene edited = apply_edit_oracle(sc, es);
    int idx = find_shape_index(edited, es.edited_object);
    if (idx < 0) continue;
    EditSample s = base_few_shot_sample("add_detect", seed);
    s.input = quantize8(render(sc));
    Tensor target = render(edited);
    Box b = shape_bbox(edited.shapes[static_cast<size_t>(idx)]);
    b.y0 -= 1;
    b.x0 -= 1;
    b.y1 += 1;
    b.x1 += 1;
    draw_box_outline(target, b);
    s.target = quantize8(std::move(target));
    s.instruction = es.instruction + " and mark it with a box";
    s.input_caption = es.input_caption;
    s.output_caption = es.output_caption;
    return s;
  }
  fail("internal", "few-shot: no room to place an add_detect sample");
}

std::vector<EditSample> few_shot_stream(const std::string& new_task, uint64_t root,
                                        int n) {
  std::vector<EditSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(make_few_shot_sample(new_task, Rng::mix(root, static_cast<uint64_t>(i))));
  return out;
}

std::vector<EditSample> with_task_label(std::vector<EditSample> xs, int row) {
  for (EditSample& x : xs) x.task = row;
  return xs;
}

void validate_few_shot_config(const FewShotConfig& fc) {
  TD_CHECK(!fc.shots.empty(), "bad_config", "few-shot: empty shot list");
  for (int n : fc.shots)
    TD_CHECK(n >= 0, "bad_config", "few-shot: negative shot count " + std::to_string(n));
  TD_CHECK(fc.adapt_steps > 0 && fc.adapt_batch > 0 && fc.adapt_lr > 0.0f, "bad_config",
           "few-shot: bad adaptation budget");
  TD_CHECK(fc.inversion_steps > 0 && fc.inversion_lr > 0.0f, "bad_config",
           "few-shot: bad inversion budget");
  TD_CHECK(fc.val_samples > 0 && fc.val_draws > 0 && fc.metric_samples >= 0, "bad_config",
           "few-shot: bad validation sizes");
}

void check_few_shot_task(const std::string& new_task) {
  const auto& known = few_shot_tasks();
  TD_CHECK(std::find(known.begin(), known.end(), new_task) != known.end(), "bad_arg",
           "few-shot: unknown task '" + new_task + "'");
}

TrainConfig adapt_train_config(const FewShotConfig& fc, uint64_t seed) {
  TrainConfig tc;
  tc.steps = fc.adapt_steps;
  tc.batch_size = fc.adapt_batch;
  tc.lr_peak = fc.adapt_lr;
  tc.warmup_steps = std::min(20, fc.adapt_steps / 10);
  tc.dropout = DropoutRates{0.0f, 0.0f, 0.0f};
  tc.seed = seed;
  return tc;
}

std::string few_shot_row_name(const std::string& new_task) { return "fewshot/" + new_task; }

float oracle_l1_of(const ModelBundle& m, const Tensor& v,
                   const std::vector<EditSample>& val, const FewShotConfig& fc) {
  int k = std::min(fc.metric_samples, static_cast<int>(val.size()));
  if (k == 0) return 0.0f;
  uint64_t root = Rng::mix(fc.seed, 0x6f72636cULL);
  double sum = 0.0;
  for (int j = 0; j < k; ++j) {
    EditRequest req;
    req.image = val[static_cast<size_t>(j)].input;
    req.instruction = val[static_cast<size_t>(j)].instruction;
    req.task_override = v;
    req.guidance = fc.guidance;
    req.seed = Rng::mix(root, static_cast<uint64_t>(j));
    sum += pixel_l1(edit(m, req), val[static_cast<size_t>(j)].target);
  }
  return static_cast<float>(sum / k);
}

FewShotPoint score_few_shot(const ModelBundle& m, const Tensor& v,
                            const std::vector<EditSample>& val, const std::string& mode,
                            int shots, const FewShotConfig& fc) {
  FewShotPoint pt;
  pt.mode = mode;
  pt.shots = shots;
  pt.val_loss = embedding_loss(val, m.params, m.cfg, m.schedule, v,
                               Rng::mix(fc.seed, 0x766c6f73ULL), fc.val_draws);
  pt.oracle_l1 = oracle_l1_of(m, v, val, fc);
  return pt;
}

}  // namespace

std::vector<ImageCaptionPair> embedder_corpus(const std::vector<EditSample>& samples) {
  std::vector<ImageCaptionPair> pairs;
  pairs.reserve(samples.size() * 2);
  for (const EditSample& s : samples) {
    pairs.emplace_back(s.input, s.input_caption);
    pairs.emplace_back(s.target, s.output_caption);
  }
  return pairs;
}

Embedder train_embedder(const std::vector<ImageCaptionPair>& corpus,
                        const EmbedderTrainConfig& cfg) {
  TD_CHECK(cfg.d_e > 0 && cfg.conv_channels > 0 && cfg.steps > 0 && cfg.batch_size >= 2 &&
               cfg.lr > 0.0f && cfg.logit_scale > 0.0f && cfg.min_pairs >= cfg.batch_size,
           "bad_config", "train_embedder: bad config");
  TD_CHECK(static_cast<int>(corpus.size()) >= cfg.min_pairs, "bad_data",
           "train_embedder: corpus too small, need at least " +
               std::to_string(cfg.min_pairs) + " pairs, got " +
               std::to_string(corpus.size()));
  for (size_t i = 0; i < corpus.size(); ++i) {
    const Tensor& img = corpus[i].first;
    TD_CHECK(img.rank() == 3 && img.dim(0) == 3 && img.dim(1) == kCanvas &&
                 img.dim(2) == kCanvas,
             "bad_data", "train_embedder: pair " + std::to_string(i) + " image is " +
                             shape_str(img.shape));
    TD_CHECK(!tokenize(corpus[i].second).empty(), "bad_data",
             "train_embedder: pair " + std::to_string(i) + " caption is empty");
  }

  int c = cfg.conv_channels;
  int vocab = static_cast<int>(vocabulary().size());
  Rng init(Rng::mix(cfg.seed, 0x656d6264ULL));
  Embedder e;
  e.d_e = cfg.d_e;
  e.params["img/conv1_w"] = Tensor::randn(init, {c, 3, 3, 3}, 0.2f);
  e.params["img/conv1_b"] = Tensor::zeros({c});
  e.params["img/conv2_w"] = Tensor::randn(init, {c, c, 3, 3}, 0.12f);
  e.params["img/conv2_b"] = Tensor::zeros({c});
  e.params["img/proj_w"] = Tensor::randn(init, {c * 64, cfg.d_e}, 0.04f);
  e.params["img/proj_b"] = Tensor::zeros({cfg.d_e});
  e.params["txt/w"] = Tensor::randn(init, {vocab, cfg.d_e}, 0.1f);
  e.params["txt/b"] = Tensor::zeros({cfg.d_e});

  std::map<std::string, AdamState> opt;
  std::vector<int> labels(static_cast<size_t>(cfg.batch_size));
  std::iota(labels.begin(), labels.end(), 0);

  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng(Rng::mix(cfg.seed, static_cast<uint64_t>(step)));
    std::vector<int> batch =
        pick_distinct(static_cast<int>(corpus.size()), cfg.batch_size, rng);

    Tape tape(true);
    std::map<std::string, Var> leaves;
    for (auto& [name, t] : e.params) leaves.emplace(name, tape.leaf(&t, true));

    Var img_mat, txt_mat;
    for (int i : batch) {
      const ImageCaptionPair& pair = corpus[static_cast<size_t>(i)];
      Var ie = image_tower(tape, leaves, tape.constant(pair.first), c, cfg.d_e);
      Var te = text_tower(tape, leaves, pair.second);
      img_mat = img_mat.valid() ? tape.concat_rows(img_mat, ie) : ie;
      txt_mat = txt_mat.valid() ? tape.concat_rows(txt_mat, te) : te;
    }
    Var logits_i = tape.scale(tape.matmul_nt(img_mat, txt_mat), cfg.logit_scale);
    Var logits_t = tape.scale(tape.matmul_nt(txt_mat, img_mat), cfg.logit_scale);
    Var loss = tape.scale(tape.add(tape.softmax_cross_entropy(logits_i, labels),
                                   tape.softmax_cross_entropy(logits_t, labels)),
                          0.5f);
    float lv = tape.val(loss).item();
    TD_CHECK(std::isfinite(lv), "nan_loss",
             "train_embedder: non-finite loss at step " + std::to_string(step));
    tape.backward(loss);
    for (auto& [name, leaf] : leaves)
      adam_step(e.params.at(name), tape.grad(leaf), opt[name], cfg.lr);
  }
  return e;
}

Tensor embed_image(const Embedder& e, const Tensor& img) {
  check_embedder(e);
  TD_CHECK(img.rank() == 3 && img.dim(0) == 3, "bad_arg",
           "embed_image: want [3,H,W], got " + shape_str(img.shape));
  Tape tape(false);
  std::map<std::string, Var> leaves;
  for (const auto& [name, t] : e.params) leaves.emplace(name, tape.leaf(&t, false));
  Var out = image_tower(tape, leaves, tape.constant(img), embedder_channels(e), e.d_e);
  return flat_row(tape.val(out));
}

Tensor embed_text(const Embedder& e, const std::string& caption) {
  check_embedder(e);
  Tape tape(false);
  std::map<std::string, Var> leaves;
  for (const auto& [name, t] : e.params) leaves.emplace(name, tape.leaf(&t, false));
  Var out = text_tower(tape, leaves, caption);
  return flat_row(tape.val(out));
}

float retrieval_at_1(const Embedder& e, const std::vector<ImageCaptionPair>& pairs,
                     int batch_size) {
  check_embedder(e);
  TD_CHECK(batch_size >= 2, "bad_arg", "retrieval_at_1: batch_size must be at least 2");
  int batches = static_cast<int>(pairs.size()) / batch_size;
  TD_CHECK(batches >= 1, "bad_arg", "retrieval_at_1: not enough pairs for one batch");
  int correct = 0;
  for (int b = 0; b < batches; ++b) {
    std::vector<Tensor> ie, te;
    for (int i = 0; i < batch_size; ++i) {
      const ImageCaptionPair& p = pairs[static_cast<size_t>(b * batch_size + i)];
      ie.push_back(embed_image(e, p.first));
      te.push_back(embed_text(e, p.second));
    }
    for (int i = 0; i < batch_size; ++i) {
      int best = 0;
      float best_score = t_dot(ie[static_cast<size_t>(i)], te[0]);
      for (int j = 1; j < batch_size; ++j) {
        float score = t_dot(ie[static_cast<size_t>(i)], te[static_cast<size_t>(j)]);
        if (score > best_score) {
          best_score = score;
          best = j;
        }
      }
      if (best == i) ++correct;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(batches * batch_size);
}

NamedTensors pack_embedder(const Embedder& e) {
  check_embedder(e);
  return e.params;
}

Embedder unpack_embedder(const NamedTensors& entries) {
  for (const char* name : kEmbedderNames)
    TD_CHECK(entries.count(name), "bad_data",
             std::string("embedder section missing ") + name);
  Embedder e;
  e.params = entries;
  e.d_e = entries.at("txt/b").dim(0);
  const Tensor& c1 = entries.at("img/conv1_w");
  const Tensor& c2 = entries.at("img/conv2_w");
  const Tensor& pw = entries.at("img/proj_w");
  const Tensor& tw = entries.at("txt/w");
  int c = c1.dim(0);
  TD_CHECK(c1.rank() == 4 && c1.dim(1) == 3, "bad_data", "embedder conv1 shape");
  TD_CHECK(c2.rank() == 4 && c2.dim(0) == c && c2.dim(1) == c, "bad_data",
           "embedder conv2 shape");
  TD_CHECK(pw.rank() == 2 && pw.dim(0) == c * 64 && pw.dim(1) == e.d_e, "bad_data",
           "embedder projection shape");
  TD_CHECK(tw.rank() == 2 && tw.dim(0) == static_cast<int>(vocabulary().size()) &&
               tw.dim(1) == e.d_e,
           "bad_data", "embedder text tower does not match the vocabulary");
  return e;
}

float clip_dir(const Tensor& input_img, const Tensor& output_img,
               const std::string& input_caption, const std::string& output_caption,
               const Embedder& e) {
  Tensor di = t_sub(embed_image(e, output_img), embed_image(e, input_img));
  Tensor dt = t_sub(embed_text(e, output_caption), embed_text(e, input_caption));
  return cosine_clamped(di, dt);
}

float clip_im(const Tensor& a, const Tensor& b, const Embedder& e) {
  return cosine_clamped(embed_image(e, a), embed_image(e, b));
}

float clip_out(const Tensor& img, const std::string& caption, const Embedder& e) {
  return cosine_clamped(embed_image(e, img), embed_text(e, caption));
}

float pixel_l1(const Tensor& a, const Tensor& b) {
  TD_CHECK(a.same_shape(b), "shape_mismatch",
           "pixel_l1: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  return t_l1(a, b);
}

Tensor structure_features(const Tensor& img) {
  TD_CHECK(img.rank() == 3 && img.dim(0) == 3, "bad_arg",
           "structure_features: want [3,H,W], got " + shape_str(img.shape));
  int h = img.dim(1), w = img.dim(2);
  TD_CHECK(h % 8 == 0 && w % 8 == 0 && h >= 8 && w >= 8, "bad_arg",
           "structure_features: H and W must be multiples of 8");
  Tensor edges = sobel_edges(img);
  Tensor out = Tensor::zeros({64 + 48});
  int ebh = h / 8, ebw = w / 8;
  for (int by = 0; by < 8; ++by)
    for (int bx = 0; bx < 8; ++bx) {
      double sum = 0.0;
      for (int y = 0; y < ebh; ++y)
        for (int x = 0; x < ebw; ++x) sum += edges.at(0, by * ebh + y, bx * ebw + x);
      out.at(by * 8 + bx) = static_cast<float>(sum / (ebh * ebw));
    }
  int cbh = h / 4, cbw = w / 4;
  for (int gy = 0; gy < 4; ++gy)
    for (int gx = 0; gx < 4; ++gx)
      for (int c = 0; c < 3; ++c) {
        double sum = 0.0;
        for (int y = 0; y < cbh; ++y)
          for (int x = 0; x < cbw; ++x) sum += img.at(c, gy * cbh + y, gx * cbw + x);
        out.at(64 + (gy * 4 + gx) * 3 + c) = static_cast<float>(sum / (cbh * cbw));
      }
  return out;
}

float dino_sim(const Tensor& a, const Tensor& b) {
  TD_CHECK(a.same_shape(b), "shape_mismatch",
           "dino_sim: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  return cosine_clamped(structure_features(a), structure_features(b));
}

std::string metrics_to_csv(const MetricsReport& r) {
  std::string out = "category,count,clip_dir,clip_im,clip_out,l1,dino\n";
  auto row = [&](const std::string& name, const MetricValues& mv) {
    out += name + "," + std::to_string(mv.count) + "," + fmt_float(mv.clip_dir) + "," +
           fmt_float(mv.clip_im) + "," + fmt_float(mv.clip_out) + "," + fmt_float(mv.l1) +
           "," + fmt_float(mv.dino) + "\n";
  };
  for (const auto& [name, mv] : r.per_category) row(name, mv);
  row("all", r.aggregate);
  return out;
}

MetricsReport metrics_from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  TD_CHECK(std::getline(in, line) && line == "category,count,clip_dir,clip_im,clip_out,l1,dino",
           "bad_data", "metrics csv: bad header");
  MetricsReport r;
  bool saw_all = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f = split_csv_row(line);
    TD_CHECK(f.size() == 7, "bad_data", "metrics csv: bad row '" + line + "'");
    MetricValues mv;
    mv.count = parse_int_field(f[1]);
    mv.clip_dir = parse_float_field(f[2]);
    mv.clip_im = parse_float_field(f[3]);
    mv.clip_out = parse_float_field(f[4]);
    mv.l1 = parse_float_field(f[5]);
    mv.dino = parse_float_field(f[6]);
    if (f[0] == "all") {
      r.aggregate = mv;
      saw_all = true;
    } else {
      TD_CHECK(!r.per_category.count(f[0]), "bad_data",
               "metrics csv: duplicate category '" + f[0] + "'");
      r.per_category[f[0]] = mv;
    }
  }
  TD_CHECK(saw_all, "bad_data", "metrics csv: missing the aggregate row");
  return r;
}

std::string metrics_to_json(const MetricsReport& r) {
  auto to_json = [](const MetricValues& mv) {
    return nlohmann::json{{"count", mv.count},   {"clip_dir", mv.clip_dir},
                          {"clip_im", mv.clip_im}, {"clip_out", mv.clip_out},
                          {"l1", mv.l1},         {"dino", mv.dino}};
  };
  nlohmann::json j;
  j["all"] = to_json(r.aggregate);
  j["categories"] = nlohmann::json::object();
  for (const auto& [name, mv] : r.per_category) j["categories"][name] = to_json(mv);
  return j.dump(2);
}

TaskMode task_mode_from_string(const std::string& s) {
  if (s == "gt") return TaskMode::gt;
  if (s == "predicted") return TaskMode::predicted;
  if (s == "none") return TaskMode::none;
  fail("bad_arg", "unknown task mode '" + s + "'");
}

std::string to_string(TaskMode m) {
  switch (m) {
    case TaskMode::gt: return "gt";
    case TaskMode::predicted: return "predicted";
    case TaskMode::none: return "none";
  }
  return "?";
}

MetricsReport evaluate_model(const ModelBundle& m, const Benchmark& bench,
                             const Embedder& e, TaskMode mode, const EvalConfig& cfg) {
  check_embedder(e);
  TD_CHECK(!bench.categories.empty(), "bad_data", "evaluate_model: empty benchmark");
  for (const std::string& cat : bench.categories) {
    auto it = bench.samples.find(cat);
    TD_CHECK(it != bench.samples.end() && !it->second.empty(), "bad_data",
             "evaluate_model: benchmark category '" + cat + "' has no samples");
  }
  MetricsReport r;
  MetricSums total;
  for (const std::string& cat : bench.categories)
    r.per_category[cat] = eval_samples(m, bench.samples.at(cat), e, mode, cfg, &total);
  r.aggregate = finalize(total);
  return r;
}

std::vector<ComparisonRow> compare_multitask_vs_experts(
    const ModelBundle& multitask, const std::map<std::string, ModelBundle>& experts,
    const Benchmark& bench, const Embedder& e, const EvalConfig& cfg) {
  check_embedder(e);
  TD_CHECK(!experts.empty(), "bad_arg", "compare: no experts given");
  std::vector<ComparisonRow> rows;
  for (const auto& [cat, expert] : experts) {
    auto it = bench.samples.find(cat);
    TD_CHECK(it != bench.samples.end() && !it->second.empty(), "bad_data",
             "compare: benchmark has no category '" + cat + "'");
    ComparisonRow row;
    row.category = cat;
    row.multitask = eval_samples(multitask, it->second, e, TaskMode::gt, cfg, nullptr);
    row.expert = eval_samples(expert, it->second, e, TaskMode::gt, cfg, nullptr);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string comparison_to_csv(const std::vector<ComparisonRow>& rows) {
  std::string out =
      "category,count,mt_clip_dir,mt_clip_im,mt_clip_out,mt_l1,mt_dino,"
      "ex_clip_dir,ex_clip_im,ex_clip_out,ex_l1,ex_dino\n";
  for (const ComparisonRow& r : rows) {
    out += r.category + "," + std::to_string(r.multitask.count);
    for (const MetricValues* mv : {&r.multitask, &r.expert})
      out += "," + fmt_float(mv->clip_dir) + "," + fmt_float(mv->clip_im) + "," +
             fmt_float(mv->clip_out) + "," + fmt_float(mv->l1) + "," + fmt_float(mv->dino);
    out += "\n";
  }
  return out;
}

std::vector<SweepPoint> task_count_sweep(const std::vector<std::vector<int>>& subsets,
                                         const std::vector<EditSample>& dataset,
                                         const Benchmark& bench, const Embedder& e,
                                         const SweepConfig& sc) {
  check_embedder(e);
  TD_CHECK(!subsets.empty(), "bad_arg", "sweep: no task subsets given");
  std::vector<std::string> focus;
  for (const std::string& f : sc.focus_categories) {
    auto it = bench.samples.find(f);
    if (it != bench.samples.end() && !it->second.empty()) focus.push_back(f);
  }
  TD_CHECK(!focus.empty(), "bad_data", "sweep: benchmark has none of the focus categories");

  std::vector<SweepPoint> curve;
  for (const std::vector<int>& subset : subsets) {
    TD_CHECK(!subset.empty(), "bad_arg", "sweep: empty task subset");
    ModelBundle m = train_on_tasks(dataset, subset, sc.model, sc.schedule, sc.train);
    double sum = 0.0;
    int n = 0;
    for (const std::string& cat : focus)
      for (const EditSample& s : bench.samples.at(cat)) {
        Tensor out = edit_benchmark_sample(m, s, TaskMode::gt, sc.eval);
        sum += clip_dir(s.input, out, s.input_caption, s.output_caption, e);
        ++n;
      }
    SweepPoint pt;
    pt.task_count = static_cast<int>(std::set<int>(subset.begin(), subset.end()).size());
    pt.clip_dir = static_cast<float>(sum / n);
    pt.sample_count = n;
    curve.push_back(pt);
  }
  return curve;
}

std::string sweep_to_csv(const std::vector<SweepPoint>& curve) {
  std::string out = "task_count,clip_dir,sample_count\n";
  for (const SweepPoint& p : curve)
    out += std::to_string(p.task_count) + "," + fmt_float(p.clip_dir) + "," +
           std::to_string(p.sample_count) + "\n";
  return out;
}

FewShotMode few_shot_mode_from_string(const std::string& s) {
  if (s == "scratch") return FewShotMode::scratch;
  if (s == "finetune") return FewShotMode::finetune;
  if (s == "inversion") return FewShotMode::inversion;
  fail("bad_arg", "few-shot: unknown mode '" + s + "'");
}

std::string to_string(FewShotMode m) {
  switch (m) {
    case FewShotMode::scratch: return "scratch";
    case FewShotMode::finetune: return "finetune";
    case FewShotMode::inversion: return "inversion";
  }
  return "?";
}

const std::vector<std::string>& few_shot_tasks() {
  static const std::vector<std::string> tasks = {"inpaint", "upscale", "contour",
                                                 "add_detect"};
  return tasks;
}

EditSample make_few_shot_sample(const std::string& new_task, uint64_t seed) {
  check_few_shot_task(new_task);
  Rng rng(Rng::mix(seed, 0x66736d70ULL));
  EditSample s;
  if (new_task == "inpaint") s = make_inpaint_sample(seed, rng);
  else if (new_task == "upscale") s = make_upscale_sample(seed, rng);
  else if (new_task == "contour") s = make_contour_sample(seed, rng);
  else s = make_add_detect_sample(seed, rng);
  s.tokens = tokenize(s.instruction);
  return s;
}

std::vector<FewShotPoint> few_shot_experiment(const ModelBundle& base,
                                              const std::string& new_task,
                                              FewShotMode mode, const FewShotConfig& fc) {
  check_few_shot_task(new_task);
  validate_few_shot_config(fc);
  if (mode != FewShotMode::scratch)
    TD_CHECK(!base.params.empty(), "bad_params", "few-shot: base model has no parameters");
  validate_guidance(fc.guidance, base.schedule, base.cfg.param_kind);

  int max_shots = *std::max_element(fc.shots.begin(), fc.shots.end());
  std::vector<EditSample> pool =
      few_shot_stream(new_task, Rng::mix(fc.seed, 0x66737472ULL), max_shots);
  std::vector<EditSample> val =
      few_shot_stream(new_task, Rng::mix(fc.seed, 0x6673766cULL), fc.val_samples);
  Rng row_rng(Rng::mix(fc.seed, 0x6673726fULL));
  Tensor v_init = Tensor::randn(row_rng, {base.cfg.d_task}, 0.02f);
  const std::string row_name = few_shot_row_name(new_task);

  std::vector<FewShotPoint> points;
  for (int n : fc.shots) {
    std::vector<EditSample> shots(pool.begin(), pool.begin() + n);
    ModelBundle adapted;
    Tensor v;
    if (mode == FewShotMode::inversion) {
      adapted = base;
      if (n > 0) {
        InversionConfig ic;
        ic.steps = fc.inversion_steps;
        ic.lr = fc.inversion_lr;
        ic.seed = Rng::mix(Rng::mix(fc.seed, 0x696e7674ULL), static_cast<uint64_t>(n));
        v = task_inversion(shots, base.params, base.cfg, base.schedule, ic).v;
      } else {
        v = v_init;
      }
    } else {
      if (mode == FewShotMode::scratch) {
        adapted.cfg = base.cfg;
        adapted.schedule = base.schedule;
        adapted.params = make_denoiser_params(base.cfg, Rng::mix(fc.seed, 0x66737363ULL));
        adapted.table = make_task_table(base.cfg.d_task, Rng::mix(fc.seed, 0x66737462ULL));
      } else {
        adapted = base;
      }
      add_task_row(adapted.table, row_name, v_init);
      int row = find_row(adapted.table, row_name);
      if (n > 0)
        adapted = train_resume(
            adapted, with_task_label(shots, row),
            adapt_train_config(fc, Rng::mix(Rng::mix(fc.seed, 0x61647074ULL),
                                            static_cast<uint64_t>(n))));
      v = lookup(adapted.table, row);
    }
    points.push_back(score_few_shot(adapted, v, val, to_string(mode), n, fc));
  }
  return points;
}

FewShotPoint few_shot_expert(const ModelBundle& base, const std::string& new_task,
                             int expert_n, const TrainConfig& tc, const FewShotConfig& fc) {
  check_few_shot_task(new_task);
  validate_few_shot_config(fc);
  TD_CHECK(expert_n > 0, "bad_arg", "few-shot expert: corpus size must be positive");
  validate_guidance(fc.guidance, base.schedule, base.cfg.param_kind);

  std::vector<EditSample> corpus =
      few_shot_stream(new_task, Rng::mix(fc.seed, 0x66736578ULL), expert_n);
  std::vector<EditSample> val =
      few_shot_stream(new_task, Rng::mix(fc.seed, 0x6673766cULL), fc.val_samples);
  Rng row_rng(Rng::mix(fc.seed, 0x6673726fULL));
  Tensor v_init = Tensor::randn(row_rng, {base.cfg.d_task}, 0.02f);

  ModelBundle m;
  m.cfg = base.cfg;
  m.schedule = base.schedule;
  m.params = make_denoiser_params(base.cfg, Rng::mix(fc.seed, 0x66737870ULL));
  m.table = make_task_table(base.cfg.d_task, Rng::mix(fc.seed, 0x66737874ULL));
  add_task_row(m.table, few_shot_row_name(new_task), v_init);
  int row = find_row(m.table, few_shot_row_name(new_task));
  m = train_resume(m, with_task_label(std::move(corpus), row), tc);
  return score_few_shot(m, lookup(m.table, row), val, "expert", expert_n, fc);
}

std::string few_shot_to_csv(const std::vector<FewShotPoint>& points) {
  std::string out = "mode,shots,val_loss,oracle_l1\n";
  for (const FewShotPoint& p : points)
    out += p.mode + "," + std::to_string(p.shots) + "," + fmt_float(p.val_loss) + "," +
           fmt_float(p.oracle_l1) + "\n";
  return out;
}

}  // namespace td
