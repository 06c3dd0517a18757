#include "taskdiff/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "taskdiff/common.hpp"

namespace td {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

Tensor quantize_image(const Tensor& img) {
  Tensor out = img;
  for (auto& x : out.v) {
    float c = std::min(1.0f, std::max(0.0f, x));
    x = std::round(c * 255.0f) / 255.0f;
  }
  return out;
}

Tensor union_footprints(const Scene& scene) {
  Tensor m = Tensor::zeros({1, kCanvas, kCanvas});
  for (const Shape& s : scene.shapes) m = mask_union(m, shape_footprint(s));
  return m;
}

// Soft composite used by the dilated_blurred variant: the blend weight decays
// toward the mask boundary, zero outside, so the seam is feathered while
// outside-mask pixels stay bit-identical to the input.
Tensor composite(const Tensor& edited, const Tensor& input, const Tensor& mask,
                 const MaskSpec& ms) {
  if (ms.variant != MaskVariant::dilated_blurred)
    return blend_by_mask(edited, input, mask);
  Tensor soft = t_mul(blur2d(mask, ms.blur_sigma), mask);
  Tensor out = input;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < kCanvas; ++y)
      for (int x = 0; x < kCanvas; ++x) {
        float w = soft.at(0, y, x);
        out.at(c, y, x) = w * edited.at(c, y, x) + (1.0f - w) * input.at(c, y, x);
      }
  return out;
}

float range_sample(Rng& rng, float lo, float hi) { return rng.uniform(lo, hi); }

std::string fmt(float x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", static_cast<double>(x));
  return buf;
}

// Per-task sampler knob ranges carried along for downstream experiments.
void record_ranges(EditSample& out, const TaskId& id, Rng& rng) {
  if (id.name == "local" || id.name == "texture" || id.name == "add" ||
      id.name == "remove") {
    out.provenance["guidance"] = fmt(range_sample(rng, 4.0f, 8.0f));
    out.provenance["n_c"] = fmt(range_sample(rng, 0.3f, 0.9f));
    out.provenance["n_s"] = fmt(range_sample(rng, 0.3f, 0.9f));
    out.provenance["blend_s"] = fmt(range_sample(rng, 0.02f, 0.2f));
  } else if (id.name == "global" || id.name == "background") {
    out.provenance["blend_s"] = fmt(range_sample(rng, 0.1f, 0.2f));
    out.provenance["n_c"] = fmt(range_sample(rng, 0.4f, 0.9f));
    out.provenance["n_s"] = fmt(range_sample(rng, 0.4f, 0.9f));
  } else if (id.name == "style") {
    out.provenance["guidance"] = fmt(range_sample(rng, 6.5f, 10.0f));
    out.provenance["spatial_share"] = "0.8";
  }
}

Tensor color_op(const Tensor& img, const std::string& op) {
  if (op == "brightness_up") return adjust_brightness(img, 1.25f);
  if (op == "brightness_down") return adjust_brightness(img, 0.8f);
  if (op == "contrast_up") return adjust_contrast(img, 1.4f);
  if (op == "saturation_down") return adjust_saturation(img, 0.45f);
  if (op == "blur") return blur2d(img, 0.8f);
  if (op == "sharpen") return sharpen_image(img, 1.0f, 1.0f);
  fail("bad_arg", "unknown color op '" + op + "'");
}

Tensor replicate3(const Tensor& gray) {
  Tensor out = Tensor::zeros({3, gray.dim(1), gray.dim(2)});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < gray.dim(1); ++y)
      for (int x = 0; x < gray.dim(2); ++x) out.at(c, y, x) = gray.at(0, y, x);
  return out;
}

Tensor draw_box_perimeter(const Tensor& img, const Box& b, const RGB& color) {
  Tensor out = img;
  auto put = [&](int y, int x) {
    if (y < 0 || y >= kCanvas || x < 0 || x >= kCanvas) return;
    out.at(0, y, x) = color.r;
    out.at(1, y, x) = color.g;
    out.at(2, y, x) = color.b;
  };
  for (int x = b.x0; x <= b.x1; ++x) {
    put(b.y0, x);
    put(b.y1, x);
  }
  for (int y = b.y0; y <= b.y1; ++y) {
    put(y, b.x0);
    put(y, b.x1);
  }
  return out;
}

void finalize(EditSample& out, const EditSpec& spec, uint64_t seed) {
  out.instruction = spec.instruction;
  out.tokens = tokenize(spec.instruction);
  out.task = spec.task;
  out.input_caption = spec.input_caption;
  out.output_caption = spec.output_caption;
  out.seed = seed;
  out.input = quantize_image(out.input);
  out.target = quantize_image(out.target);
}

EditSample region_sample(const TaskId& id, uint64_t seed, const MaskSpec& ms,
                         Rng& rng) {
  EditSample out;
  Scene in_scene;
  EditSpec spec;
  Tensor precise;

  if (id.name == "add") {
    // The edited scene is drawn first; the input drops the inserted shape.
    Scene out_scene = sample_scene(rng);
    size_t pick = static_cast<size_t>(
        rng.uniform_int(0, static_cast<int>(out_scene.shapes.size()) - 1));
    Shape added = out_scene.shapes[pick];
    in_scene = out_scene;
    in_scene.shapes.erase(in_scene.shapes.begin() + static_cast<long>(pick));
    // Keep painter order deterministic: re-append the shape last so the
    // edited render matches apply_edit_oracle(input, spec).
    spec = make_add_instruction(in_scene, added, rng);
    precise = shape_footprint(added);
  } else {
    in_scene = sample_scene(rng);
    spec = make_instruction(id.index, in_scene, rng);
    if (id.name == "remove" || id.name == "texture") {
      precise = shape_footprint(
          in_scene.shapes[static_cast<size_t>(find_shape_index(in_scene, spec.edited_object))]);
    } else if (id.name == "local") {
      const Shape& old_shape =
          in_scene.shapes[static_cast<size_t>(find_shape_index(in_scene, spec.edited_object))];
      Shape new_shape = old_shape;
      if (spec.oracle_params.at("mode") == "kindswap")
        new_shape.kind = shape_kind_from_string(spec.oracle_params.at("new_kind"));
      precise = mask_union(shape_footprint(old_shape), shape_footprint(new_shape));
    } else if (id.name == "background") {
      Tensor fp = union_footprints(in_scene);
      precise = Tensor::zeros({1, kCanvas, kCanvas});
      for (size_t i = 0; i < fp.v.size(); ++i) precise.v[i] = 1.0f - fp.v[i];
    } else {
      fail("bad_arg", "region_sample: unexpected task '" + id.name + "'");
    }
  }

  Scene edited_scene = apply_edit_oracle(in_scene, spec);
  Tensor input = render(in_scene);
  Tensor edited = render(edited_scene);
  out.mask = apply_mask_variant(precise, ms);
  out.has_mask = true;
  out.mask_variant = to_string(ms.variant);
  out.input = input;
  out.target = composite(edited, input, out.mask, ms);
  out.provenance["dilation_radius"] = std::to_string(ms.dilation_radius);
  out.provenance["blur_sigma"] = fmt(ms.blur_sigma);
  record_ranges(out, id, rng);
  finalize(out, spec, seed);
  return out;
}

}  // namespace

std::string to_string(MaskVariant v) {
  switch (v) {
    case MaskVariant::precise: return "precise";
    case MaskVariant::dilated_blurred: return "dilated_blurred";
    case MaskVariant::bbox: return "bbox";
  }
  fail("bad_arg", "unknown mask variant");
}

MaskVariant mask_variant_from_string(const std::string& s) {
  for (MaskVariant v :
       {MaskVariant::precise, MaskVariant::dilated_blurred, MaskVariant::bbox})
    if (to_string(v) == s) return v;
  fail("bad_arg", "unknown mask variant '" + s + "'");
}

Tensor apply_mask_variant(const Tensor& precise, const MaskSpec& ms) {
  TD_CHECK(precise.rank() == 3 && precise.dim(0) == 1, "shape_mismatch",
           "apply_mask_variant: mask must be [1,H,W]");
  TD_CHECK(ms.dilation_radius >= 0 && ms.blur_sigma > 0.0f, "bad_arg",
           "apply_mask_variant: bad mask parameters");
  if (ms.variant == MaskVariant::precise) return precise;
  Tensor grown = threshold_mask(
      blur2d(dilate_mask(precise, ms.dilation_radius), ms.blur_sigma), 0.5f);
  grown = mask_union(grown, precise);  // blur cannot drop covered pixels
  if (ms.variant == MaskVariant::dilated_blurred) return grown;
  Box bb = bbox_of_mask(grown);
  Tensor box = Tensor::zeros(precise.shape);
  if (!bb.empty())
    for (int y = bb.y0; y <= bb.y1; ++y)
      for (int x = bb.x0; x <= bb.x1; ++x) box.at(0, y, x) = 1.0f;
  return box;
}

Tensor extract_mask(const Scene& scene, const std::string& object, const MaskSpec& ms) {
  int idx = find_shape_index(scene, object);
  TD_CHECK(idx >= 0, "bad_arg", "extract_mask: no '" + object + "' in the scene");
  return apply_mask_variant(shape_footprint(scene.shapes[static_cast<size_t>(idx)]), ms);
}

EditSample synth_pair(int task, uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x6d61736bULL));
  MaskSpec ms;
  ms.variant = static_cast<MaskVariant>(rng.uniform_int(0, 2));
  return synth_pair(task, seed, ms);
}

EditSample synth_pair(int task, uint64_t seed, const MaskSpec& ms) {
  const TaskId& id = task_by_index(task);
  Rng rng(seed);

  if (id.category == TaskCategory::region_based)
    return region_sample(id, seed, ms, rng);

  EditSample out;
  Scene scene = sample_scene(rng);
  EditSpec spec = make_instruction(task, scene, rng);
  Tensor input = render(scene);

  if (id.name == "global" || id.name == "style") {
    out.input = input;
    out.target = render(apply_edit_oracle(scene, spec));
    record_ranges(out, id, rng);
  } else if (id.name == "color") {
    out.input = input;
    out.target = color_op(input, spec.oracle_params.at("op"));
  } else if (id.name == "detect") {
    const Shape& s =
        scene.shapes[static_cast<size_t>(find_shape_index(scene, spec.edited_object))];
    out.input = input;
    out.target = draw_box_perimeter(input, shape_bbox(s), marker_color());
  } else if (id.name == "segment") {
    const Shape& s =
        scene.shapes[static_cast<size_t>(find_shape_index(scene, spec.edited_object))];
    Tensor fp = shape_footprint(s);
    out.input = input;
    out.target = input;
    RGB m = marker_color();
    for (int y = 0; y < kCanvas; ++y)
      for (int x = 0; x < kCanvas; ++x) {
        if (fp.at(0, y, x) < 0.5f) continue;
        out.target.at(0, y, x) = 0.5f * input.at(0, y, x) + 0.5f * m.r;
        out.target.at(1, y, x) = 0.5f * input.at(1, y, x) + 0.5f * m.g;
        out.target.at(2, y, x) = 0.5f * input.at(2, y, x) + 0.5f * m.b;
      }
  } else if (id.name == "edges" || id.name == "from_edges") {
    Tensor edge_map = replicate3(sobel_edges(input));
    if (id.name == "edges") {
      out.input = input;
      out.target = edge_map;
    } else {
      out.input = edge_map;
      out.target = input;
    }
  } else {
    fail("bad_arg", "synth_pair: unhandled task '" + id.name + "'");
  }
  finalize(out, spec, seed);
  return out;
}

std::vector<float> default_task_weights() {
  std::vector<float> w(static_cast<size_t>(task_count()), 0.0f);
  auto set = [&](const char* name, float v) {
    w[static_cast<size_t>(task_by_name(name).index)] = v;
  };
  set("local", 0.20f);
  set("add", 0.13f);
  set("remove", 0.13f);
  set("texture", 0.08f);
  set("background", 0.08f);
  set("global", 0.10f);
  set("style", 0.08f);
  set("color", 0.06f);
  set("detect", 0.04f);
  set("segment", 0.04f);
  set("edges", 0.03f);
  set("from_edges", 0.03f);
  return w;
}

std::vector<EditSample> make_dataset(const DatasetConfig& cfg) {
  TD_CHECK(cfg.count >= 0, "bad_arg", "make_dataset: negative count");
  std::vector<float> weights =
      cfg.task_weights.empty() ? default_task_weights() : cfg.task_weights;
  TD_CHECK(static_cast<int>(weights.size()) == task_count(), "bad_arg",
           "make_dataset: need one weight per task");
  double total = 0.0;
  for (float w : weights) {
    TD_CHECK(w >= 0.0f, "bad_arg", "make_dataset: negative task weight");
    total += w;
  }
  TD_CHECK(total > 0.0, "bad_arg", "make_dataset: all task weights zero");

  std::vector<EditSample> out(static_cast<size_t>(cfg.count));
  parallel_for(static_cast<size_t>(cfg.count), [&](size_t j) {
    uint64_t seed = Rng::mix(cfg.base_seed, j);
    Rng pick(Rng::mix(seed, 0x7461736bULL));
    double u = pick.uniform() * total;
    int task = 0;
    double acc = 0.0;
    for (int t = 0; t < task_count(); ++t) {
      acc += weights[static_cast<size_t>(t)];
      if (u < acc) {
        task = t;
        break;
      }
    }
    MaskSpec ms;
    ms.dilation_radius = cfg.dilation_radius;
    ms.blur_sigma = cfg.blur_sigma;
    ms.variant = static_cast<MaskVariant>(pick.uniform_int(0, 2));
    out[j] = synth_pair(task, seed, ms);
  });
  return out;
}

namespace {

std::string sample_stem(size_t j) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%06zu", j);
  return buf;
}

json sample_record(const EditSample& s, size_t j) {
  json rec;
  std::string stem = sample_stem(j);
  rec["input"] = stem + "_input.ppm";
  rec["target"] = stem + "_target.ppm";
  if (s.has_mask) rec["mask"] = stem + "_mask.pgm";
  rec["instruction"] = s.instruction;
  rec["task"] = task_by_index(s.task).name;
  rec["task_index"] = s.task;
  rec["input_caption"] = s.input_caption;
  rec["output_caption"] = s.output_caption;
  rec["seed"] = s.seed;
  if (s.has_mask) rec["mask_variant"] = s.mask_variant;
  if (!s.provenance.empty()) rec["provenance"] = s.provenance;
  return rec;
}

}  // namespace

void save_dataset(const std::string& dir, const std::vector<EditSample>& samples) {
  fs::create_directories(dir);
  std::ofstream index(fs::path(dir) / "index.jsonl", std::ios::trunc);
  TD_CHECK(index.good(), "io_error", "save_dataset: cannot write " + dir);
  for (size_t j = 0; j < samples.size(); ++j) {
    const EditSample& s = samples[j];
    std::string stem = (fs::path(dir) / sample_stem(j)).string();
    write_ppm(stem + "_input.ppm", s.input);
    write_ppm(stem + "_target.ppm", s.target);
    if (s.has_mask) write_pgm(stem + "_mask.pgm", s.mask);
    index << sample_record(s, j).dump() << "\n";
  }
  TD_CHECK(index.good(), "io_error", "save_dataset: write failed in " + dir);
}

std::vector<EditSample> load_dataset(const std::string& dir) {
  std::ifstream index(fs::path(dir) / "index.jsonl");
  TD_CHECK(index.good(), "io_error", "load_dataset: missing index.jsonl in " + dir);
  std::vector<EditSample> out;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      fail("bad_data", std::string("load_dataset: malformed index line: ") + e.what());
    }
    EditSample s;
    s.input = read_ppm((fs::path(dir) / rec.at("input").get<std::string>()).string());
    s.target = read_ppm((fs::path(dir) / rec.at("target").get<std::string>()).string());
    if (rec.contains("mask")) {
      s.mask = read_pgm((fs::path(dir) / rec.at("mask").get<std::string>()).string());
      s.has_mask = true;
      s.mask_variant = rec.value("mask_variant", "");
    }
    s.instruction = rec.at("instruction").get<std::string>();
    s.tokens = tokenize(s.instruction);
    s.task = rec.at("task_index").get<int>();
    TD_CHECK(task_by_index(s.task).name == rec.at("task").get<std::string>(),
             "bad_data", "load_dataset: task name/index mismatch");
    s.input_caption = rec.value("input_caption", "");
    s.output_caption = rec.value("output_caption", "");
    s.seed = rec.at("seed").get<uint64_t>();
    if (rec.contains("provenance"))
      s.provenance = rec.at("provenance").get<std::map<std::string, std::string>>();
    out.push_back(std::move(s));
  }
  return out;
}

Benchmark build_benchmark(const std::string& root, int n_per_task, uint64_t seed) {
  TD_CHECK(n_per_task >= 1, "bad_arg", "build_benchmark: n_per_task must be >= 1");
  Benchmark bench;
  bench.categories = benchmark_categories();
  // Benchmark indices start beyond any realistic training index, so
  // mix(seed, index) never collides with a training sample of the same seed.
  uint64_t base_index = 1ULL << 32;
  for (size_t c = 0; c < bench.categories.size(); ++c) {
    const std::string& cat = bench.categories[c];
    int task = task_by_name(cat).index;
    std::vector<EditSample> samples(static_cast<size_t>(n_per_task));
    parallel_for(static_cast<size_t>(n_per_task), [&](size_t j) {
      uint64_t index = base_index + c * static_cast<uint64_t>(n_per_task) + j;
      samples[j] = synth_pair(task, Rng::mix(seed, index));
    });
    save_dataset((fs::path(root) / cat).string(), samples);
    bench.samples[cat] = std::move(samples);
  }
  return bench;
}

Benchmark load_benchmark(const std::string& root) {
  Benchmark bench;
  bench.categories = benchmark_categories();
  for (const std::string& cat : bench.categories)
    bench.samples[cat] = load_dataset((fs::path(root) / cat).string());
  return bench;
}

}  // namespace td
