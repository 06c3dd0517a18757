#include "taskdiff/grammar.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

#include "taskdiff/common.hpp"

namespace td {
namespace {

// Template tables. '%' is the object phrase slot, '&' the attribute slot.
// A few entries are deliberately shared across tasks ("make the image
// darker" belongs to both the strong whole-image edit and the mild
// photometric one, "mark the %" to both annotation tasks) so instruction
// text alone does not always identify the task.
const std::vector<std::string> kAddVerbs = {"add", "place", "put", "insert", "draw"};
const std::vector<std::string> kAddSuffixes = {"", " in the image", " to the scene",
                                               " on the canvas"};
const std::vector<std::string> kRemoveVerbs = {"remove", "delete", "erase"};
const std::vector<std::string> kRemoveSuffixes = {"", " from the image",
                                                  " from the scene"};
const std::vector<std::string> kRecolorTpls = {
    "make the % &", "turn the % &", "change the % to &", "repaint the % in &",
    "color the % &"};
const std::vector<std::string> kKindSwapTpls = {
    "turn the % into a &", "replace the % with a &", "change the % into a &",
    "swap the % for a &"};
const std::vector<std::string> kStripesTpls = {
    "make the % striped", "give the % stripes", "fill the % with stripes",
    "add stripes to the %"};
const std::vector<std::string> kDotsTpls = {
    "make the % dotted", "give the % dots", "fill the % with dots",
    "add dots to the %"};
const std::vector<std::string> kSolidTpls = {
    "make the % solid", "give the % a solid fill",
    "fill the % with a solid color", "remove the pattern from the %"};
const std::vector<std::string> kBackgroundTpls = {
    "change the background to &", "make the background &",
    "set the background to &", "paint the background &",
    "turn the background &"};
const std::vector<std::string> kDarkenTpls = {
    "make the whole image darker", "darken the entire image",
    "make everything darker", "dim the whole picture", "make the image darker"};
const std::vector<std::string> kBrightenTpls = {
    "make the whole image brighter", "brighten the entire image",
    "make everything brighter", "light up the whole picture",
    "make the image brighter"};
const std::vector<std::string> kInvertTpls = {
    "invert all the colors", "invert the colors of the whole image",
    "flip every color to its negative", "negate the entire image"};
const std::vector<std::string> kGrayscaleTpls = {
    "convert the image to grayscale", "make it black and white",
    "turn the picture grayscale", "drain all the color out"};
const std::vector<std::string> kSepiaTpls = {
    "apply a sepia style", "give the image a sepia tone",
    "make it look like an old sepia photo", "render the picture in sepia"};
const std::vector<std::string> kPosterizeTpls = {
    "posterize the image", "apply a poster style",
    "flatten the colors into a poster look", "give it a posterized style"};
const std::vector<std::string> kBrightUpTpls = {
    "slightly brighten the image", "bump the brightness up a bit",
    "increase the brightness a little", "make the image brighter"};
const std::vector<std::string> kBrightDownTpls = {
    "slightly darken the image", "lower the brightness a touch",
    "decrease the brightness a little", "make the image darker"};
const std::vector<std::string> kContrastTpls = {
    "increase the contrast", "boost the contrast", "add more contrast"};
const std::vector<std::string> kDesatTpls = {
    "desaturate the colors a bit", "mute the colors", "reduce the saturation"};
const std::vector<std::string> kBlurTpls = {
    "blur the image", "apply a soft blur", "make the picture blurry"};
const std::vector<std::string> kSharpenTpls = {
    "sharpen the image", "crisp up the details", "apply sharpening"};
const std::vector<std::string> kDetectTpls = {
    "draw a box around the %", "put a bounding box on the %",
    "outline the % with a box", "box the %", "mark the %"};
const std::vector<std::string> kSegmentTpls = {
    "highlight the pixels of the %", "paint over the %", "segment the %",
    "shade the % region", "mark the %"};
const std::vector<std::string> kEdgesTpls = {
    "extract the edge map", "show the edges of the image",
    "convert the image to an edge map", "trace all the edges"};
const std::vector<std::string> kFromEdgesTpls = {
    "reconstruct the image from the edges",
    "turn the edge map back into a picture",
    "fill in colors from the edge drawing",
    "render the scene from its edges"};

const std::vector<std::string> kColorOps = {"brightness_up", "brightness_down",
                                            "contrast_up",   "saturation_down",
                                            "blur",          "sharpen"};

std::string color_op_suffix(const std::string& op) {
  if (op == "brightness_up") return ", slightly brighter";
  if (op == "brightness_down") return ", slightly darker";
  if (op == "contrast_up") return ", with higher contrast";
  if (op == "saturation_down") return ", with muted colors";
  if (op == "blur") return ", blurred";
  if (op == "sharpen") return ", sharpened";
  fail("bad_arg", "unknown color op '" + op + "'");
}

const std::string& pick(Rng& rng, const std::vector<std::string>& list) {
  return list[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(list.size()) - 1))];
}

std::string subst(const std::string& tpl, const std::string& obj,
                  const std::string& extra = "") {
  std::string out;
  for (char c : tpl) {
    if (c == '%')
      out += obj;
    else if (c == '&')
      out += extra;
    else
      out += c;
  }
  return out;
}

std::string article(const std::string& phrase) {
  if (phrase.empty()) return "a";
  char c = static_cast<char>(std::tolower(static_cast<unsigned char>(phrase[0])));
  return (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u') ? "an" : "a";
}

std::string shape_phrase(const Shape& s) {
  std::string adj;
  if (s.texture == TextureKind::stripes) adj = "striped ";
  if (s.texture == TextureKind::dots) adj = "dotted ";
  std::string core = adj + object_phrase(s);
  return article(core) + " " + core;
}

std::string list_phrases(const std::vector<std::string>& items) {
  std::string out;
  for (size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += (i + 1 == items.size()) ? " and " : ", ";
    out += items[i];
  }
  return out;
}

bool pair_in_scene(const Scene& scene, ShapeKind kind, int color) {
  for (const Shape& s : scene.shapes)
    if (s.kind == kind && s.color == color) return true;
  return false;
}

bool placement_ok(const Scene& scene, const Shape& s) {
  if (s.cx < s.size || s.cx > kCanvas - 1 - s.size) return false;
  if (s.cy < s.size || s.cy > kCanvas - 1 - s.size) return false;
  Box nb = shape_bbox(s);
  Box grown{nb.y0 - 1, nb.x0 - 1, nb.y1 + 1, nb.x1 + 1};
  for (const Shape& o : scene.shapes)
    if (boxes_overlap(shape_bbox(o), grown)) return false;
  return true;
}

const Shape& pick_target(const Scene& scene, Rng& rng) {
  TD_CHECK(!scene.shapes.empty(), "inapplicable_task",
           "make_instruction: scene has no shapes");
  return scene.shapes[static_cast<size_t>(
      rng.uniform_int(0, static_cast<int>(scene.shapes.size()) - 1))];
}

Shape shape_from_params(const std::map<std::string, std::string>& p) {
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = p.find(k);
    TD_CHECK(it != p.end(), "bad_arg", "edit oracle: missing param '" + k + "'");
    return it->second;
  };
  Shape s;
  s.kind = shape_kind_from_string(get("kind"));
  int color = shape_color_by_name(get("color"));
  TD_CHECK(color >= 0, "bad_arg", "edit oracle: unknown color '" + get("color") + "'");
  s.color = color;
  s.size = std::stoi(get("size"));
  s.cx = std::stoi(get("cx"));
  s.cy = std::stoi(get("cy"));
  s.texture = texture_from_string(get("texture"));
  return s;
}

void put_shape_params(EditSpec& spec, const Shape& s) {
  spec.oracle_params["kind"] = to_string(s.kind);
  spec.oracle_params["color"] = shape_color_name(s.color);
  spec.oracle_params["size"] = std::to_string(s.size);
  spec.oracle_params["cx"] = std::to_string(s.cx);
  spec.oracle_params["cy"] = std::to_string(s.cy);
  spec.oracle_params["texture"] = to_string(s.texture);
}

// Captions for the two scene states; fills input/output captions for the
// scene-graph tasks once oracle_params are final.
void finish_scene_captions(EditSpec& spec, const Scene& scene) {
  spec.input_caption = scene_caption(scene);
  spec.output_caption = scene_caption(apply_edit_oracle(scene, spec));
}

}  // namespace

std::string caption_suffix_for_fx(PostFx fx) {
  switch (fx) {
    case PostFx::none: return "";
    case PostFx::darken: return ", very dark";
    case PostFx::brighten: return ", very bright";
    case PostFx::invert: return ", with inverted colors";
    case PostFx::grayscale: return ", in grayscale";
    case PostFx::sepia: return ", in sepia tones";
    case PostFx::posterize: return ", in a posterized style";
  }
  fail("bad_arg", "unknown post fx");
}

std::string scene_caption(const Scene& scene) {
  std::string out;
  if (scene.shapes.empty()) {
    out = "an empty canvas";
  } else {
    std::vector<std::string> phrases;
    for (const Shape& s : scene.shapes) phrases.push_back(shape_phrase(s));
    out = list_phrases(phrases);
  }
  out += " on a " + background_name(scene.background) + " background";
  out += caption_suffix_for_fx(scene.fx);
  return out;
}

EditSpec make_add_instruction(const Scene& input_scene, const Shape& added, Rng& rng) {
  EditSpec spec;
  spec.task = task_by_name("add").index;
  spec.edited_object = object_phrase(added);
  put_shape_params(spec, added);
  std::string core = shape_phrase(added);  // carries the texture adjective
  spec.instruction = pick(rng, kAddVerbs) + " " + core + pick(rng, kAddSuffixes);
  finish_scene_captions(spec, input_scene);
  return spec;
}

EditSpec make_instruction(int task, const Scene& scene, uint64_t seed) {
  Rng rng(seed);
  return make_instruction(task, scene, rng);
}

EditSpec make_instruction(int task, const Scene& scene, Rng& rng) {
  const TaskId& id = task_by_index(task);
  EditSpec spec;
  spec.task = task;

  if (id.name == "add") {
    TD_CHECK(scene.shapes.size() < 3, "inapplicable_task",
             "make_instruction: scene is full, nothing can be added");
    for (int attempt = 0; attempt < 200; ++attempt) {
      Shape s;
      s.kind = static_cast<ShapeKind>(rng.uniform_int(0, 2));
      s.color = rng.uniform_int(0, shape_color_count() - 1);
      if (pair_in_scene(scene, s.kind, s.color)) continue;
      s.size = rng.uniform_int(4, attempt < 100 ? 12 : 4);
      s.cx = rng.uniform_int(s.size, kCanvas - 1 - s.size);
      s.cy = rng.uniform_int(s.size, kCanvas - 1 - s.size);
      s.texture = static_cast<TextureKind>(rng.uniform_int(0, 2));
      if (!placement_ok(scene, s)) continue;
      return make_add_instruction(scene, s, rng);
    }
    fail("inapplicable_task", "make_instruction: no free cell for an insertion");
  }

  if (id.name == "remove") {
    const Shape& target = pick_target(scene, rng);
    spec.edited_object = object_phrase(target);
    spec.oracle_params["object"] = spec.edited_object;
    spec.instruction = pick(rng, kRemoveVerbs) + " the " + spec.edited_object +
                       pick(rng, kRemoveSuffixes);
    finish_scene_captions(spec, scene);
    return spec;
  }

  if (id.name == "local") {
    const Shape& target = pick_target(scene, rng);
    spec.edited_object = object_phrase(target);
    spec.oracle_params["object"] = spec.edited_object;
    std::vector<int> colors;
    for (int c = 0; c < shape_color_count(); ++c)
      if (c != target.color && !pair_in_scene(scene, target.kind, c))
        colors.push_back(c);
    std::vector<ShapeKind> kinds;
    for (int k = 0; k < 3; ++k) {
      ShapeKind kk = static_cast<ShapeKind>(k);
      if (kk != target.kind && !pair_in_scene(scene, kk, target.color))
        kinds.push_back(kk);
    }
    // Both modes can be blocked only by duplicate pairs; with at most three
    // shapes a recolor target always exists, so prefer the sampled mode and
    // fall back to the other.
    bool recolor = rng.bernoulli(0.5);
    if (recolor && colors.empty()) recolor = false;
    if (!recolor && kinds.empty()) recolor = true;
    TD_CHECK(!(recolor && colors.empty()), "inapplicable_task",
             "make_instruction: no attribute change available");
    if (recolor) {
      int nc = colors[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(colors.size()) - 1))];
      spec.oracle_params["mode"] = "recolor";
      spec.oracle_params["new_color"] = shape_color_name(nc);
      spec.instruction =
          subst(pick(rng, kRecolorTpls), spec.edited_object, shape_color_name(nc));
    } else {
      ShapeKind nk = kinds[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(kinds.size()) - 1))];
      spec.oracle_params["mode"] = "kindswap";
      spec.oracle_params["new_kind"] = to_string(nk);
      spec.instruction =
          subst(pick(rng, kKindSwapTpls), spec.edited_object, to_string(nk));
    }
    finish_scene_captions(spec, scene);
    return spec;
  }

  if (id.name == "texture") {
    const Shape& target = pick_target(scene, rng);
    spec.edited_object = object_phrase(target);
    spec.oracle_params["object"] = spec.edited_object;
    std::vector<TextureKind> options;
    for (int t = 0; t < 3; ++t)
      if (static_cast<TextureKind>(t) != target.texture)
        options.push_back(static_cast<TextureKind>(t));
    TextureKind nt = options[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(options.size()) - 1))];
    spec.oracle_params["new_texture"] = to_string(nt);
    const std::vector<std::string>& tpls = nt == TextureKind::stripes ? kStripesTpls
                                           : nt == TextureKind::dots  ? kDotsTpls
                                                                      : kSolidTpls;
    spec.instruction = subst(pick(rng, tpls), spec.edited_object);
    finish_scene_captions(spec, scene);
    return spec;
  }

  if (id.name == "background") {
    std::vector<int> options;
    for (int b = 0; b < background_count(); ++b)
      if (b != scene.background) options.push_back(b);
    int nb = options[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(options.size()) - 1))];
    spec.oracle_params["new_background"] = background_name(nb);
    spec.instruction = subst(pick(rng, kBackgroundTpls), "", background_name(nb));
    finish_scene_captions(spec, scene);
    return spec;
  }

  if (id.name == "global") {
    static const std::vector<std::string> fxs = {"darken", "brighten", "invert"};
    const std::string& fx = pick(rng, fxs);
    spec.oracle_params["fx"] = fx;
    const std::vector<std::string>& tpls = fx == "darken"     ? kDarkenTpls
                                           : fx == "brighten" ? kBrightenTpls
                                                              : kInvertTpls;
    spec.instruction = pick(rng, tpls);
    finish_scene_captions(spec, scene);
    return spec;
  }

  if (id.name == "style") {
    static const std::vector<std::string> fxs = {"grayscale", "sepia", "posterize"};
    const std::string& fx = pick(rng, fxs);
    spec.oracle_params["fx"] = fx;
    const std::vector<std::string>& tpls = fx == "grayscale" ? kGrayscaleTpls
                                           : fx == "sepia"   ? kSepiaTpls
                                                             : kPosterizeTpls;
    spec.instruction = pick(rng, tpls);
    finish_scene_captions(spec, scene);
    return spec;
  }

  if (id.name == "color") {
    const std::string& op = pick(rng, kColorOps);
    spec.oracle_params["op"] = op;
    const std::vector<std::string>& tpls = op == "brightness_up"     ? kBrightUpTpls
                                           : op == "brightness_down" ? kBrightDownTpls
                                           : op == "contrast_up"     ? kContrastTpls
                                           : op == "saturation_down" ? kDesatTpls
                                           : op == "blur"            ? kBlurTpls
                                                                     : kSharpenTpls;
    spec.instruction = pick(rng, tpls);
    spec.input_caption = scene_caption(scene);
    spec.output_caption = spec.input_caption + color_op_suffix(op);
    return spec;
  }

  if (id.name == "detect" || id.name == "segment") {
    bool detect = id.name == "detect";
    const Shape& target = pick_target(scene, rng);
    spec.edited_object = object_phrase(target);
    spec.oracle_params["object"] = spec.edited_object;
    spec.instruction = subst(pick(rng, detect ? kDetectTpls : kSegmentTpls),
                             spec.edited_object);
    spec.input_caption = scene_caption(scene);
    spec.output_caption =
        spec.input_caption +
        (detect ? ", with a magenta box around the " + spec.edited_object
                : ", with the " + spec.edited_object + " highlighted in magenta");
    return spec;
  }

  if (id.name == "edges") {
    spec.instruction = pick(rng, kEdgesTpls);
    spec.input_caption = scene_caption(scene);
    spec.output_caption = "an edge drawing of the scene";
    return spec;
  }

  if (id.name == "from_edges") {
    spec.instruction = pick(rng, kFromEdgesTpls);
    spec.input_caption = "an edge drawing of the scene";
    spec.output_caption = scene_caption(scene);
    return spec;
  }

  fail("bad_arg", "make_instruction: unhandled task '" + id.name + "'");
}

Scene apply_edit_oracle(const Scene& scene, const EditSpec& spec) {
  const TaskId& id = task_by_index(spec.task);
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = spec.oracle_params.find(k);
    TD_CHECK(it != spec.oracle_params.end(), "bad_arg",
             "edit oracle: missing param '" + k + "'");
    return it->second;
  };
  Scene out = scene;

  if (id.name == "add") {
    Shape s = shape_from_params(spec.oracle_params);
    TD_CHECK(placement_ok(scene, s), "bad_arg",
             "edit oracle: insertion collides with an existing shape");
    out.shapes.push_back(s);
  } else if (id.name == "remove") {
    int idx = find_shape_index(scene, get("object"));
    TD_CHECK(idx >= 0, "bad_arg",
             "edit oracle: no '" + get("object") + "' in the scene");
    out.shapes.erase(out.shapes.begin() + idx);
  } else if (id.name == "local") {
    int idx = find_shape_index(scene, get("object"));
    TD_CHECK(idx >= 0, "bad_arg",
             "edit oracle: no '" + get("object") + "' in the scene");
    if (get("mode") == "recolor") {
      int nc = shape_color_by_name(get("new_color"));
      TD_CHECK(nc >= 0, "bad_arg", "edit oracle: unknown color '" + get("new_color") + "'");
      out.shapes[static_cast<size_t>(idx)].color = nc;
    } else if (get("mode") == "kindswap") {
      out.shapes[static_cast<size_t>(idx)].kind = shape_kind_from_string(get("new_kind"));
    } else {
      fail("bad_arg", "edit oracle: unknown local mode '" + get("mode") + "'");
    }
  } else if (id.name == "texture") {
    int idx = find_shape_index(scene, get("object"));
    TD_CHECK(idx >= 0, "bad_arg",
             "edit oracle: no '" + get("object") + "' in the scene");
    out.shapes[static_cast<size_t>(idx)].texture = texture_from_string(get("new_texture"));
  } else if (id.name == "background") {
    int nb = -1;
    for (int b = 0; b < background_count(); ++b)
      if (background_name(b) == get("new_background")) nb = b;
    TD_CHECK(nb >= 0, "bad_arg",
             "edit oracle: unknown background '" + get("new_background") + "'");
    out.background = nb;
  } else if (id.name == "global" || id.name == "style") {
    out.fx = post_fx_from_string(get("fx"));
  } else {
    fail("unsupported_task",
         "edit oracle: task '" + id.name + "' does not edit the scene graph");
  }
  validate_scene(out);
  return out;
}

namespace {

void add_words(std::set<std::string>& set, const std::string& text) {
  std::string cur;
  for (char raw : text) {
    char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') {
      cur += c;
    } else if (!cur.empty()) {
      set.insert(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) set.insert(cur);
}

std::vector<std::string> build_vocabulary() {
  std::set<std::string> words;
  for (const auto* table :
       {&kAddVerbs, &kAddSuffixes, &kRemoveVerbs, &kRemoveSuffixes, &kRecolorTpls,
        &kKindSwapTpls, &kStripesTpls, &kDotsTpls, &kSolidTpls, &kBackgroundTpls,
        &kDarkenTpls, &kBrightenTpls, &kInvertTpls, &kGrayscaleTpls, &kSepiaTpls,
        &kPosterizeTpls, &kBrightUpTpls, &kBrightDownTpls, &kContrastTpls,
        &kDesatTpls, &kBlurTpls, &kSharpenTpls, &kDetectTpls, &kSegmentTpls,
        &kEdgesTpls, &kFromEdgesTpls})
    for (const std::string& t : *table) add_words(words, t);
  for (int c = 0; c < shape_color_count(); ++c) add_words(words, shape_color_name(c));
  for (int b = 0; b < background_count(); ++b) add_words(words, background_name(b));
  for (const char* k : {"circle", "square", "triangle"}) add_words(words, k);
  add_words(words, "a an and on the striped dotted empty canvas background");
  for (int f = 1; f <= 6; ++f)
    add_words(words, caption_suffix_for_fx(static_cast<PostFx>(f)));
  for (const std::string& op : kColorOps) add_words(words, color_op_suffix(op));
  add_words(words, "with a magenta box around the highlighted in magenta");
  add_words(words, "an edge drawing of the scene");
  std::vector<std::string> vocab = {"<null>", "<pad>", "<unk>"};
  vocab.insert(vocab.end(), words.begin(), words.end());
  return vocab;
}

const std::map<std::string, int>& vocab_index() {
  static const std::map<std::string, int> index = [] {
    std::map<std::string, int> m;
    const auto& v = vocabulary();
    for (size_t i = 0; i < v.size(); ++i) m[v[i]] = static_cast<int>(i);
    return m;
  }();
  return index;
}

}  // namespace

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> vocab = build_vocabulary();
  return vocab;
}

int token_id(const std::string& word) {
  auto it = vocab_index().find(word);
  return it == vocab_index().end() ? kUnkToken : it->second;
}

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> ids;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      ids.push_back(token_id(cur));
      cur.clear();
    }
  };
  for (char raw : text) {
    char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '_')
      cur += c;
    else
      flush();
  }
  flush();
  return ids;
}

std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  const auto& v = vocabulary();
  for (int id : ids) {
    TD_CHECK(id >= 0 && id < static_cast<int>(v.size()), "bad_arg",
             "detokenize: token id out of range");
    if (!out.empty()) out += ' ';
    out += v[static_cast<size_t>(id)];
  }
  return out;
}

}  // namespace td
