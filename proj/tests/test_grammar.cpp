#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>
#include <set>

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

Scene fixed_scene() {
  Scene scene;
  scene.background = 0;
  Shape circ;
  circ.kind = ShapeKind::circle;
  circ.color = shape_color_by_name("red");
  circ.cx = 9;
  circ.cy = 9;
  circ.size = 5;
  Shape sq;
  sq.kind = ShapeKind::square;
  sq.color = shape_color_by_name("blue");
  sq.cx = 23;
  sq.cy = 22;
  sq.size = 5;
  sq.texture = TextureKind::stripes;
  scene.shapes = {circ, sq};
  return scene;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

}  // namespace

TEST_CASE("vocabulary: specials, uniqueness, id round trip") {
  const auto& vocab = vocabulary();
  REQUIRE(vocab.size() > 3);
  CHECK(vocab[0] == "<null>");
  CHECK(vocab[1] == "<pad>");
  CHECK(vocab[2] == "<unk>");
  std::set<std::string> unique(vocab.begin(), vocab.end());
  CHECK(unique.size() == vocab.size());
  for (size_t i = 3; i < vocab.size(); ++i)
    CHECK(token_id(vocab[i]) == static_cast<int>(i));
  CHECK(token_id("qwertyuiop") == kUnkToken);
  // Closed-world vocabulary stays small.
  CHECK(vocab.size() < 400);
}

TEST_CASE("tokenize: lowercase, punctuation stripping, round trip") {
  auto ids = tokenize("  Remove the RED circle, please?? ");
  std::vector<int> want = {token_id("remove"), token_id("the"), token_id("red"),
                           token_id("circle"), kUnkToken};
  CHECK(ids == want);
  CHECK(tokenize("").empty());
  CHECK(detokenize(tokenize("add a blue square")) == "add a blue square");
  CHECK_THROWS_AS(detokenize({-1}), Error);
  CHECK_THROWS_AS(detokenize({1 << 20}), Error);
}

TEST_CASE("every generated instruction and caption tokenizes without <unk>") {
  int checked = 0;
  for (uint64_t seed = 0; seed < 2000; ++seed) {
    Scene scene = sample_scene(Rng::mix(99, seed));
    int task = static_cast<int>(seed % static_cast<uint64_t>(task_count()));
    EditSpec spec;
    try {
      spec = make_instruction(task, scene, seed);
    } catch (const Error& e) {
      CHECK(e.code == "inapplicable_task");
      continue;
    }
    for (const std::string* text :
         {&spec.instruction, &spec.input_caption, &spec.output_caption}) {
      auto ids = tokenize(*text);
      CHECK(!ids.empty());
      for (int id : ids) {
        if (id == kUnkToken) MESSAGE("unknown word in: " << *text);
        CHECK(id != kUnkToken);
      }
    }
    ++checked;
  }
  CHECK(checked > 1800);
}

TEST_CASE("make_instruction is deterministic in the seed") {
  Scene scene = fixed_scene();
  for (int task = 0; task < task_count(); ++task) {
    EditSpec a = make_instruction(task, scene, 42);
    EditSpec b = make_instruction(task, scene, 42);
    EditSpec c = make_instruction(task, scene, 43);
    CHECK(a.instruction == b.instruction);
    CHECK(a.oracle_params == b.oracle_params);
    CHECK(a.output_caption == b.output_caption);
    // A different seed changes at least something across tasks (checked in
    // the diversity case below); here just require a valid spec.
    CHECK(c.task == task);
  }
}

TEST_CASE("instruction diversity: several phrasings per task") {
  Scene scene = fixed_scene();
  for (int task = 0; task < task_count(); ++task) {
    std::set<std::string> seen;
    for (uint64_t seed = 0; seed < 60; ++seed)
      seen.insert(make_instruction(task, scene, seed).instruction);
    CHECK(seen.size() >= 3);
  }
}

TEST_CASE("object tasks name an object that exists in the scene") {
  Scene scene = fixed_scene();
  for (const char* name : {"remove", "local", "texture", "detect", "segment"}) {
    int task = task_by_name(name).index;
    for (uint64_t seed = 0; seed < 20; ++seed) {
      EditSpec spec = make_instruction(task, scene, seed);
      CHECK(find_shape_index(scene, spec.edited_object) >= 0);
      CHECK(contains(spec.instruction, spec.edited_object));
      CHECK(spec.oracle_params.at("object") == spec.edited_object);
    }
  }
}

TEST_CASE("scene captions list shapes in painter order with texture adjectives") {
  Scene scene = fixed_scene();
  std::string cap = scene_caption(scene);
  CHECK(cap == "a red circle and a striped blue square on a black background");
  scene.shapes[1].texture = TextureKind::dots;
  CHECK(contains(scene_caption(scene), "a dotted blue square"));
  scene.fx = PostFx::sepia;
  CHECK(contains(scene_caption(scene), "in sepia tones"));
  Scene empty;
  empty.background = 0;
  CHECK(scene_caption(empty) == "an empty canvas on a black background");

  Shape orange;
  orange.kind = ShapeKind::triangle;
  orange.color = shape_color_by_name("orange");
  orange.cx = 16;
  orange.cy = 16;
  orange.size = 6;
  Scene s2;
  s2.background = 1;
  s2.shapes = {orange};
  CHECK(contains(scene_caption(s2), "an orange triangle"));
  s2.shapes[0].texture = TextureKind::stripes;
  CHECK(contains(scene_caption(s2), "a striped orange triangle"));
}

TEST_CASE("edit oracle: add and remove are inverse scene edits") {
  for (uint64_t seed = 0; seed < 200; ++seed) {
    Scene scene = sample_scene(seed);
    if (scene.shapes.size() >= 3) continue;
    Rng rng(seed * 7 + 1);
    EditSpec add;
    try {
      add = make_instruction(task_by_name("add").index, scene, rng);
    } catch (const Error& e) {
      CHECK(e.code == "inapplicable_task");
      continue;
    }
    Scene grown = apply_edit_oracle(scene, add);
    CHECK(grown.shapes.size() == scene.shapes.size() + 1);
    CHECK(object_phrase(grown.shapes.back()) == add.edited_object);

    EditSpec remove;
    remove.task = task_by_name("remove").index;
    remove.oracle_params["object"] = add.edited_object;
    Scene back = apply_edit_oracle(grown, remove);
    REQUIRE(back.shapes.size() == scene.shapes.size());
    CHECK(t_equal(render(back), render(scene)));
  }
}

TEST_CASE("edit oracle: local, texture, background, global, style") {
  Scene scene = fixed_scene();

  EditSpec recolor;
  recolor.task = task_by_name("local").index;
  recolor.oracle_params = {{"object", "red circle"},
                           {"mode", "recolor"},
                           {"new_color", "green"}};
  Scene s1 = apply_edit_oracle(scene, recolor);
  CHECK(shape_color_name(s1.shapes[0].color) == "green");
  CHECK(s1.shapes[0].kind == ShapeKind::circle);
  CHECK(s1.shapes.size() == 2);

  EditSpec swap;
  swap.task = recolor.task;
  swap.oracle_params = {{"object", "red circle"},
                        {"mode", "kindswap"},
                        {"new_kind", "triangle"}};
  Scene s2 = apply_edit_oracle(scene, swap);
  CHECK(s2.shapes[0].kind == ShapeKind::triangle);
  CHECK(s2.shapes[0].color == scene.shapes[0].color);

  EditSpec tex;
  tex.task = task_by_name("texture").index;
  tex.oracle_params = {{"object", "blue square"}, {"new_texture", "dots"}};
  CHECK(apply_edit_oracle(scene, tex).shapes[1].texture == TextureKind::dots);

  EditSpec bg;
  bg.task = task_by_name("background").index;
  bg.oracle_params = {{"new_background", "navy"}};
  CHECK(background_name(apply_edit_oracle(scene, bg).background) == "navy");

  EditSpec fx;
  fx.task = task_by_name("global").index;
  fx.oracle_params = {{"fx", "invert"}};
  CHECK(apply_edit_oracle(scene, fx).fx == PostFx::invert);
  fx.task = task_by_name("style").index;
  fx.oracle_params = {{"fx", "posterize"}};
  CHECK(apply_edit_oracle(scene, fx).fx == PostFx::posterize);
}

TEST_CASE("edit oracle error codes") {
  Scene scene = fixed_scene();

  EditSpec missing;
  missing.task = task_by_name("remove").index;
  missing.oracle_params = {{"object", "green triangle"}};
  CHECK(code_of([&] { apply_edit_oracle(scene, missing); }) == "bad_arg");

  EditSpec vision;
  vision.task = task_by_name("detect").index;
  vision.oracle_params = {{"object", "red circle"}};
  CHECK(code_of([&] { apply_edit_oracle(scene, vision); }) == "unsupported_task");
  vision.task = task_by_name("edges").index;
  CHECK(code_of([&] { apply_edit_oracle(scene, vision); }) == "unsupported_task");

  // Recoloring into an existing (kind,color) pair breaks scene validity.
  Scene dup = scene;
  dup.shapes.push_back(scene.shapes[0]);
  dup.shapes[2].kind = ShapeKind::square;
  dup.shapes[2].cx = 9;
  dup.shapes[2].cy = 23;
  EditSpec clash;
  clash.task = task_by_name("local").index;
  clash.oracle_params = {{"object", "red circle"},
                         {"mode", "recolor"},
                         {"new_color", "blue"}};
  dup.shapes[2].color = shape_color_by_name("blue");
  dup.shapes[2].kind = ShapeKind::circle;
  CHECK(code_of([&] { apply_edit_oracle(dup, clash); }) == "bad_scene");

  Scene full = fixed_scene();
  Shape extra;
  extra.kind = ShapeKind::triangle;
  extra.color = shape_color_by_name("yellow");
  extra.cx = 9;
  extra.cy = 23;
  extra.size = 5;
  full.shapes.push_back(extra);
  CHECK(code_of([&] { make_instruction(task_by_name("add").index, full, 1); }) ==
        "inapplicable_task");

  Scene empty;
  CHECK(code_of([&] { make_instruction(task_by_name("remove").index, empty, 1); }) ==
        "inapplicable_task");
}

TEST_CASE("make_instruction never proposes an invalid edit") {
  for (uint64_t seed = 0; seed < 500; ++seed) {
    Scene scene = sample_scene(Rng::mix(7, seed));
    for (const char* name :
         {"add", "remove", "local", "texture", "background", "global", "style"}) {
      EditSpec spec;
      try {
        spec = make_instruction(task_by_name(name).index, scene, seed);
      } catch (const Error& e) {
        CHECK(e.code == "inapplicable_task");
        continue;
      }
      Scene edited = apply_edit_oracle(scene, spec);
      CHECK_NOTHROW(validate_scene(edited));
      CHECK(spec.output_caption == scene_caption(edited));
      CHECK(spec.input_caption == scene_caption(scene));
    }
  }
}

TEST_CASE("shared phrasings exist across task pairs") {
  Scene scene = fixed_scene();
  auto gather = [&](const char* name) {
    std::set<std::string> out;
    for (uint64_t seed = 0; seed < 400; ++seed)
      out.insert(make_instruction(task_by_name(name).index, scene, seed).instruction);
    return out;
  };
  auto overlaps = [](const std::set<std::string>& a, const std::set<std::string>& b) {
    for (const auto& s : a)
      if (b.count(s)) return true;
    return false;
  };
  CHECK(overlaps(gather("global"), gather("color")));
  CHECK(overlaps(gather("detect"), gather("segment")));
  // The overlap is partial: each task keeps unambiguous phrasings too.
  std::set<std::string> g = gather("global"), c = gather("color");
  bool global_only = false;
  for (const auto& s : g)
    if (!c.count(s)) global_only = true;
  CHECK(global_only);
}

TEST_CASE("task registry exposes the benchmark categories") {
  CHECK(task_count() == 12);
  CHECK(task_by_name("add").category == TaskCategory::region_based);
  CHECK(task_by_name("style").category == TaskCategory::free_form);
  CHECK(task_by_name("edges").category == TaskCategory::vision);
  auto cats = benchmark_categories();
  CHECK(cats.size() == 7);
  for (const auto& c : cats) CHECK(task_exists(c));
  CHECK_THROWS_AS(task_by_name("nonexistent"), Error);
  CHECK_THROWS_AS(task_by_index(12), Error);
}
