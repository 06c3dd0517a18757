#include "taskdiff/scene.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace td {

namespace {

struct NamedColor {
  const char* name;
  RGB rgb;
};

const NamedColor kShapeColors[] = {
    {"red", {1.0f, 0.0f, 0.0f}},    {"green", {0.0f, 1.0f, 0.0f}},
    {"blue", {0.0f, 0.0f, 1.0f}},   {"yellow", {1.0f, 1.0f, 0.0f}},
    {"cyan", {0.0f, 1.0f, 1.0f}},   {"orange", {1.0f, 0.5f, 0.0f}},
    {"purple", {0.5f, 0.0f, 1.0f}}, {"white", {1.0f, 1.0f, 1.0f}},
};

const NamedColor kBackgrounds[] = {
    {"black", {0.0f, 0.0f, 0.0f}},
    {"gray", {0.5f, 0.5f, 0.5f}},
    {"silver", {0.75f, 0.75f, 0.75f}},
    {"navy", {0.0f, 0.0f, 0.5f}},
};

// Stripe/dot pixels are drawn at this fraction of the fill color.
constexpr float kTextureDarken = 0.65f;

float dist2(const RGB& a, float r, float g, float b) {
  float dr = a.r - r, dg = a.g - g, db = a.b - b;
  return dr * dr + dg * dg + db * db;
}

}  // namespace

int shape_color_count() { return static_cast<int>(std::size(kShapeColors)); }

RGB shape_color(int idx) {
  TD_CHECK(idx >= 0 && idx < shape_color_count(), "bad_arg", "shape_color: bad index");
  return kShapeColors[idx].rgb;
}

const std::string& shape_color_name(int idx) {
  TD_CHECK(idx >= 0 && idx < shape_color_count(), "bad_arg", "shape_color_name: bad index");
  static std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& c : kShapeColors) out.emplace_back(c.name);
    return out;
  }();
  return names[static_cast<size_t>(idx)];
}

int shape_color_by_name(const std::string& name) {
  for (int i = 0; i < shape_color_count(); ++i)
    if (name == kShapeColors[i].name) return i;
  return -1;
}

int background_count() { return static_cast<int>(std::size(kBackgrounds)); }

RGB background_color(int idx) {
  TD_CHECK(idx >= 0 && idx < background_count(), "bad_arg", "background_color: bad index");
  return kBackgrounds[idx].rgb;
}

const std::string& background_name(int idx) {
  TD_CHECK(idx >= 0 && idx < background_count(), "bad_arg", "background_name: bad index");
  static std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& c : kBackgrounds) out.emplace_back(c.name);
    return out;
  }();
  return names[static_cast<size_t>(idx)];
}

RGB marker_color() { return {1.0f, 0.0f, 1.0f}; }

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

std::string to_string(TextureKind t) {
  switch (t) {
    case TextureKind::solid: return "solid";
    case TextureKind::stripes: return "stripes";
    case TextureKind::dots: return "dots";
  }
  return "?";
}

std::string to_string(PostFx f) {
  switch (f) {
    case PostFx::none: return "none";
    case PostFx::darken: return "darken";
    case PostFx::brighten: return "brighten";
    case PostFx::invert: return "invert";
    case PostFx::grayscale: return "grayscale";
    case PostFx::sepia: return "sepia";
    case PostFx::posterize: return "posterize";
  }
  return "?";
}

ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "circle") return ShapeKind::circle;
  if (s == "square") return ShapeKind::square;
  if (s == "triangle") return ShapeKind::triangle;
  fail("bad_arg", "unknown shape kind '" + s + "'");
}

TextureKind texture_from_string(const std::string& s) {
  if (s == "solid") return TextureKind::solid;
  if (s == "stripes") return TextureKind::stripes;
  if (s == "dots") return TextureKind::dots;
  fail("bad_arg", "unknown texture '" + s + "'");
}

PostFx post_fx_from_string(const std::string& s) {
  for (PostFx f : {PostFx::none, PostFx::darken, PostFx::brighten, PostFx::invert,
                   PostFx::grayscale, PostFx::sepia, PostFx::posterize})
    if (to_string(f) == s) return f;
  fail("bad_arg", "unknown post fx '" + s + "'");
}

std::string object_phrase(const Shape& s) {
  return shape_color_name(s.color) + " " + to_string(s.kind);
}

Tensor shape_footprint(const Shape& s, int h, int w) {
  Tensor m = Tensor::zeros({1, h, w});
  int sz = s.size;
  for (int y = std::max(0, s.cy - sz); y <= std::min(h - 1, s.cy + sz); ++y) {
    for (int x = std::max(0, s.cx - sz); x <= std::min(w - 1, s.cx + sz); ++x) {
      int dx = x - s.cx, dy = y - s.cy;
      bool in = false;
      switch (s.kind) {
        case ShapeKind::circle: in = dx * dx + dy * dy <= sz * sz; break;
        case ShapeKind::square: in = true; break;
        case ShapeKind::triangle: in = std::abs(dx) <= (dy + sz) / 2; break;
      }
      if (in) m.at(0, y, x) = 1.0f;
    }
  }
  return m;
}

Box shape_bbox(const Shape& s) {
  return Box{s.cy - s.size, s.cx - s.size, s.cy + s.size, s.cx + s.size};
}

bool boxes_overlap(const Box& a, const Box& b) {
  if (a.empty() || b.empty()) return false;
  return a.x0 <= b.x1 && b.x0 <= a.x1 && a.y0 <= b.y1 && b.y0 <= a.y1;
}

void validate_scene(const Scene& scene) {
  TD_CHECK(scene.background >= 0 && scene.background < background_count(), "bad_scene",
           "scene: background index out of range");
  TD_CHECK(scene.shapes.size() <= 3, "bad_scene", "scene: more than 3 shapes");
  for (size_t i = 0; i < scene.shapes.size(); ++i) {
    const Shape& s = scene.shapes[i];
    TD_CHECK(s.size >= 4 && s.size <= 12, "bad_scene", "scene: shape size out of [4,12]");
    TD_CHECK(s.color >= 0 && s.color < shape_color_count(), "bad_scene",
             "scene: shape color out of range");
    Box b = shape_bbox(s);
    TD_CHECK(b.y0 >= 0 && b.x0 >= 0 && b.y1 < kCanvas && b.x1 < kCanvas, "bad_scene",
             "scene: shape exceeds canvas");
    for (size_t j = 0; j < i; ++j) {
      const Shape& o = scene.shapes[j];
      TD_CHECK(!(o.kind == s.kind && o.color == s.color), "bad_scene",
               "scene: duplicate (kind,color) pair " + object_phrase(s));
      TD_CHECK(!boxes_overlap(shape_bbox(o), shape_bbox(s)), "bad_scene",
               "scene: overlapping shapes");
    }
  }
}

Scene sample_scene(uint64_t seed) {
  Rng rng(seed);
  return sample_scene(rng);
}

Scene sample_scene(Rng& rng) {
  Scene scene;
  scene.background = rng.uniform_int(0, background_count() - 1);
  int want = rng.uniform_int(1, 3);
  for (int i = 0; i < want; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      Shape s;
      s.kind = static_cast<ShapeKind>(rng.uniform_int(0, 2));
      s.color = rng.uniform_int(0, shape_color_count() - 1);
      bool dup = false;
      for (const Shape& o : scene.shapes)
        if (o.kind == s.kind && o.color == s.color) dup = true;
      if (dup) continue;
      s.size = rng.uniform_int(4, 12);
      if (s.size > (kCanvas - 2) / 2) s.size = (kCanvas - 2) / 2;
      s.cx = rng.uniform_int(s.size, kCanvas - 1 - s.size);
      s.cy = rng.uniform_int(s.size, kCanvas - 1 - s.size);
      s.texture = static_cast<TextureKind>(rng.uniform_int(0, 2));
      // Grow the candidate box by one pixel so distinct shapes can never be
      // 4-connected in the render (keeps the detector's components clean).
      Box nb = shape_bbox(s);
      Box grown{nb.y0 - 1, nb.x0 - 1, nb.y1 + 1, nb.x1 + 1};
      bool collide = false;
      for (const Shape& o : scene.shapes)
        if (boxes_overlap(shape_bbox(o), grown)) collide = true;
      if (collide) continue;
      scene.shapes.push_back(s);
      placed = true;
    }
  }
  if (scene.shapes.empty()) {
    // Canvas can always fit one small shape; retry with shrinking size.
    Shape s;
    s.kind = static_cast<ShapeKind>(rng.uniform_int(0, 2));
    s.color = rng.uniform_int(0, shape_color_count() - 1);
    s.size = 4;
    s.cx = rng.uniform_int(s.size, kCanvas - 1 - s.size);
    s.cy = rng.uniform_int(s.size, kCanvas - 1 - s.size);
    s.texture = static_cast<TextureKind>(rng.uniform_int(0, 2));
    scene.shapes.push_back(s);
  }
  validate_scene(scene);
  return scene;
}

Tensor apply_post_fx(const Tensor& img, PostFx fx) {
  switch (fx) {
    case PostFx::none: return img;
    case PostFx::darken: return adjust_brightness(img, 0.6f);
    case PostFx::brighten: {
      Tensor out = img;
      for (auto& x : out.v) x = 1.0f - (1.0f - x) * 0.6f;
      return out;
    }
    case PostFx::invert: return invert_colors(img);
    case PostFx::grayscale: return grayscale_image(img);
    case PostFx::sepia: return sepia_image(img);
    case PostFx::posterize: {
      Tensor out = img;
      for (auto& x : out.v) x = std::round(x * 3.0f) / 3.0f;
      return out;
    }
  }
  return img;
}

Tensor render(const Scene& scene) {
  validate_scene(scene);
  Tensor img = Tensor::zeros({3, kCanvas, kCanvas});
  RGB bg = background_color(scene.background);
  for (int y = 0; y < kCanvas; ++y)
    for (int x = 0; x < kCanvas; ++x) {
      img.at(0, y, x) = bg.r;
      img.at(1, y, x) = bg.g;
      img.at(2, y, x) = bg.b;
    }
  for (const Shape& s : scene.shapes) {
    Tensor fp = shape_footprint(s);
    RGB c = shape_color(s.color);
    for (int y = 0; y < kCanvas; ++y)
      for (int x = 0; x < kCanvas; ++x) {
        if (fp.at(0, y, x) < 0.5f) continue;
        float f = 1.0f;
        if (s.texture == TextureKind::stripes) {
          if (((y - (s.cy - s.size)) / 2) % 2 == 1) f = kTextureDarken;
        } else if (s.texture == TextureKind::dots) {
          if ((y - s.cy) % 3 == 0 && (x - s.cx) % 3 == 0) f = kTextureDarken;
        }
        img.at(0, y, x) = c.r * f;
        img.at(1, y, x) = c.g * f;
        img.at(2, y, x) = c.b * f;
      }
  }
  return apply_post_fx(img, scene.fx);
}

namespace {

constexpr float kColorCutoff = 0.30f;  // max Euclidean RGB distance for a match
constexpr int kMinComponent = 6;       // px; smaller blobs are treated as noise

struct PixelLabel {
  int color = -1;
  float conf = 0.0f;
};

PixelLabel classify_pixel(float r, float g, float b) {
  PixelLabel best;
  float bestd = kColorCutoff * kColorCutoff;
  for (int ci = 0; ci < shape_color_count(); ++ci) {
    RGB c = shape_color(ci);
    for (float f : {1.0f, kTextureDarken}) {
      RGB v{c.r * f, c.g * f, c.b * f};
      float d = dist2(v, r, g, b);
      if (d < bestd) {
        bestd = d;
        best.color = ci;
        best.conf = 1.0f - std::sqrt(d) / kColorCutoff;
      }
    }
  }
  if (best.color < 0) return best;
  // Reject if a background or the marker color is a closer explanation.
  for (int bi = 0; bi < background_count(); ++bi)
    if (dist2(background_color(bi), r, g, b) < bestd) return PixelLabel{};
  if (dist2(marker_color(), r, g, b) < bestd) return PixelLabel{};
  return best;
}

}  // namespace

std::vector<Detection> detect_shapes(const Tensor& img) {
  TD_CHECK(img.rank() == 3 && img.shape[0] == 3, "bad_image",
           "detect_shapes: expected [3,H,W], got " + shape_str(img.shape));
  int h = img.shape[1], w = img.shape[2];
  std::vector<PixelLabel> labels(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      labels[static_cast<size_t>(y) * w + x] =
          classify_pixel(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));

  std::vector<int> comp(static_cast<size_t>(h) * w, -1);
  std::vector<Detection> out;
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t idx = static_cast<size_t>(y) * w + x;
      if (labels[idx].color < 0 || comp[idx] >= 0) continue;
      int color = labels[idx].color;
      int id = static_cast<int>(out.size());
      stack.clear();
      stack.emplace_back(y, x);
      comp[idx] = id;
      Box box{y, x, y, x};
      int area = 0;
      double conf = 0.0;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        size_t ci = static_cast<size_t>(cy) * w + cx;
        ++area;
        conf += labels[ci].conf;
        box.y0 = std::min(box.y0, cy);
        box.y1 = std::max(box.y1, cy);
        box.x0 = std::min(box.x0, cx);
        box.x1 = std::max(box.x1, cx);
        const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          int ny = cy + dy[k], nx = cx + dx[k];
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          size_t ni = static_cast<size_t>(ny) * w + nx;
          if (comp[ni] >= 0 || labels[ni].color != color) continue;
          comp[ni] = id;
          stack.emplace_back(ny, nx);
        }
      }
      if (area < kMinComponent) {
        out.emplace_back();  // placeholder keeps comp ids aligned
        out.back().score = -1.0f;
        continue;
      }
      Detection d;
      d.box = box;
      d.color = color;
      float fill = static_cast<float>(area) /
                   static_cast<float>((box.y1 - box.y0 + 1) * (box.x1 - box.x0 + 1));
      d.kind = fill >= 0.85f ? ShapeKind::square
                             : (fill >= 0.58f ? ShapeKind::circle : ShapeKind::triangle);
      d.score = static_cast<float>(conf / area);
      out.push_back(d);
    }
  std::vector<Detection> kept;
  for (const Detection& d : out)
    if (d.score >= 0.0f) kept.push_back(d);
  return kept;
}

std::vector<Detection> toy_detector(const Tensor& img, const std::string& phrase) {
  std::istringstream ss(phrase);
  std::string word;
  int color = -1;
  int kind = -1;
  while (ss >> word) {
    int c = shape_color_by_name(word);
    if (c >= 0) color = c;
    if (word == "circle" || word == "square" || word == "triangle")
      kind = static_cast<int>(shape_kind_from_string(word));
  }
  TD_CHECK(color >= 0 && kind >= 0, "bad_arg",
           "toy_detector: phrase '" + phrase + "' must name a color and a shape kind");
  std::vector<Detection> out;
  for (const Detection& d : detect_shapes(img))
    if (d.color == color && static_cast<int>(d.kind) == kind) out.push_back(d);
  return out;
}

int find_shape_index(const Scene& scene, const std::string& phrase) {
  std::istringstream ss(phrase);
  std::string word;
  int color = -1;
  int kind = -1;
  while (ss >> word) {
    int c = shape_color_by_name(word);
    if (c >= 0) color = c;
    if (word == "circle" || word == "square" || word == "triangle")
      kind = static_cast<int>(shape_kind_from_string(word));
  }
  TD_CHECK(color >= 0 && kind >= 0, "bad_arg",
           "find_shape_index: phrase '" + phrase + "' must name a color and a shape kind");
  for (size_t i = 0; i < scene.shapes.size(); ++i)
    if (scene.shapes[i].color == color &&
        static_cast<int>(scene.shapes[i].kind) == kind)
      return static_cast<int>(i);
  return -1;
}

float box_iou(const Box& a, const Box& b) {
  if (a.empty() || b.empty()) return 0.0f;
  int iy0 = std::max(a.y0, b.y0), ix0 = std::max(a.x0, b.x0);
  int iy1 = std::min(a.y1, b.y1), ix1 = std::min(a.x1, b.x1);
  int iw = std::max(0, ix1 - ix0 + 1), ih = std::max(0, iy1 - iy0 + 1);
  float inter = static_cast<float>(iw) * ih;
  float aa = static_cast<float>(a.y1 - a.y0 + 1) * (a.x1 - a.x0 + 1);
  float ab = static_cast<float>(b.y1 - b.y0 + 1) * (b.x1 - b.x0 + 1);
  return inter / (aa + ab - inter);
}

}  // namespace td
