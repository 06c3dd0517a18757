#pragma once

#include <string>
#include <vector>

#include "taskdiff/image.hpp"

namespace td {

constexpr int kCanvas = 32;

enum class ShapeKind { circle, square, triangle };
enum class TextureKind { solid, stripes, dots };

// Whole-image transform applied after rasterization; carries the scene-level
// effect of the free-form edit tasks.
enum class PostFx { none, darken, brighten, invert, grayscale, sepia, posterize };

struct RGB {
  float r = 0, g = 0, b = 0;
};

// Shape fill colors; never used for backgrounds. Index into shape_palette().
int shape_color_count();
RGB shape_color(int idx);
const std::string& shape_color_name(int idx);
int shape_color_by_name(const std::string& name);  // -1 when unknown

int background_count();
RGB background_color(int idx);
const std::string& background_name(int idx);

// Reserved annotation color for the vision tasks; excluded from both
// palettes so marker pixels are unambiguous.
RGB marker_color();

std::string to_string(ShapeKind k);
std::string to_string(TextureKind t);
std::string to_string(PostFx f);
ShapeKind shape_kind_from_string(const std::string& s);
TextureKind texture_from_string(const std::string& s);
PostFx post_fx_from_string(const std::string& s);

struct Shape {
  ShapeKind kind = ShapeKind::circle;
  int color = 0;  // shape palette index
  int cx = 0, cy = 0;
  int size = 4;  // radius / half-width, 4..12
  TextureKind texture = TextureKind::solid;
};

struct Scene {
  int background = 0;  // background palette index
  std::vector<Shape> shapes;
  PostFx fx = PostFx::none;
};

// "red circle" phrase used by instructions, captions and the detector.
std::string object_phrase(const Shape& s);

// Binary footprint of one shape on an h x w canvas, ignoring texture.
Tensor shape_footprint(const Shape& s, int h = kCanvas, int w = kCanvas);
// Inclusive bounds box (center +- size), before canvas clipping.
Box shape_bbox(const Shape& s);
bool boxes_overlap(const Box& a, const Box& b);

void validate_scene(const Scene& scene);

// Deterministic scene draw: 1-3 non-overlapping shapes, unique (kind,color)
// pairs, placement by rejection sampling.
Scene sample_scene(uint64_t seed);
Scene sample_scene(Rng& rng);

// Painter's-order rasterization onto the background, then the PostFx pass.
Tensor render(const Scene& scene);
Tensor apply_post_fx(const Tensor& img, PostFx fx);

// Finds shapes by flood-filling pixels whose color matches a shape palette
// entry (or its texture-darkened variant), then classifying each component
// by its bbox fill ratio: filled squares sit near 1, circles near pi/4,
// triangles near 1/2.
struct Detection {
  Box box;
  ShapeKind kind = ShapeKind::circle;
  int color = 0;
  float score = 0.0f;  // mean color-match confidence in (0,1]
};

std::vector<Detection> detect_shapes(const Tensor& img);
// phrase must contain a shape color name and a kind name, e.g. "red circle".
std::vector<Detection> toy_detector(const Tensor& img, const std::string& phrase);

// Index of the shape matching a "color kind" phrase, or -1 when absent.
int find_shape_index(const Scene& scene, const std::string& phrase);

float box_iou(const Box& a, const Box& b);

}  // namespace td
