#include "taskdiff/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "taskdiff/autodiff.hpp"

namespace td {

namespace {

uint8_t quant8(float x) {
  float c = x < 0.0f ? 0.0f : (x > 1.0f ? 1.0f : x);
  return static_cast<uint8_t>(c * 255.0f + 0.5f);
}

void check_image(const Tensor& img, const char* where) {
  TD_CHECK(img.rank() == 3 && img.shape[0] == 3, "bad_image",
           std::string(where) + ": expected [3,H,W], got " + shape_str(img.shape));
}

void check_mask(const Tensor& m, const char* where) {
  TD_CHECK(m.rank() == 3 && m.shape[0] == 1, "bad_mask",
           std::string(where) + ": expected [1,H,W], got " + shape_str(m.shape));
}

void skip_ws_comments(std::istream& in) {
  int c = in.peek();
  while (c == '#' || std::isspace(c)) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else {
      in.get();
    }
    c = in.peek();
  }
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& img) {
  check_image(img, "write_ppm");
  int h = img.shape[1], w = img.shape[2];
  std::ofstream out(path, std::ios::binary);
  TD_CHECK(out.good(), "io_error", "write_ppm: cannot open " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) row[static_cast<size_t>(x) * 3 + c] = quant8(img.at(c, y, x));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  TD_CHECK(out.good(), "io_error", "write_ppm: write failed for " + path);
}

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  TD_CHECK(in.good(), "io_error", "read_ppm: cannot open " + path);
  std::string magic;
  in >> magic;
  TD_CHECK(magic == "P6", "bad_format", "read_ppm: " + path + " is not binary PPM");
  skip_ws_comments(in);
  int w = 0, h = 0, maxv = 0;
  in >> w;
  skip_ws_comments(in);
  in >> h;
  skip_ws_comments(in);
  in >> maxv;
  TD_CHECK(w > 0 && h > 0 && maxv == 255, "bad_format", "read_ppm: unsupported header in " + path);
  in.get();
  std::vector<uint8_t> raw(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  TD_CHECK(in.gcount() == static_cast<std::streamsize>(raw.size()), "bad_format",
           "read_ppm: truncated pixel data in " + path);
  Tensor img = Tensor::zeros({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(raw[(static_cast<size_t>(y) * w + x) * 3 + c]) / 255.0f;
  return img;
}

void write_pgm(const std::string& path, const Tensor& mask) {
  check_mask(mask, "write_pgm");
  int h = mask.shape[1], w = mask.shape[2];
  std::ofstream out(path, std::ios::binary);
  TD_CHECK(out.good(), "io_error", "write_pgm: cannot open " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) row[static_cast<size_t>(x)] = quant8(mask.at(0, y, x));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  TD_CHECK(out.good(), "io_error", "write_pgm: write failed for " + path);
}

Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  TD_CHECK(in.good(), "io_error", "read_pgm: cannot open " + path);
  std::string magic;
  in >> magic;
  TD_CHECK(magic == "P5", "bad_format", "read_pgm: " + path + " is not binary PGM");
  skip_ws_comments(in);
  int w = 0, h = 0, maxv = 0;
  in >> w;
  skip_ws_comments(in);
  in >> h;
  skip_ws_comments(in);
  in >> maxv;
  TD_CHECK(w > 0 && h > 0 && maxv == 255, "bad_format", "read_pgm: unsupported header in " + path);
  in.get();
  std::vector<uint8_t> raw(static_cast<size_t>(w) * h);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  TD_CHECK(in.gcount() == static_cast<std::streamsize>(raw.size()), "bad_format",
           "read_pgm: truncated pixel data in " + path);
  Tensor m = Tensor::zeros({1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      m.at(0, y, x) = static_cast<float>(raw[static_cast<size_t>(y) * w + x]) / 255.0f;
  return m;
}

Tensor to_gray(const Tensor& img) {
  check_image(img, "to_gray");
  int h = img.shape[1], w = img.shape[2];
  Tensor g = Tensor::zeros({1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      g.at(0, y, x) = 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
  return g;
}

Tensor sobel_edges(const Tensor& img) {
  Tensor g = to_gray(img);
  int h = g.shape[1], w = g.shape[2];
  Tensor mag = Tensor::zeros({1, h, w});
  auto px = [&](int y, int x) {
    y = y < 0 ? 0 : (y >= h ? h - 1 : y);
    x = x < 0 ? 0 : (x >= w ? w - 1 : x);
    return g.at(0, y, x);
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float gx = px(y - 1, x + 1) + 2.0f * px(y, x + 1) + px(y + 1, x + 1) -
                 px(y - 1, x - 1) - 2.0f * px(y, x - 1) - px(y + 1, x - 1);
      float gy = px(y + 1, x - 1) + 2.0f * px(y + 1, x) + px(y + 1, x + 1) -
                 px(y - 1, x - 1) - 2.0f * px(y - 1, x) - px(y - 1, x + 1);
      float m = std::sqrt(gx * gx + gy * gy) / 4.0f;
      mag.at(0, y, x) = m > 1.0f ? 1.0f : m;
    }
  return mag;
}

float edge_l1(const Tensor& a, const Tensor& b) { return t_l1(sobel_edges(a), sobel_edges(b)); }

Tensor blur2d(const Tensor& x, float sigma) {
  Tape t(false);
  return t.val(t.gaussian_blur2d(t.input(x, false), sigma));
}

Tensor adjust_brightness(const Tensor& img, float factor) {
  check_image(img, "adjust_brightness");
  return t_clamp(t_scale(img, factor), 0.0f, 1.0f);
}

Tensor adjust_contrast(const Tensor& img, float factor) {
  check_image(img, "adjust_contrast");
  Tensor out = img;
  for (auto& x : out.v) x = 0.5f + (x - 0.5f) * factor;
  return t_clamp(out, 0.0f, 1.0f);
}

Tensor adjust_saturation(const Tensor& img, float factor) {
  check_image(img, "adjust_saturation");
  Tensor g = to_gray(img);
  Tensor out = img;
  int hw = img.shape[1] * img.shape[2];
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < hw; ++i) {
      float gray = g.v[static_cast<size_t>(i)];
      float& x = out.v[static_cast<size_t>(c) * hw + i];
      x = gray + (x - gray) * factor;
    }
  return t_clamp(out, 0.0f, 1.0f);
}

Tensor invert_colors(const Tensor& img) {
  check_image(img, "invert_colors");
  Tensor out = img;
  for (auto& x : out.v) x = 1.0f - x;
  return out;
}

Tensor grayscale_image(const Tensor& img) {
  Tensor g = to_gray(img);
  Tensor out = Tensor::zeros(img.shape);
  int hw = img.shape[1] * img.shape[2];
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < hw; ++i) out.v[static_cast<size_t>(c) * hw + i] = g.v[static_cast<size_t>(i)];
  return out;
}

Tensor sepia_image(const Tensor& img) {
  check_image(img, "sepia_image");
  int hw = img.shape[1] * img.shape[2];
  Tensor out = Tensor::zeros(img.shape);
  for (int i = 0; i < hw; ++i) {
    float r = img.v[static_cast<size_t>(i)];
    float g = img.v[static_cast<size_t>(hw + i)];
    float b = img.v[static_cast<size_t>(2 * hw + i)];
    out.v[static_cast<size_t>(i)] = 0.393f * r + 0.769f * g + 0.189f * b;
    out.v[static_cast<size_t>(hw + i)] = 0.349f * r + 0.686f * g + 0.168f * b;
    out.v[static_cast<size_t>(2 * hw + i)] = 0.272f * r + 0.534f * g + 0.131f * b;
  }
  return t_clamp(out, 0.0f, 1.0f);
}

Tensor sharpen_image(const Tensor& img, float amount, float sigma) {
  check_image(img, "sharpen_image");
  Tensor soft = blur2d(img, sigma);
  Tensor out = img;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += amount * (out.v[i] - soft.v[i]);
  return t_clamp(out, 0.0f, 1.0f);
}

Tensor dilate_mask(const Tensor& mask, int radius) {
  check_mask(mask, "dilate_mask");
  TD_CHECK(radius >= 0, "bad_arg", "dilate_mask: negative radius");
  int h = mask.shape[1], w = mask.shape[2];
  Tensor out = Tensor::zeros(mask.shape);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float m = 0.0f;
      for (int dy = -radius; dy <= radius && m == 0.0f; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          if (mask.at(0, yy, xx) > 0.5f) {
            m = 1.0f;
            break;
          }
        }
      out.at(0, y, x) = m;
    }
  return out;
}

Tensor threshold_mask(const Tensor& x, float thr) {
  Tensor out = x;
  for (auto& v : out.v) v = v >= thr ? 1.0f : 0.0f;
  return out;
}

Tensor mask_union(const Tensor& a, const Tensor& b) {
  TD_CHECK(a.shape == b.shape, "shape_mismatch", "mask_union: shape mismatch");
  Tensor out = a;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::max(out.v[i], b.v[i]);
  return out;
}

float mask_area(const Tensor& mask) {
  double s = 0.0;
  for (float x : mask.v) s += x > 0.5f ? 1.0 : 0.0;
  return static_cast<float>(s);
}

Box bbox_of_mask(const Tensor& mask) {
  check_mask(mask, "bbox_of_mask");
  int h = mask.shape[1], w = mask.shape[2];
  Box b;
  b.y0 = h;
  b.x0 = w;
  b.y1 = -1;
  b.x1 = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask.at(0, y, x) > 0.5f) {
        b.y0 = std::min(b.y0, y);
        b.x0 = std::min(b.x0, x);
        b.y1 = std::max(b.y1, y);
        b.x1 = std::max(b.x1, x);
      }
  return b;
}

Tensor blend_by_mask(const Tensor& a, const Tensor& b, const Tensor& mask) {
  TD_CHECK(a.shape == b.shape, "shape_mismatch", "blend_by_mask: image shapes differ");
  check_mask(mask, "blend_by_mask");
  TD_CHECK(a.rank() == 3 && a.shape[1] == mask.shape[1] && a.shape[2] == mask.shape[2],
           "shape_mismatch", "blend_by_mask: mask does not match image");
  Tensor out = a;
  int hw = a.shape[1] * a.shape[2];
  for (int c = 0; c < a.shape[0]; ++c)
    for (int i = 0; i < hw; ++i) {
      float m = mask.v[static_cast<size_t>(i)];
      size_t idx = static_cast<size_t>(c) * hw + i;
      out.v[idx] = m * a.v[idx] + (1.0f - m) * b.v[idx];
    }
  return out;
}

}  // namespace td
