#pragma once

#include <string>

#include "taskdiff/tensor.hpp"

namespace td {

// Images are [3,H,W] float tensors in [0,1]; masks are [1,H,W] with values
// in {0,1}. Files use binary PPM (P6) / PGM (P5) at 8 bits per channel.

void write_ppm(const std::string& path, const Tensor& img);
Tensor read_ppm(const std::string& path);
void write_pgm(const std::string& path, const Tensor& mask);
Tensor read_pgm(const std::string& path);

Tensor to_gray(const Tensor& img);                     // [3,H,W] -> [1,H,W] luma
Tensor sobel_edges(const Tensor& img);                 // [1,H,W] magnitude in [0,1]
float edge_l1(const Tensor& a, const Tensor& b);       // L1 between edge maps

// Non-tape Gaussian blur; same kernel/padding as Tape::gaussian_blur2d.
Tensor blur2d(const Tensor& x, float sigma);

Tensor adjust_brightness(const Tensor& img, float factor);
Tensor adjust_contrast(const Tensor& img, float factor);
Tensor adjust_saturation(const Tensor& img, float factor);
Tensor invert_colors(const Tensor& img);
Tensor grayscale_image(const Tensor& img);
Tensor sepia_image(const Tensor& img);
// Unsharp mask: img + amount * (img - blur(img, sigma)), clamped.
Tensor sharpen_image(const Tensor& img, float amount, float sigma = 1.0f);

// Binary-mask morphology with a square (Chebyshev) structuring element.
Tensor dilate_mask(const Tensor& mask, int radius);
Tensor threshold_mask(const Tensor& x, float thr);
// Union of two {0,1} masks.
Tensor mask_union(const Tensor& a, const Tensor& b);
float mask_area(const Tensor& mask);

struct Box {
  int y0 = 0, x0 = 0, y1 = -1, x1 = -1;  // inclusive; empty when y1 < y0
  bool empty() const { return y1 < y0 || x1 < x0; }
};
Box bbox_of_mask(const Tensor& mask);

// out = mask * a + (1 - mask) * b, channelwise broadcast of a [1,H,W] mask.
Tensor blend_by_mask(const Tensor& a, const Tensor& b, const Tensor& mask);

}  // namespace td
