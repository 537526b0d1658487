#pragma once

// Numeric quality metrics used by validation loops, the evaluation
// protocols, and the reporting CLI. Everything here is pure: plain
// tensors in, doubles (or small tensors) out, no model or I/O deps.

#include "imanim/core/tensor.hpp"

namespace imanim::evalkit {

// Peak signal-to-noise ratio between two same-shaped tensors whose
// values live in [0,1]. Computed in double precision over all
// elements; identical inputs return +infinity. Shape mismatch throws.
double psnr(const Tensor& a, const Tensor& b);

// Structural similarity between two (H,W,3) RGB or (H,W) grayscale
// frames in [0,1]. RGB is reduced to luminance (0.299, 0.587, 0.114)
// first. Uses an 11x11 Gaussian window (sigma 1.5) evaluated at valid
// positions only (no padding), stabilizers C1=(0.01)^2, C2=(0.03)^2.
// Throws if either spatial dim is smaller than the window.
double ssim(const Tensor& a, const Tensor& b);

// Recovers joint image coordinates from per-joint heatmaps.
// `heatmaps` is (J,h,w); the return value is (J,2) rows of (x,y) in
// source-image pixels, assuming the heatmaps were rasterized from a
// (src_h, src_w) canvas. Peak finding is argmax with ties broken
// toward the lowest row-major index, followed by per-axis quadratic
// (three-point parabola) sub-pixel refinement clamped to +/-0.5 grid
// cells; refinement is skipped on axes where the peak touches the
// border or the curvature vanishes.
Tensor extract_joints(const Tensor& heatmaps, int src_h, int src_w);

// Percentage of correct keypoints: fraction of rows of `pred` within
// r * (ground-truth bounding-box diagonal) of the matching row of
// `gt`. Both are (J,2) with J >= 1 (throws otherwise, or on shape
// mismatch). A degenerate single-point gt box gives a zero threshold,
// so only exact hits count.
double pck(const Tensor& pred, const Tensor& gt, double r);

}  // namespace imanim::evalkit
