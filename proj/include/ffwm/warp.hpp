#pragma once

#include <filesystem>

#include <torch/torch.h>

#include "ffwm/core.hpp"

namespace ffwm {

struct WarpOutput {
    torch::Tensor data;       // same shape as the source
    torch::Tensor in_bounds;  // [N,1,H,W] (or [1,H,W]); 1 where the sample point lay inside the source
};

/// Backward bilinear sampling: out(c,y,x) = src(c, y+dy, x+dx) with the sample
/// coordinate clamped to the source border. Accepts [C,H,W] with [2,H,W] or
/// batched [N,C,H,W] with [N,2,H,W]. Differentiable w.r.t. src and flow.
WarpOutput bilinear_warp(const torch::Tensor& src, const torch::Tensor& flow);

/// Convenience form returning only the warped data.
torch::Tensor warp(const torch::Tensor& src, const torch::Tensor& flow);

enum class WarpGradWrt { Source, Flow };

/// Max |analytic - central finite difference| (step 1e-3) of the warp gradient.
/// Runs in double precision. Flow entries whose sample coordinate lies within
/// the step of an integer lattice line or the clamp border are excluded.
double warp_grad_check(const torch::Tensor& src, const torch::Tensor& flow, WarpGradWrt wrt,
                       double step = 1e-3);

/// Reverses the last (x) axis.
torch::Tensor hflip(const torch::Tensor& t);

/// Resizes a flow field to (height, width) with bilinear interpolation and
/// rescales the displacements to the new pixel grid.
torch::Tensor resize_flow(const torch::Tensor& flow, int64_t height, int64_t width);

/// HSV flow coding: hue = direction, saturation = |v| / max_mag (capped at 1),
/// value = 1. Zero motion is white.
Image flow_to_color(const FlowField& flow, float max_mag);

/// 8-bit [H,W,3] RGB rendering of flow_to_color.
torch::Tensor flow_to_color_u8(const FlowField& flow, float max_mag);

/// Default visualization range: 20% of the image width.
float default_flow_max_mag(const FlowField& flow);

/// Middlebury .flo: "PIEH", int32 W, int32 H, then row-major float32 (dx,dy) pairs, little endian.
void write_flo(const std::filesystem::path& path, const FlowField& flow);
FlowField read_flo(const std::filesystem::path& path);

}  // namespace ffwm
