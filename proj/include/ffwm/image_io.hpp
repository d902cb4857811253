#pragma once

#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace ffwm {

/// Reads an 8- or 16-bit PNG as float [C,H,W] in [0,1]; C is 3 for colour
/// files and 1 for grayscale. Throws IoError naming the file on failure.
torch::Tensor read_png(const std::filesystem::path& path);

/// Writes a float [3,H,W] or [1,H,W] tensor in [0,1] as an 8-bit PNG
/// (values are clamped and rounded).
void write_png(const std::filesystem::path& path, const torch::Tensor& chw);

/// Writes an [H,W,3] uint8 RGB tensor.
void write_png_u8(const std::filesystem::path& path, const torch::Tensor& hwc);

/// Resizes a [C,H,W] tensor; `nearest` for masks, area averaging otherwise.
torch::Tensor resize_image(const torch::Tensor& chw, int64_t height, int64_t width, bool nearest = false);

/// Lays out [C,H,W] tiles (C = 1 or 3, equal sizes) row by row with `pad`
/// pixels of white between tiles.
torch::Tensor make_grid(const std::vector<std::vector<torch::Tensor>>& rows, int pad = 2);

}  // namespace ffwm
