#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ffwm/core.hpp"

namespace ffwm::testing {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

std::string read_file(const std::filesystem::path& path);

/// Runs a shell command, returns its exit status (stdout/stderr go to `log` if given).
int run_command(const std::string& command, const std::filesystem::path& log = {});

// Reference implementations written as plain loops over doubles.

/// out(c,y,x) = bilinear src at (x+dx, y+dy), coordinates clamped to the border. [C,H,W] / [2,H,W].
torch::Tensor warp_oracle(const torch::Tensor& src, const torch::Tensor& flow);

/// Guided filter by explicit window enumeration. [C,H,W] input and guide.
torch::Tensor guided_filter_oracle(const torch::Tensor& input, const torch::Tensor& guide, int radius, double eps);

/// Sum over scales of sum|pool(a*m) - pool(b*m)| / (C * sum pool(m)), by loops. [N,C,H,W], [N,1,H,W].
double masked_l1_oracle(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask, int scales);

/// mean_k |flow(dst_k) - (src_k - dst_k)|, flow read by explicit bilinear interpolation.
double landmark_loss_oracle(const torch::Tensor& flow, const LandmarkSet& src, const LandmarkSet& dst);

/// HSV (h in degrees, s, v) to RGB in [0,1].
std::array<double, 3> hsv_to_rgb(double h, double s, double v);

}  // namespace ffwm::testing
