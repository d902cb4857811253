#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace ffwm {

class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// RGB image stored as a float32 [3,H,W] tensor with values in [0,1].
/// Model inputs additionally need H and W to be multiples of 4 so the three
/// loss scales stay integral; validate_sample reports that, the type does not
/// (downsampled scale images are Images too).
class Image {
public:
    Image() = default;
    explicit Image(torch::Tensor data);

    const torch::Tensor& tensor() const { return data_; }
    int64_t height() const { return data_.size(1); }
    int64_t width() const { return data_.size(2); }
    bool defined() const { return data_.defined(); }

private:
    torch::Tensor data_;
};

/// Binary face mask, float32 [1,H,W] holding {0,1}. Emptiness is not rejected
/// here so that malformed samples can still be built and reported.
class Mask {
public:
    Mask() = default;
    explicit Mask(torch::Tensor data);

    const torch::Tensor& tensor() const { return data_; }
    int64_t height() const { return data_.size(1); }
    int64_t width() const { return data_.size(2); }
    bool empty() const;

private:
    torch::Tensor data_;
};

/// Per-pixel displacement field, float32 [2,H,W]; channel 0 is dx, channel 1 is dy.
/// Output pixel (x,y) reads its source at (x+dx, y+dy). Values are clamped to
/// |dx| <= W and |dy| <= H on construction.
class FlowField {
public:
    FlowField() = default;
    explicit FlowField(torch::Tensor data);

    static FlowField zeros(int64_t height, int64_t width);

    const torch::Tensor& tensor() const { return data_; }
    int64_t height() const { return data_.size(1); }
    int64_t width() const { return data_.size(2); }

private:
    torch::Tensor data_;
};

struct Point2 {
    float x = 0.f;
    float y = 0.f;
};

using LandmarkSet = std::vector<Point2>;

/// [N,2] float tensor view of a landmark set.
torch::Tensor landmarks_to_tensor(const LandmarkSet& points);

struct FaceView {
    Image image;
    Mask mask;
    LandmarkSet landmarks;
};

struct Sample {
    FaceView profile;
    FaceView frontal;
    int identity_id = 0;
    int pose_deg = 0;
    int illum_id = 0;
    std::optional<FlowField> gt_forward_flow;  // frontal grid -> samples profile
    std::optional<FlowField> gt_reverse_flow;  // profile grid -> samples frontal
};

inline constexpr double kFlowLandmarkTolerance = 0.5;

/// Checks every Sample invariant and returns one message per violated rule.
std::vector<std::string> validate_sample(const Sample& s);

/// Average-pool downsampling by a power-of-two factor.
Image downsample(const Image& img, int factor);

/// Batched variant over [N,C,H,W] (or [C,H,W]) tensors; used by the multi-scale losses.
torch::Tensor downsample(const torch::Tensor& t, int factor);

/// Samples a [2,H,W] field bilinearly at a fractional pixel position (border clamped).
Point2 sample_flow(const torch::Tensor& flow, Point2 at);

}  // namespace ffwm
