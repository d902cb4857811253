#include "ffwm/core.hpp"

#include <algorithm>
#include <cmath>

namespace ffwm {

namespace {

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

bool all_finite(const torch::Tensor& t) { return torch::isfinite(t).all().item<bool>(); }

}  // namespace

Image::Image(torch::Tensor data) {
    if (data.dim() != 3 || data.size(0) != 3) {
        throw InvalidArgument("Image expects a [3,H,W] tensor");
    }
    data = data.to(torch::kFloat32).contiguous();
    if (!all_finite(data)) {
        throw InvalidArgument("Image contains non-finite values");
    }
    if (data.min().item<float>() < 0.f || data.max().item<float>() > 1.f) {
        throw InvalidArgument("Image values must lie in [0,1]");
    }
    data_ = std::move(data);
}

Mask::Mask(torch::Tensor data) {
    if (data.dim() == 2) {
        data = data.unsqueeze(0);
    }
    if (data.dim() != 3 || data.size(0) != 1) {
        throw InvalidArgument("Mask expects a [1,H,W] tensor");
    }
    data = data.to(torch::kFloat32).contiguous();
    if (!torch::logical_or(data == 0, data == 1).all().item<bool>()) {
        throw InvalidArgument("Mask values must be 0 or 1");
    }
    data_ = std::move(data);
}

bool Mask::empty() const { return !data_.defined() || data_.sum().item<float>() == 0.f; }

FlowField::FlowField(torch::Tensor data) {
    if (data.dim() != 3 || data.size(0) != 2) {
        throw InvalidArgument("FlowField expects a [2,H,W] tensor");
    }
    data = data.to(torch::kFloat32).contiguous();
    if (!all_finite(data)) {
        throw InvalidArgument("FlowField contains non-finite values");
    }
    const auto w = static_cast<double>(data.size(2));
    const auto h = static_cast<double>(data.size(1));
    data = torch::stack({data[0].clamp(-w, w), data[1].clamp(-h, h)});
    data_ = std::move(data);
}

FlowField FlowField::zeros(int64_t height, int64_t width) {
    return FlowField(torch::zeros({2, height, width}));
}

torch::Tensor landmarks_to_tensor(const LandmarkSet& points) {
    auto t = torch::empty({static_cast<int64_t>(points.size()), 2});
    auto acc = t.accessor<float, 2>();
    for (size_t i = 0; i < points.size(); ++i) {
        acc[i][0] = points[i].x;
        acc[i][1] = points[i].y;
    }
    return t;
}

Point2 sample_flow(const torch::Tensor& flow, Point2 at) {
    const auto f = flow.to(torch::kFloat32).contiguous();
    const auto acc = f.accessor<float, 3>();
    const int64_t h = f.size(1);
    const int64_t w = f.size(2);
    const double x = std::clamp<double>(at.x, 0.0, static_cast<double>(w - 1));
    const double y = std::clamp<double>(at.y, 0.0, static_cast<double>(h - 1));
    const auto x0 = static_cast<int64_t>(std::floor(x));
    const auto y0 = static_cast<int64_t>(std::floor(y));
    const int64_t x1 = std::min(x0 + 1, w - 1);
    const int64_t y1 = std::min(y0 + 1, h - 1);
    const double ax = x - static_cast<double>(x0);
    const double ay = y - static_cast<double>(y0);
    Point2 out;
    for (int c = 0; c < 2; ++c) {
        const double v = acc[c][y0][x0] * (1 - ax) * (1 - ay) + acc[c][y0][x1] * ax * (1 - ay) +
                         acc[c][y1][x0] * (1 - ax) * ay + acc[c][y1][x1] * ax * ay;
        (c == 0 ? out.x : out.y) = static_cast<float>(v);
    }
    return out;
}

namespace {

void check_view(const FaceView& v, const char* name, std::vector<std::string>& out) {
    if (!v.image.defined() || !v.mask.tensor().defined()) {
        out.push_back(std::string(name) + " image or mask missing");
        return;
    }
    const auto& img = v.image.tensor();
    if (img.size(1) % 4 != 0 || img.size(2) % 4 != 0) {
        out.push_back("resolution not a multiple of 4");
    }
    if (!all_finite(img) || img.min().item<float>() < 0.f || img.max().item<float>() > 1.f) {
        out.push_back(std::string(name) + " values out of range");
    }
    if (v.mask.height() != v.image.height() || v.mask.width() != v.image.width()) {
        out.push_back(std::string(name) + " mask size mismatch");
    }
    for (const auto& p : v.landmarks) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y) || p.x < 0.f || p.y < 0.f ||
            p.x > static_cast<float>(v.image.width() - 1) ||
            p.y > static_cast<float>(v.image.height() - 1)) {
            out.push_back(std::string(name) + " landmark out of bounds");
            break;
        }
    }
}

double max_flow_landmark_error(const FlowField& flow, const LandmarkSet& at, const LandmarkSet& to) {
    double worst = 0.0;
    for (size_t i = 0; i < at.size(); ++i) {
        const Point2 d = sample_flow(flow.tensor(), at[i]);
        const double ex = at[i].x + d.x - to[i].x;
        const double ey = at[i].y + d.y - to[i].y;
        worst = std::max(worst, std::hypot(ex, ey));
    }
    return worst;
}

}  // namespace

std::vector<std::string> validate_sample(const Sample& s) {
    std::vector<std::string> out;
    check_view(s.profile, "profile", out);
    check_view(s.frontal, "frontal", out);
    if (!out.empty()) {
        return out;
    }
    if (s.profile.image.height() != s.frontal.image.height() ||
        s.profile.image.width() != s.frontal.image.width()) {
        out.push_back("profile/frontal resolution mismatch");
    }
    if (s.profile.mask.empty() || s.frontal.mask.empty()) {
        out.push_back("mask empty");
    }
    const bool same_count = s.profile.landmarks.size() == s.frontal.landmarks.size();
    if (!same_count) {
        out.push_back("landmark count mismatch");
    }
    if (same_count) {
        bool mismatch = false;
        if (s.gt_forward_flow) {
            mismatch |= max_flow_landmark_error(*s.gt_forward_flow, s.frontal.landmarks,
                                                s.profile.landmarks) > kFlowLandmarkTolerance;
        }
        if (s.gt_reverse_flow) {
            mismatch |= max_flow_landmark_error(*s.gt_reverse_flow, s.profile.landmarks,
                                                s.frontal.landmarks) > kFlowLandmarkTolerance;
        }
        if (mismatch) {
            out.push_back("flow/landmark mismatch");
        }
    }
    return out;
}

torch::Tensor downsample(const torch::Tensor& t, int factor) {
    if (!is_power_of_two(factor)) {
        throw InvalidArgument("downsample factor must be a power of two");
    }
    if (t.size(-1) % factor != 0 || t.size(-2) % factor != 0) {
        throw InvalidArgument("downsample factor must divide height and width");
    }
    if (factor == 1) {
        return t;
    }
    return torch::avg_pool2d(t, {factor, factor}, {factor, factor});
}

Image downsample(const Image& img, int factor) {
    return Image(downsample(img.tensor(), factor).clamp(0.0, 1.0));
}

}  // namespace ffwm
