#include "ffwm/warp.hpp"

#include <ATen/Dispatch.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace ffwm {

namespace {

using torch::autograd::AutogradContext;
using torch::autograd::variable_list;

struct Tap {
    int64_t x0, x1, y0, y1;
    double ax, ay;
    bool in_bounds;
    bool free_x, free_y;  // sample coordinate strictly inside the clamp range
};

inline Tap make_tap(double sx, double sy, int64_t w, int64_t h) {
    const double wmax = static_cast<double>(w - 1);
    const double hmax = static_cast<double>(h - 1);
    Tap t{};
    t.in_bounds = sx >= 0.0 && sx <= wmax && sy >= 0.0 && sy <= hmax;
    t.free_x = sx > 0.0 && sx < wmax;
    t.free_y = sy > 0.0 && sy < hmax;
    const double cx = std::clamp(sx, 0.0, wmax);
    const double cy = std::clamp(sy, 0.0, hmax);
    t.x0 = static_cast<int64_t>(std::floor(cx));
    t.y0 = static_cast<int64_t>(std::floor(cy));
    t.x1 = std::min(t.x0 + 1, w - 1);
    t.y1 = std::min(t.y0 + 1, h - 1);
    t.ax = cx - static_cast<double>(t.x0);
    t.ay = cy - static_cast<double>(t.y0);
    return t;
}

template <typename scalar_t>
void warp_forward_kernel(const torch::Tensor& src, const torch::Tensor& flow, torch::Tensor& out,
                         torch::Tensor& inb) {
    const int64_t n = src.size(0), c = src.size(1), h = src.size(2), w = src.size(3);
    const auto s = src.accessor<scalar_t, 4>();
    const auto f = flow.accessor<scalar_t, 4>();
    auto o = out.accessor<scalar_t, 4>();
    auto b = inb.accessor<scalar_t, 4>();
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const Tap t = make_tap(static_cast<double>(x) + f[i][0][y][x],
                                       static_cast<double>(y) + f[i][1][y][x], w, h);
                b[i][0][y][x] = t.in_bounds ? scalar_t(1) : scalar_t(0);
                const scalar_t w00 = static_cast<scalar_t>((1.0 - t.ax) * (1.0 - t.ay));
                const scalar_t w01 = static_cast<scalar_t>(t.ax * (1.0 - t.ay));
                const scalar_t w10 = static_cast<scalar_t>((1.0 - t.ax) * t.ay);
                const scalar_t w11 = static_cast<scalar_t>(t.ax * t.ay);
                for (int64_t ch = 0; ch < c; ++ch) {
                    o[i][ch][y][x] = s[i][ch][t.y0][t.x0] * w00 + s[i][ch][t.y0][t.x1] * w01 +
                                     s[i][ch][t.y1][t.x0] * w10 + s[i][ch][t.y1][t.x1] * w11;
                }
            }
        }
    }
}

template <typename scalar_t>
void warp_backward_kernel(const torch::Tensor& grad_out, const torch::Tensor& src, const torch::Tensor& flow,
                          torch::Tensor& grad_src, torch::Tensor& grad_flow) {
    const int64_t n = src.size(0), c = src.size(1), h = src.size(2), w = src.size(3);
    const auto g = grad_out.accessor<scalar_t, 4>();
    const auto s = src.accessor<scalar_t, 4>();
    const auto f = flow.accessor<scalar_t, 4>();
    auto gs = grad_src.accessor<scalar_t, 4>();
    auto gf = grad_flow.accessor<scalar_t, 4>();
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const Tap t = make_tap(static_cast<double>(x) + f[i][0][y][x],
                                       static_cast<double>(y) + f[i][1][y][x], w, h);
                double dx = 0.0, dy = 0.0;
                for (int64_t ch = 0; ch < c; ++ch) {
                    const double go = g[i][ch][y][x];
                    if (go == 0.0) {
                        continue;
                    }
                    const double v00 = s[i][ch][t.y0][t.x0], v01 = s[i][ch][t.y0][t.x1];
                    const double v10 = s[i][ch][t.y1][t.x0], v11 = s[i][ch][t.y1][t.x1];
                    gs[i][ch][t.y0][t.x0] += static_cast<scalar_t>(go * (1.0 - t.ax) * (1.0 - t.ay));
                    gs[i][ch][t.y0][t.x1] += static_cast<scalar_t>(go * t.ax * (1.0 - t.ay));
                    gs[i][ch][t.y1][t.x0] += static_cast<scalar_t>(go * (1.0 - t.ax) * t.ay);
                    gs[i][ch][t.y1][t.x1] += static_cast<scalar_t>(go * t.ax * t.ay);
                    dx += go * ((v01 - v00) * (1.0 - t.ay) + (v11 - v10) * t.ay);
                    dy += go * ((v10 - v00) * (1.0 - t.ax) + (v11 - v01) * t.ax);
                }
                gf[i][0][y][x] = t.free_x ? static_cast<scalar_t>(dx) : scalar_t(0);
                gf[i][1][y][x] = t.free_y ? static_cast<scalar_t>(dy) : scalar_t(0);
            }
        }
    }
}

struct BilinearWarpFunction : public torch::autograd::Function<BilinearWarpFunction> {
    static variable_list forward(AutogradContext* ctx, torch::Tensor src, torch::Tensor flow) {
        src = src.contiguous();
        flow = flow.contiguous();
        ctx->save_for_backward({src, flow});
        auto out = torch::empty_like(src);
        auto inb = torch::empty({src.size(0), 1, src.size(2), src.size(3)}, src.options());
        AT_DISPATCH_FLOATING_TYPES(src.scalar_type(), "bilinear_warp_forward",
                                   [&] { warp_forward_kernel<scalar_t>(src, flow, out, inb); });
        ctx->mark_non_differentiable({inb});
        return {out, inb};
    }

    static variable_list backward(AutogradContext* ctx, variable_list grads) {
        const auto saved = ctx->get_saved_variables();
        const auto& src = saved[0];
        const auto& flow = saved[1];
        auto grad_out = grads[0].contiguous();
        auto grad_src = torch::zeros_like(src);
        auto grad_flow = torch::zeros_like(flow);
        AT_DISPATCH_FLOATING_TYPES(src.scalar_type(), "bilinear_warp_backward", [&] {
            warp_backward_kernel<scalar_t>(grad_out, src, flow, grad_src, grad_flow);
        });
        return {grad_src, grad_flow};
    }
};

}  // namespace

WarpOutput bilinear_warp(const torch::Tensor& src, const torch::Tensor& flow) {
    const bool batched = src.dim() == 4;
    if (!(src.dim() == 3 || src.dim() == 4) || flow.dim() != src.dim()) {
        throw InvalidArgument("bilinear_warp expects [C,H,W]/[2,H,W] or [N,C,H,W]/[N,2,H,W]");
    }
    auto s = batched ? src : src.unsqueeze(0);
    auto f = batched ? flow : flow.unsqueeze(0);
    if (f.size(1) != 2 || f.size(0) != s.size(0) || f.size(2) != s.size(2) || f.size(3) != s.size(3)) {
        throw InvalidArgument("bilinear_warp: flow shape does not match source");
    }
    if (f.scalar_type() != s.scalar_type()) {
        f = f.to(s.scalar_type());
    }
    auto outs = BilinearWarpFunction::apply(s, f);
    if (!batched) {
        return {outs[0].squeeze(0), outs[1].squeeze(0)};
    }
    return {outs[0], outs[1]};
}

torch::Tensor warp(const torch::Tensor& src, const torch::Tensor& flow) { return bilinear_warp(src, flow).data; }

double warp_grad_check(const torch::Tensor& src_in, const torch::Tensor& flow_in, WarpGradWrt wrt, double step) {
    torch::NoGradGuard outer;
    auto src = (src_in.dim() == 3 ? src_in.unsqueeze(0) : src_in).to(torch::kFloat64).clone();
    auto flow = (flow_in.dim() == 3 ? flow_in.unsqueeze(0) : flow_in).to(torch::kFloat64).clone();
    const auto weights = torch::linspace(0.3, 1.7, src.numel(), torch::kFloat64).reshape(src.sizes());

    auto objective = [&](const torch::Tensor& s, const torch::Tensor& f) {
        return (warp(s, f) * weights).sum().item<double>();
    };

    torch::Tensor analytic;
    {
        torch::AutoGradMode on(true);
        auto s = src.clone().set_requires_grad(wrt == WarpGradWrt::Source);
        auto f = flow.clone().set_requires_grad(wrt == WarpGradWrt::Flow);
        (warp(s, f) * weights).sum().backward();
        analytic = (wrt == WarpGradWrt::Source ? s.grad() : f.grad()).clone();
    }

    auto& target = wrt == WarpGradWrt::Source ? src : flow;
    auto flat = target.view(-1);
    const auto a = analytic.view(-1);
    const int64_t h = src.size(2), w = src.size(3);
    double worst = 0.0;
    for (int64_t k = 0; k < flat.numel(); ++k) {
        if (wrt == WarpGradWrt::Flow) {
            // index layout [N,2,H,W]
            const int64_t x = k % w;
            const int64_t y = (k / w) % h;
            const int64_t comp = (k / (w * h)) % 2;
            const double coord = (comp == 0 ? static_cast<double>(x) : static_cast<double>(y)) +
                                 flat[k].item<double>();
            if (std::abs(coord - std::round(coord)) < 2.0 * step) {
                continue;
            }
        }
        const double orig = flat[k].item<double>();
        flat[k] = orig + step;
        const double up = objective(src, flow);
        flat[k] = orig - step;
        const double down = objective(src, flow);
        flat[k] = orig;
        const double fd = (up - down) / (2.0 * step);
        worst = std::max(worst, std::abs(fd - a[k].item<double>()));
    }
    return worst;
}

torch::Tensor hflip(const torch::Tensor& t) { return torch::flip(t, {-1}); }

torch::Tensor resize_flow(const torch::Tensor& flow, int64_t height, int64_t width) {
    const bool batched = flow.dim() == 4;
    auto f = batched ? flow : flow.unsqueeze(0);
    if (f.size(1) != 2) {
        throw InvalidArgument("resize_flow expects a 2-channel flow");
    }
    const int64_t h = f.size(2), w = f.size(3);
    if (h == height && w == width) {
        return flow;
    }
    namespace F = torch::nn::functional;
    auto r = F::interpolate(f, F::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{height, width})
                                   .mode(torch::kBilinear)
                                   .align_corners(false));
    const auto scale = torch::tensor({static_cast<double>(width) / static_cast<double>(w),
                                      static_cast<double>(height) / static_cast<double>(h)},
                                     r.options())
                           .view({1, 2, 1, 1});
    r = r * scale;
    return batched ? r : r.squeeze(0);
}

namespace {

std::array<double, 3> hsv_to_rgb(double hue_deg, double sat, double val) {
    const double c = val * sat;
    const double hp = hue_deg / 60.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) {
        r = c, g = x;
    } else if (hp < 2) {
        r = x, g = c;
    } else if (hp < 3) {
        g = c, b = x;
    } else if (hp < 4) {
        g = x, b = c;
    } else if (hp < 5) {
        r = x, b = c;
    } else {
        r = c, b = x;
    }
    const double m = val - c;
    return {r + m, g + m, b + m};
}

torch::Tensor flow_color_hwc(const FlowField& flow, float max_mag) {
    if (!(max_mag > 0.f)) {
        throw InvalidArgument("flow_to_color: max_mag must be > 0");
    }
    const auto f = flow.tensor().to(torch::kFloat64).contiguous();
    const auto acc = f.accessor<double, 3>();
    const int64_t h = f.size(1), w = f.size(2);
    auto out = torch::empty({h, w, 3}, torch::kFloat64);
    auto o = out.accessor<double, 3>();
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const double dx = acc[0][y][x];
            const double dy = acc[1][y][x];
            double hue = std::atan2(dy, dx) * 180.0 / std::numbers::pi;
            if (hue < 0.0) {
                hue += 360.0;
            }
            if (hue >= 360.0) {
                hue -= 360.0;
            }
            const double sat = std::min(std::hypot(dx, dy) / max_mag, 1.0);
            const auto rgb = hsv_to_rgb(hue, sat, 1.0);
            for (int k = 0; k < 3; ++k) {
                o[y][x][k] = rgb[static_cast<size_t>(k)];
            }
        }
    }
    return out;
}

}  // namespace

Image flow_to_color(const FlowField& flow, float max_mag) {
    return Image(flow_color_hwc(flow, max_mag).permute({2, 0, 1}).to(torch::kFloat32).clamp(0.0, 1.0));
}

torch::Tensor flow_to_color_u8(const FlowField& flow, float max_mag) {
    return flow_color_hwc(flow, max_mag).mul(255.0).round().clamp(0.0, 255.0).to(torch::kUInt8);
}

float default_flow_max_mag(const FlowField& flow) { return 0.2f * static_cast<float>(flow.width()); }

void write_flo(const std::filesystem::path& path, const FlowField& flow) {
    static_assert(std::endian::native == std::endian::little, ".flo writer assumes a little-endian host");
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open flow file for writing: " + path.string());
    }
    const auto hwc = flow.tensor().permute({1, 2, 0}).contiguous();
    const int32_t w = static_cast<int32_t>(flow.width());
    const int32_t h = static_cast<int32_t>(flow.height());
    out.write("PIEH", 4);
    out.write(reinterpret_cast<const char*>(&w), sizeof w);
    out.write(reinterpret_cast<const char*>(&h), sizeof h);
    out.write(reinterpret_cast<const char*>(hwc.data_ptr<float>()),
              static_cast<std::streamsize>(hwc.numel() * sizeof(float)));
    if (!out) {
        throw IoError("failed writing flow file: " + path.string());
    }
}

FlowField read_flo(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open flow file: " + path.string());
    }
    char magic[4];
    int32_t w = 0, h = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&w), sizeof w);
    in.read(reinterpret_cast<char*>(&h), sizeof h);
    if (!in || std::memcmp(magic, "PIEH", 4) != 0) {
        throw IoError("not a .flo file: " + path.string());
    }
    if (w <= 0 || h <= 0 || w > 1 << 15 || h > 1 << 15) {
        throw IoError("implausible .flo dimensions in " + path.string());
    }
    auto hwc = torch::empty({h, w, 2}, torch::kFloat32);
    in.read(reinterpret_cast<char*>(hwc.data_ptr<float>()), static_cast<std::streamsize>(hwc.numel() * sizeof(float)));
    if (!in) {
        throw IoError("truncated .flo file: " + path.string());
    }
    return FlowField(hwc.permute({2, 0, 1}).contiguous());
}

}  // namespace ffwm
