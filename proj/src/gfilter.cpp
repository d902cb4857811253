#include "ffwm/gfilter.hpp"

#include <ATen/Dispatch.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace ffwm {

namespace {

using torch::autograd::AutogradContext;
using torch::autograd::variable_list;
using Plane = std::vector<double>;

// Integral-image box sum with windows clipped to the image.
Plane box(const Plane& in, int64_t h, int64_t w, int r) {
    std::vector<double> ii(static_cast<size_t>((h + 1) * (w + 1)), 0.0);
    const auto at = [w](int64_t y, int64_t x) { return static_cast<size_t>(y * (w + 1) + x); };
    for (int64_t y = 0; y < h; ++y) {
        double row = 0.0;
        for (int64_t x = 0; x < w; ++x) {
            row += in[static_cast<size_t>(y * w + x)];
            ii[at(y + 1, x + 1)] = ii[at(y, x + 1)] + row;
        }
    }
    Plane out(in.size());
    for (int64_t y = 0; y < h; ++y) {
        const int64_t y0 = std::max<int64_t>(0, y - r);
        const int64_t y1 = std::min<int64_t>(h - 1, y + r) + 1;
        for (int64_t x = 0; x < w; ++x) {
            const int64_t x0 = std::max<int64_t>(0, x - r);
            const int64_t x1 = std::min<int64_t>(w - 1, x + r) + 1;
            out[static_cast<size_t>(y * w + x)] = ii[at(y1, x1)] - ii[at(y0, x1)] - ii[at(y1, x0)] + ii[at(y0, x0)];
        }
    }
    return out;
}

Plane window_area(int64_t h, int64_t w, int r) {
    Plane n(static_cast<size_t>(h * w));
    for (int64_t y = 0; y < h; ++y) {
        const auto ny = static_cast<double>(std::min<int64_t>(h - 1, y + r) - std::max<int64_t>(0, y - r) + 1);
        for (int64_t x = 0; x < w; ++x) {
            const auto nx = static_cast<double>(std::min<int64_t>(w - 1, x + r) - std::max<int64_t>(0, x - r) + 1);
            n[static_cast<size_t>(y * w + x)] = ny * nx;
        }
    }
    return n;
}

// Normalized box mean.
Plane mean(const Plane& in, const Plane& area, int64_t h, int64_t w, int r) {
    Plane out = box(in, h, w, r);
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] /= area[i];
    }
    return out;
}

struct Coefficients {
    Plane mg, mp, var, a, ma, mb;
};

Coefficients solve(const Plane& p, const Plane& g, const Plane& area, int64_t h, int64_t w, int r, double eps) {
    const size_t n = p.size();
    Plane gp(n), gg(n);
    for (size_t i = 0; i < n; ++i) {
        gp[i] = g[i] * p[i];
        gg[i] = g[i] * g[i];
    }
    Coefficients c;
    c.mg = mean(g, area, h, w, r);
    c.mp = mean(p, area, h, w, r);
    const Plane mgp = mean(gp, area, h, w, r);
    const Plane mgg = mean(gg, area, h, w, r);
    c.var.resize(n);
    c.a.resize(n);
    Plane b(n);
    for (size_t i = 0; i < n; ++i) {
        c.var[i] = mgg[i] - c.mg[i] * c.mg[i];
        const double cov = mgp[i] - c.mg[i] * c.mp[i];
        c.a[i] = cov / (c.var[i] + eps);
        b[i] = c.mp[i] - c.a[i] * c.mg[i];
    }
    c.ma = mean(c.a, area, h, w, r);
    c.mb = mean(b, area, h, w, r);
    return c;
}

template <typename scalar_t>
Plane read_plane(const scalar_t* ptr, size_t n) {
    return Plane(ptr, ptr + n);
}

template <typename scalar_t>
void gf_forward(const torch::Tensor& p, const torch::Tensor& g, torch::Tensor& out, int r, double eps) {
    const int64_t planes = p.size(0) * p.size(1), h = p.size(2), w = p.size(3);
    const auto n = static_cast<size_t>(h * w);
    const Plane area = window_area(h, w, r);
    const scalar_t* pp = p.data_ptr<scalar_t>();
    const scalar_t* gp = g.data_ptr<scalar_t>();
    scalar_t* op = out.data_ptr<scalar_t>();
    for (int64_t k = 0; k < planes; ++k) {
        const Plane pk = read_plane(pp + k * static_cast<int64_t>(n), n);
        const Plane gk = read_plane(gp + k * static_cast<int64_t>(n), n);
        const Coefficients c = solve(pk, gk, area, h, w, r, eps);
        for (size_t i = 0; i < n; ++i) {
            op[k * static_cast<int64_t>(n) + static_cast<int64_t>(i)] = static_cast<scalar_t>(c.ma[i] * gk[i] + c.mb[i]);
        }
    }
}

template <typename scalar_t>
void gf_backward(const torch::Tensor& dq_t, const torch::Tensor& p, const torch::Tensor& g, torch::Tensor& dp_t,
                 torch::Tensor& dg_t, int r, double eps) {
    const int64_t planes = p.size(0) * p.size(1), h = p.size(2), w = p.size(3);
    const auto n = static_cast<size_t>(h * w);
    const auto stride = static_cast<int64_t>(n);
    const Plane area = window_area(h, w, r);
    for (int64_t k = 0; k < planes; ++k) {
        const Plane pk = read_plane(p.data_ptr<scalar_t>() + k * stride, n);
        const Plane gk = read_plane(g.data_ptr<scalar_t>() + k * stride, n);
        const Plane dq = read_plane(dq_t.data_ptr<scalar_t>() + k * stride, n);
        const Coefficients c = solve(pk, gk, area, h, w, r, eps);

        // q = ma * g + mb
        Plane dg(n), dma(n);
        for (size_t i = 0; i < n; ++i) {
            dg[i] = dq[i] * c.ma[i];
            dma[i] = dq[i] * gk[i];
        }
        // Adjoint of the normalized mean: box(d / area).
        auto mean_adjoint = [&](const Plane& d) {
            Plane scaled(n);
            for (size_t i = 0; i < n; ++i) {
                scaled[i] = d[i] / area[i];
            }
            return box(scaled, h, w, r);
        };
        Plane da = mean_adjoint(dma);
        const Plane db = mean_adjoint(dq);

        Plane dmg(n), dmp(n), dmgp(n), dmgg(n);
        for (size_t i = 0; i < n; ++i) {
            // b = mp - a * mg
            dmp[i] = db[i];
            da[i] -= db[i] * c.mg[i];
            dmg[i] = -db[i] * c.a[i];
            // a = cov / (var + eps)
            const double denom = c.var[i] + eps;
            const double dcov = da[i] / denom;
            const double dvar = -da[i] * c.a[i] / denom;
            // cov = mgp - mg * mp ; var = mgg - mg^2
            dmgp[i] = dcov;
            dmg[i] -= dcov * c.mp[i];
            dmp[i] -= dcov * c.mg[i];
            dmgg[i] = dvar;
            dmg[i] -= 2.0 * dvar * c.mg[i];
        }
        const Plane t_mg = mean_adjoint(dmg);
        const Plane t_mp = mean_adjoint(dmp);
        const Plane t_mgp = mean_adjoint(dmgp);
        const Plane t_mgg = mean_adjoint(dmgg);

        scalar_t* dpp = dp_t.data_ptr<scalar_t>() + k * stride;
        scalar_t* dgp = dg_t.data_ptr<scalar_t>() + k * stride;
        for (size_t i = 0; i < n; ++i) {
            dgp[i] = static_cast<scalar_t>(dg[i] + t_mg[i] + t_mgp[i] * pk[i] + 2.0 * gk[i] * t_mgg[i]);
            dpp[i] = static_cast<scalar_t>(t_mp[i] + t_mgp[i] * gk[i]);
        }
    }
}

struct GuidedFilterFunction : public torch::autograd::Function<GuidedFilterFunction> {
    static torch::Tensor forward(AutogradContext* ctx, torch::Tensor p, torch::Tensor g, int64_t radius, double eps) {
        p = p.contiguous();
        g = g.contiguous();
        ctx->save_for_backward({p, g});
        ctx->saved_data["radius"] = radius;
        ctx->saved_data["eps"] = eps;
        auto out = torch::empty_like(p);
        AT_DISPATCH_FLOATING_TYPES(p.scalar_type(), "guided_filter_forward", [&] {
            gf_forward<scalar_t>(p, g, out, static_cast<int>(radius), eps);
        });
        return out;
    }

    static variable_list backward(AutogradContext* ctx, variable_list grads) {
        const auto saved = ctx->get_saved_variables();
        const auto r = static_cast<int>(ctx->saved_data["radius"].toInt());
        const double eps = ctx->saved_data["eps"].toDouble();
        auto dq = grads[0].contiguous();
        auto dp = torch::empty_like(saved[0]);
        auto dg = torch::empty_like(saved[1]);
        AT_DISPATCH_FLOATING_TYPES(dq.scalar_type(), "guided_filter_backward", [&] {
            gf_backward<scalar_t>(dq, saved[0], saved[1], dp, dg, r, eps);
        });
        return {dp, dg, torch::Tensor(), torch::Tensor()};
    }
};

}  // namespace

GuidedFilterParams GuidedFilterParams::for_resolution(int resolution, double eps) {
    return GuidedFilterParams{std::max(1, resolution / 4), eps};
}

torch::Tensor guided_filter(const torch::Tensor& input, const torch::Tensor& guide, const GuidedFilterParams& params) {
    if (input.sizes() != guide.sizes()) {
        throw InvalidArgument("guided_filter: input and guide must have the same shape");
    }
    if (input.dim() != 3 && input.dim() != 4) {
        throw InvalidArgument("guided_filter expects [C,H,W] or [N,C,H,W]");
    }
    if (params.radius < 1 || !(params.eps > 0.0)) {
        throw InvalidArgument("guided_filter: radius must be >= 1 and eps > 0");
    }
    const bool batched = input.dim() == 4;
    auto p = batched ? input : input.unsqueeze(0);
    auto g = batched ? guide : guide.unsqueeze(0);
    if (g.scalar_type() != p.scalar_type()) {
        g = g.to(p.scalar_type());
    }
    auto out = GuidedFilterFunction::apply(p, g, params.radius, params.eps);
    return batched ? out : out.squeeze(0);
}

Image guided_filter(const Image& input, const Image& guide, const GuidedFilterParams& params) {
    return Image(guided_filter(input.tensor(), guide.tensor(), params).clamp(0.0, 1.0));
}

torch::Tensor box_sum(const torch::Tensor& x, int radius) {
    auto t = (x.dim() == 3 ? x.unsqueeze(0) : x).to(torch::kFloat64).contiguous();
    const int64_t planes = t.size(0) * t.size(1), h = t.size(2), w = t.size(3);
    const auto n = static_cast<size_t>(h * w);
    auto out = torch::empty_like(t);
    for (int64_t k = 0; k < planes; ++k) {
        const double* src = t.data_ptr<double>() + k * static_cast<int64_t>(n);
        const Plane s = box(Plane(src, src + n), h, w, radius);
        std::copy(s.begin(), s.end(), out.data_ptr<double>() + k * static_cast<int64_t>(n));
    }
    out = out.to(x.scalar_type());
    return x.dim() == 3 ? out.squeeze(0) : out;
}

double gfilter_grad_check(const torch::Tensor& input, const torch::Tensor& guide, const GuidedFilterParams& params,
                          GuidedGradWrt wrt, double step) {
    torch::NoGradGuard outer;
    auto p = input.to(torch::kFloat64).clone();
    auto g = guide.to(torch::kFloat64).clone();
    const auto weights = torch::linspace(0.3, 1.7, p.numel(), torch::kFloat64).reshape(p.sizes());

    torch::Tensor analytic;
    {
        torch::AutoGradMode on(true);
        auto pv = p.clone().set_requires_grad(wrt == GuidedGradWrt::Input);
        auto gv = g.clone().set_requires_grad(wrt == GuidedGradWrt::Guide);
        (guided_filter(pv, gv, params) * weights).sum().backward();
        analytic = (wrt == GuidedGradWrt::Input ? pv.grad() : gv.grad()).clone();
    }
    auto& target = wrt == GuidedGradWrt::Input ? p : g;
    auto flat = target.view(-1);
    const auto a = analytic.view(-1);
    double worst = 0.0;
    for (int64_t k = 0; k < flat.numel(); ++k) {
        const double orig = flat[k].item<double>();
        flat[k] = orig + step;
        const double up = (guided_filter(p, g, params) * weights).sum().item<double>();
        flat[k] = orig - step;
        const double down = (guided_filter(p, g, params) * weights).sum().item<double>();
        flat[k] = orig;
        worst = std::max(worst, std::abs((up - down) / (2.0 * step) - a[k].item<double>()));
    }
    return worst;
}

}  // namespace ffwm
