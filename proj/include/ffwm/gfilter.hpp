#pragma once

#include <torch/torch.h>

#include "ffwm/core.hpp"

namespace ffwm {

struct GuidedFilterParams {
    int radius = 1;
    double eps = 1e-2;

    /// Radius = floor(resolution / 4), the setting used for the illumination
    /// adaption pathway.
    static GuidedFilterParams for_resolution(int resolution, double eps = 1e-2);
};

/// Per-channel guided filter. For each (2r+1)^2 window k, clipped at the image
/// border: a_k = cov(g,p) / (var(g) + eps), b_k = mean(p) - a_k mean(g);
/// output(i) = mean_a(i) g(i) + mean_b(i). Box sums come from integral images
/// normalized by the true (truncated) window area.
///
/// `input` (p) supplies the low-frequency content, `guide` (g) the structure.
/// Accepts [C,H,W] or [N,C,H,W]; differentiable w.r.t. both arguments.
torch::Tensor guided_filter(const torch::Tensor& input, const torch::Tensor& guide, const GuidedFilterParams& params);

Image guided_filter(const Image& input, const Image& guide, const GuidedFilterParams& params);

/// Truncated-window box sum over a [N,C,H,W] tensor (integral-image path).
torch::Tensor box_sum(const torch::Tensor& x, int radius);

enum class GuidedGradWrt { Input, Guide };

/// Max |analytic - central finite difference| in double precision.
double gfilter_grad_check(const torch::Tensor& input, const torch::Tensor& guide, const GuidedFilterParams& params,
                          GuidedGradWrt wrt, double step = 1e-3);

}  // namespace ffwm
