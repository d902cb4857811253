#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ffwm/config.hpp"
#include "ffwm/core.hpp"
#include "ffwm/nets.hpp"

namespace ffwm {

/// Fixed feature pyramid standing in for an ImageNet VGG-19. Five taps at
/// 1, 1/2, 1/4, 1/8 and 1/16 resolution play the role of conv1_1 .. conv5_1
/// (post-ReLU). Weights are seeded and never trained; `load_weights` accepts a
/// real set of taps when one is available.
class PerceptualBackboneImpl : public torch::nn::Module {
public:
    static constexpr int kTaps = 5;

    explicit PerceptualBackboneImpl(uint64_t seed);

    std::vector<torch::Tensor> forward(const torch::Tensor& image);

    /// Output of the first `count` taps only.
    std::vector<torch::Tensor> taps(const torch::Tensor& image, int count);

    void load_weights(const std::filesystem::path& path);

private:
    std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(PerceptualBackbone);

/// Axis-aligned box in pixels, [x0,x1) x [y0,y1).
struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    int area() const { return std::max(0, x1 - x0) * std::max(0, y1 - y0); }
};

/// Square box of side `side` centered on the centroid of the selected landmarks,
/// clipped to the image. Empty landmark selection yields a zero-area box.
Box region_box(const LandmarkSet& landmarks, const std::vector<int>& indices, int side, int width, int height);

/// Multi-scale masked L1: sum over s of mean |ds(a*m) - ds(b*m)| normalized by
/// the pooled mask mass, scales 1, 1/2, ..., 1/2^(S-1). [N,C,H,W] inputs,
/// [N,1,H,W] mask. Pixels with mask 0 never influence the result.
torch::Tensor multiscale_masked_l1(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask,
                                   int scales);

/// Per-scale terms of multiscale_masked_l1.
std::vector<torch::Tensor> masked_l1_per_scale(const torch::Tensor& a, const torch::Tensor& b,
                                               const torch::Tensor& mask, int scales);

torch::Tensor pixel_loss(const torch::Tensor& guided, const torch::Tensor& target, const torch::Tensor& mask,
                         int scales);

torch::Tensor illum_preserve_loss(const torch::Tensor& warped_synth, const torch::Tensor& profile,
                                  const torch::Tensor& mask, int scales);

struct PerceptualResult {
    torch::Tensor value;
    int regions_used = 0;
    int regions_skipped = 0;
};

/// sum_i w_i L1(phi_i(a), phi_i(b)) on the (masked) full image, plus the same
/// sum restricted to each region box, averaged over the usable regions.
/// `regions[n]` lists the boxes of batch element n.
PerceptualResult perceptual_loss(PerceptualBackbone& backbone, const torch::Tensor& a, const torch::Tensor& b,
                                 const torch::Tensor& mask, const std::vector<std::vector<Box>>& regions,
                                 const std::vector<double>& weights);

struct AdversarialLosses {
    torch::Tensor d_loss;
    torch::Tensor g_loss;
};

/// Non-saturating logistic GAN losses averaged over both critic scales.
/// d_loss uses the detached fake; g_loss keeps the graph to `fake`.
AdversarialLosses adversarial_losses(Discriminator& d, const torch::Tensor& real, const torch::Tensor& fake);

/// Same formulas on precomputed logit maps (one per critic scale).
torch::Tensor discriminator_loss_from_logits(const std::vector<torch::Tensor>& real_logits,
                                             const std::vector<torch::Tensor>& fake_logits);
torch::Tensor generator_loss_from_logits(const std::vector<torch::Tensor>& fake_logits);

/// ||psi_fc2(x) - psi_fc2(gt)||_1 + ||psi_pool(x) - psi_pool(gt)||_1, batch mean.
torch::Tensor identity_loss_single(Embedder& embedder, const torch::Tensor& image, const torch::Tensor& target);

/// identity_loss_single(synth) + identity_loss_single(guided).
torch::Tensor identity_loss(Embedder& embedder, const torch::Tensor& synth, const torch::Tensor& guided,
                            const torch::Tensor& target);

/// mean_k || flow(dst_k) - (src_k - dst_k) ||_2 with flow sampled bilinearly at dst_k.
/// `flow` is [2,H,W] or [N,2,H,W] with one landmark pair list per batch element.
torch::Tensor landmark_flow_loss(const torch::Tensor& flow, const LandmarkSet& src_pts, const LandmarkSet& dst_pts);
torch::Tensor landmark_flow_loss(const torch::Tensor& flow, const std::vector<LandmarkSet>& src_pts,
                                 const std::vector<LandmarkSet>& dst_pts);

/// 1 - masked mean per-location cosine similarity between channel-centered
/// backbone features of W(src, flow) and dst.
torch::Tensor sampling_correctness_loss(PerceptualBackbone& backbone, const torch::Tensor& src,
                                        const torch::Tensor& dst, const torch::Tensor& flow, const torch::Tensor& mask,
                                        int tap);

/// Mean total variation: mean |d/dx flow| + mean |d/dy flow|.
torch::Tensor flow_regularization(const torch::Tensor& flow);

struct LossReport {
    double pixel = 0.0;
    double perceptual = 0.0;
    double adversarial = 0.0;
    double illum_preserve = 0.0;
    double identity = 0.0;
    double total = 0.0;
    std::vector<double> pixel_scales;
    std::vector<double> illum_scales;
    int regions_skipped = 0;

    /// One JSON-lines record: {step, pixel, perceptual, adversarial, illum_preserve, identity, total}.
    std::string to_jsonl(int64_t step) const;
};

struct LossComponents {
    torch::Tensor pixel, perceptual, adversarial, illum_preserve, identity;
};

/// Weighted sum with the configured lambdas; returns the differentiable total
/// and fills `report` with the scalar values.
torch::Tensor total_loss(const LossComponents& parts, const LambdaWeights& lambdas, LossReport& report);

/// Scalar form for already-computed component values.
LossReport total_loss(double pixel, double perceptual, double adversarial, double illum_preserve, double identity,
                      const LambdaWeights& lambdas);

}  // namespace ffwm
