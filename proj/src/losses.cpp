#include "ffwm/losses.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "ffwm/warp.hpp"

namespace ffwm {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// Perceptual backbone

PerceptualBackboneImpl::PerceptualBackboneImpl(uint64_t seed) {
    const std::vector<int64_t> ch{3, 16, 32, 64, 64, 64};
    auto gen = at::detail::createCPUGenerator(seed);
    torch::NoGradGuard guard;
    for (int i = 0; i < kTaps; ++i) {
        const auto in = ch[static_cast<size_t>(i)];
        const auto out = ch[static_cast<size_t>(i) + 1];
        auto c = register_module("conv" + std::to_string(i + 1),
                                 nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
        const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
        c->weight.copy_(torch::randn(c->weight.sizes(), gen) * std);
        c->bias.zero_();
        convs_.push_back(c);
    }
    for (auto& p : parameters()) {
        p.set_requires_grad(false);
    }
    eval();
}

std::vector<torch::Tensor> PerceptualBackboneImpl::taps(const torch::Tensor& image, int count) {
    std::vector<torch::Tensor> out;
    auto x = image * 2.0 - 1.0;
    for (int i = 0; i < count; ++i) {
        if (i > 0) {
            x = torch::avg_pool2d(x, {2, 2}, {2, 2}, {0, 0}, /*ceil_mode=*/true);
        }
        x = torch::relu(convs_[static_cast<size_t>(i)](x));
        out.push_back(x);
    }
    return out;
}

std::vector<torch::Tensor> PerceptualBackboneImpl::forward(const torch::Tensor& image) { return taps(image, kTaps); }

void PerceptualBackboneImpl::load_weights(const std::filesystem::path& path) {
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const std::exception& e) {
        throw IoError("cannot load backbone weights " + path.string() + ": " + e.what());
    }
    load(archive);
    for (auto& p : parameters()) {
        p.set_requires_grad(false);
    }
    eval();
}

// ---------------------------------------------------------------------------

Box region_box(const LandmarkSet& landmarks, const std::vector<int>& indices, int side, int width, int height) {
    double cx = 0.0, cy = 0.0;
    int used = 0;
    for (const int i : indices) {
        if (i >= 0 && static_cast<size_t>(i) < landmarks.size()) {
            cx += landmarks[static_cast<size_t>(i)].x;
            cy += landmarks[static_cast<size_t>(i)].y;
            ++used;
        }
    }
    if (used == 0 || side <= 0) {
        return {};
    }
    cx /= used;
    cy /= used;
    Box b;
    b.x0 = std::clamp(static_cast<int>(std::lround(cx - side / 2.0)), 0, width);
    b.y0 = std::clamp(static_cast<int>(std::lround(cy - side / 2.0)), 0, height);
    b.x1 = std::clamp(b.x0 + side, 0, width);
    b.y1 = std::clamp(b.y0 + side, 0, height);
    return b;
}

// ---------------------------------------------------------------------------

std::vector<torch::Tensor> masked_l1_per_scale(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask,
                                               int scales) {
    if (a.sizes() != b.sizes()) {
        throw InvalidArgument("masked L1: inputs differ in shape");
    }
    const auto am = a * mask;
    const auto bm = b * mask;
    std::vector<torch::Tensor> out;
    for (int s = 0; s < scales; ++s) {
        const int factor = 1 << s;
        const auto da = downsample(am, factor);
        const auto db = downsample(bm, factor);
        const auto dm = downsample(mask, factor);
        const auto mass = dm.sum() * static_cast<double>(a.size(-3));
        out.push_back((da - db).abs().sum() / mass.clamp_min(1e-12));
    }
    return out;
}

torch::Tensor multiscale_masked_l1(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask,
                                   int scales) {
    auto terms = masked_l1_per_scale(a, b, mask, scales);
    auto total = terms.front();
    for (size_t i = 1; i < terms.size(); ++i) {
        total = total + terms[i];
    }
    return total;
}

torch::Tensor pixel_loss(const torch::Tensor& guided, const torch::Tensor& target, const torch::Tensor& mask,
                         int scales) {
    return multiscale_masked_l1(guided, target, mask, scales);
}

torch::Tensor illum_preserve_loss(const torch::Tensor& warped_synth, const torch::Tensor& profile,
                                  const torch::Tensor& mask, int scales) {
    return multiscale_masked_l1(warped_synth, profile, mask, scales);
}

// ---------------------------------------------------------------------------

PerceptualResult perceptual_loss(PerceptualBackbone& backbone, const torch::Tensor& a, const torch::Tensor& b,
                                 const torch::Tensor& mask, const std::vector<std::vector<Box>>& regions,
                                 const std::vector<double>& weights) {
    if (weights.size() != static_cast<size_t>(PerceptualBackboneImpl::kTaps)) {
        throw InvalidArgument("perceptual_loss needs one weight per backbone tap");
    }
    const auto fa = backbone->forward(a * mask);
    const auto fb = backbone->forward(b * mask);

    PerceptualResult res;
    res.value = torch::zeros({}, a.options());
    for (size_t i = 0; i < fa.size(); ++i) {
        res.value = res.value + weights[i] * (fa[i] - fb[i]).abs().mean();
    }

    torch::Tensor region_sum = torch::zeros({}, a.options());
    const int64_t n = a.size(0);
    for (int64_t e = 0; e < n && static_cast<size_t>(e) < regions.size(); ++e) {
        for (const Box& box : regions[static_cast<size_t>(e)]) {
            if (box.area() == 0) {
                ++res.regions_skipped;
                continue;
            }
            torch::Tensor term = torch::zeros({}, a.options());
            for (size_t i = 0; i < fa.size(); ++i) {
                const int f = 1 << i;
                const int64_t fh = fa[i].size(2), fw = fa[i].size(3);
                const int64_t x0 = std::min<int64_t>(box.x0 / f, fw - 1);
                const int64_t y0 = std::min<int64_t>(box.y0 / f, fh - 1);
                const int64_t x1 = std::clamp<int64_t>((box.x1 + f - 1) / f, x0 + 1, fw);
                const int64_t y1 = std::clamp<int64_t>((box.y1 + f - 1) / f, y0 + 1, fh);
                using torch::indexing::Slice;
                const auto ca = fa[i].index({e, Slice(), Slice(y0, y1), Slice(x0, x1)});
                const auto cb = fb[i].index({e, Slice(), Slice(y0, y1), Slice(x0, x1)});
                term = term + weights[i] * (ca - cb).abs().mean();
            }
            region_sum = region_sum + term;
            ++res.regions_used;
        }
    }
    if (res.regions_used > 0) {
        res.value = res.value + region_sum / static_cast<double>(res.regions_used);
    }
    return res;
}

// ---------------------------------------------------------------------------

torch::Tensor discriminator_loss_from_logits(const std::vector<torch::Tensor>& real_logits,
                                             const std::vector<torch::Tensor>& fake_logits) {
    auto total = torch::zeros({}, real_logits.front().options());
    for (size_t s = 0; s < real_logits.size(); ++s) {
        total = total + F::softplus(-real_logits[s]).mean() + F::softplus(fake_logits[s]).mean();
    }
    return total / static_cast<double>(real_logits.size());
}

torch::Tensor generator_loss_from_logits(const std::vector<torch::Tensor>& fake_logits) {
    auto total = torch::zeros({}, fake_logits.front().options());
    for (const auto& l : fake_logits) {
        total = total + F::softplus(-l).mean();
    }
    return total / static_cast<double>(fake_logits.size());
}

AdversarialLosses adversarial_losses(Discriminator& d, const torch::Tensor& real, const torch::Tensor& fake) {
    const auto real_logits = d->forward(real);
    const auto fake_detached = d->forward(fake.detach());
    const auto fake_logits = d->forward(fake);
    return {discriminator_loss_from_logits(real_logits, fake_detached), generator_loss_from_logits(fake_logits)};
}

// ---------------------------------------------------------------------------

torch::Tensor identity_loss_single(Embedder& embedder, const torch::Tensor& image, const torch::Tensor& target) {
    const auto e = embedder->forward(image);
    Embedding t;
    {
        torch::NoGradGuard guard;
        t = embedder->forward(target);
    }
    return (e.fc2 - t.fc2).abs().sum(1).mean() + (e.pool - t.pool).abs().sum(1).mean();
}

torch::Tensor identity_loss(Embedder& embedder, const torch::Tensor& synth, const torch::Tensor& guided,
                            const torch::Tensor& target) {
    return identity_loss_single(embedder, synth, target) + identity_loss_single(embedder, guided, target);
}

// ---------------------------------------------------------------------------

namespace {

// Differentiable bilinear read of a [2,H,W] field at fixed points -> [K,2].
torch::Tensor gather_flow(const torch::Tensor& flow, const LandmarkSet& at) {
    const int64_t h = flow.size(1), w = flow.size(2);
    const auto k = static_cast<int64_t>(at.size());
    auto idx = torch::empty({4, k}, torch::kInt64);
    auto wts = torch::empty({4, k}, torch::kFloat64);
    auto ia = idx.accessor<int64_t, 2>();
    auto wa = wts.accessor<double, 2>();
    for (int64_t i = 0; i < k; ++i) {
        const auto& p = at[static_cast<size_t>(i)];
        if (!(p.x >= 0.f && p.y >= 0.f && p.x <= static_cast<float>(w - 1) && p.y <= static_cast<float>(h - 1))) {
            throw InvalidArgument("landmark_flow_loss: landmark outside the flow field");
        }
        const auto x0 = static_cast<int64_t>(std::floor(p.x));
        const auto y0 = static_cast<int64_t>(std::floor(p.y));
        const int64_t x1 = std::min(x0 + 1, w - 1);
        const int64_t y1 = std::min(y0 + 1, h - 1);
        const double ax = p.x - static_cast<double>(x0);
        const double ay = p.y - static_cast<double>(y0);
        ia[0][i] = y0 * w + x0;
        ia[1][i] = y0 * w + x1;
        ia[2][i] = y1 * w + x0;
        ia[3][i] = y1 * w + x1;
        wa[0][i] = (1 - ax) * (1 - ay);
        wa[1][i] = ax * (1 - ay);
        wa[2][i] = (1 - ax) * ay;
        wa[3][i] = ax * ay;
    }
    const auto flat = flow.reshape({2, h * w});
    wts = wts.to(flow.scalar_type());
    torch::Tensor out = torch::zeros({2, k}, flow.options());
    for (int64_t c = 0; c < 4; ++c) {
        out = out + flat.index_select(1, idx[c]) * wts[c];
    }
    return out.t();
}

}  // namespace

torch::Tensor landmark_flow_loss(const torch::Tensor& flow, const std::vector<LandmarkSet>& src_pts,
                                 const std::vector<LandmarkSet>& dst_pts) {
    const auto f = flow.dim() == 3 ? flow.unsqueeze(0) : flow;
    if (static_cast<size_t>(f.size(0)) != src_pts.size() || src_pts.size() != dst_pts.size()) {
        throw InvalidArgument("landmark_flow_loss: one landmark pair list per batch element required");
    }
    torch::Tensor total = torch::zeros({}, f.options());
    int64_t count = 0;
    for (size_t n = 0; n < src_pts.size(); ++n) {
        if (src_pts[n].size() != dst_pts[n].size()) {
            throw InvalidArgument("landmark_flow_loss: landmark sets differ in size");
        }
        if (dst_pts[n].empty()) {
            continue;
        }
        const auto predicted = gather_flow(f[static_cast<int64_t>(n)], dst_pts[n]);
        const auto target = (landmarks_to_tensor(src_pts[n]) - landmarks_to_tensor(dst_pts[n])).to(f.scalar_type());
        const auto err = predicted - target;
        // smoothed norm, shifted so a perfect match scores exactly 0
        total = total + (torch::sqrt(err.pow(2).sum(1) + 1e-12) - 1e-6).sum();
        count += static_cast<int64_t>(dst_pts[n].size());
    }
    if (count == 0) {
        throw InvalidArgument("landmark_flow_loss: no landmarks");
    }
    return total / static_cast<double>(count);
}

torch::Tensor landmark_flow_loss(const torch::Tensor& flow, const LandmarkSet& src_pts, const LandmarkSet& dst_pts) {
    return landmark_flow_loss(flow, std::vector<LandmarkSet>{src_pts}, std::vector<LandmarkSet>{dst_pts});
}

// ---------------------------------------------------------------------------

torch::Tensor sampling_correctness_loss(PerceptualBackbone& backbone, const torch::Tensor& src,
                                        const torch::Tensor& dst, const torch::Tensor& flow, const torch::Tensor& mask,
                                        int tap) {
    const auto warped = warp(src, flow) * mask;
    const auto target = dst * mask;
    const auto fa = backbone->taps(warped, tap + 1).back();
    const auto fb = backbone->taps(target, tap + 1).back();
    const auto m = F::adaptive_avg_pool2d(mask, F::AdaptiveAvgPool2dFuncOptions({fa.size(2), fa.size(3)}));
    const auto mass = m.sum({2, 3}, true).clamp_min(1e-12);
    const auto ca = fa - (fa * m).sum({2, 3}, true) / mass;
    const auto cb = fb - (fb * m).sum({2, 3}, true) / mass;
    constexpr double eps = 1e-6;
    const auto cosine = ((ca * cb).sum(1, true) + eps) /
                        (torch::sqrt(ca.pow(2).sum(1, true) + eps) * torch::sqrt(cb.pow(2).sum(1, true) + eps));
    return ((1.0 - cosine) * m).sum() / m.sum().clamp_min(1e-12);
}

torch::Tensor flow_regularization(const torch::Tensor& flow) {
    using torch::indexing::None;
    using torch::indexing::Slice;
    const auto f = flow.dim() == 3 ? flow.unsqueeze(0) : flow;
    const auto gx = f.index({Slice(), Slice(), Slice(), Slice(1, None)}) -
                    f.index({Slice(), Slice(), Slice(), Slice(None, -1)});
    const auto gy = f.index({Slice(), Slice(), Slice(1, None), Slice()}) -
                    f.index({Slice(), Slice(), Slice(None, -1), Slice()});
    return gx.abs().sum(1).mean() + gy.abs().sum(1).mean();
}

// ---------------------------------------------------------------------------

std::string LossReport::to_jsonl(int64_t step) const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["pixel"] = pixel;
    j["perceptual"] = perceptual;
    j["adversarial"] = adversarial;
    j["illum_preserve"] = illum_preserve;
    j["identity"] = identity;
    j["total"] = total;
    return j.dump();
}

torch::Tensor total_loss(const LossComponents& parts, const LambdaWeights& lambdas, LossReport& report) {
    const auto total = lambdas[0] * parts.pixel + lambdas[1] * parts.perceptual + lambdas[2] * parts.adversarial +
                       lambdas[3] * parts.illum_preserve + lambdas[4] * parts.identity;
    report.pixel = parts.pixel.item<double>();
    report.perceptual = parts.perceptual.item<double>();
    report.adversarial = parts.adversarial.item<double>();
    report.illum_preserve = parts.illum_preserve.item<double>();
    report.identity = parts.identity.item<double>();
    report.total = lambdas[0] * report.pixel + lambdas[1] * report.perceptual + lambdas[2] * report.adversarial +
                   lambdas[3] * report.illum_preserve + lambdas[4] * report.identity;
    return total;
}

LossReport total_loss(double pixel, double perceptual, double adversarial, double illum_preserve, double identity,
                      const LambdaWeights& lambdas) {
    LossReport r;
    r.pixel = pixel;
    r.perceptual = perceptual;
    r.adversarial = adversarial;
    r.illum_preserve = illum_preserve;
    r.identity = identity;
    r.total = lambdas[0] * pixel + lambdas[1] * perceptual + lambdas[2] * adversarial + lambdas[3] * illum_preserve +
              lambdas[4] * identity;
    return r;
}

}  // namespace ffwm
