#include "ffwm/nets.hpp"

#include <string>

#include "ffwm/core.hpp"
#include "ffwm/warp.hpp"

namespace ffwm {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

constexpr double kSlope = 0.1;

nn::Conv2d conv(int64_t in, int64_t out, int64_t k = 3, int64_t stride = 1) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

nn::LeakyReLU lrelu() { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(kSlope)); }

torch::Tensor up2(const torch::Tensor& x) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{2.0, 2.0})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

void check_input(const torch::Tensor& x, int resolution, const char* who) {
    if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != resolution || x.size(3) != resolution) {
        throw InvalidArgument(std::string(who) + ": expected [N,3," + std::to_string(resolution) + "," +
                              std::to_string(resolution) + "] input");
    }
}

void check_resolution(int resolution) {
    if (resolution < 16 || resolution % 16 != 0) {
        throw InvalidArgument("network resolution must be a positive multiple of 16");
    }
}

}  // namespace

// ---------------------------------------------------------------------------

FlowEstimatorImpl::FlowEstimatorImpl(int resolution) : resolution_(resolution) {
    check_resolution(resolution);
    const std::vector<int64_t> ch{16, 32, 48, 64, 96};
    stem_ = register_module("stem", conv(3, ch[0]));
    for (size_t l = 1; l < ch.size(); ++l) {
        enc_.push_back(register_module("enc" + std::to_string(l),
                                       nn::Sequential(conv(ch[l - 1], ch[l], 3, 2), lrelu(), conv(ch[l], ch[l]), lrelu())));
    }
    context_ = register_module("context", nn::Linear(ch[4], ch[4]));
    predict_.push_back(register_module("predict4", conv(ch[4], 2)));
    // Decoder levels 3..0 refine the x2-upsampled flow.
    for (int l = 3; l >= 0; --l) {
        const auto i = static_cast<size_t>(l);
        up_.push_back(register_module("up" + std::to_string(l), conv(l == 3 ? ch[4] : ch[i + 1], ch[i])));
        dec_.push_back(register_module("dec" + std::to_string(l),
                                       nn::Sequential(conv(2 * ch[i] + 2, ch[i]), lrelu(), conv(ch[i], ch[i]), lrelu())));
        predict_.push_back(register_module("predict" + std::to_string(l), conv(ch[i], 2)));
    }
    torch::NoGradGuard guard;
    for (auto& p : predict_) {
        p->weight.mul_(0.1);
        p->bias.zero_();
    }
}

torch::Tensor FlowEstimatorImpl::forward(const torch::Tensor& image) {
    check_input(image, resolution_, "FlowEstimator");
    std::vector<torch::Tensor> skips;
    auto x = F::leaky_relu(stem_(image * 2.0 - 1.0), F::LeakyReLUFuncOptions().negative_slope(kSlope));
    skips.push_back(x);
    for (auto& e : enc_) {
        x = e->forward(x);
        skips.push_back(x);
    }
    x = x + context_(x.mean({2, 3})).unsqueeze(-1).unsqueeze(-1);
    auto flow = predict_[0](x);
    auto feat = x;
    for (size_t k = 0; k < dec_.size(); ++k) {
        const auto& skip = skips[3 - k];
        auto up_feat = F::leaky_relu(up_[k](up2(feat)), F::LeakyReLUFuncOptions().negative_slope(kSlope));
        auto up_flow = up2(flow) * 2.0;
        feat = dec_[k]->forward(torch::cat({up_feat, skip, up_flow}, 1));
        flow = up_flow + predict_[k + 1](feat);
    }
    return flow;
}

// ---------------------------------------------------------------------------

ResidualBlockImpl::ResidualBlockImpl(int64_t channels) {
    conv1_ = register_module("conv1", conv(channels, channels));
    bn1_ = register_module("bn1", nn::BatchNorm2d(channels));
    conv2_ = register_module("conv2", conv(channels, channels));
    bn2_ = register_module("bn2", nn::BatchNorm2d(channels));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1_(conv1_(x)));
    y = bn2_(conv2_(y));
    return torch::relu(x + y);
}

WarpAttentionImpl::WarpAttentionImpl(int64_t channels) {
    conv_ = register_module("conv", conv(2 * channels, 2 * channels));
    bn_ = register_module("bn", nn::BatchNorm2d(2 * channels));
    res_ = register_module("res", ResidualBlock(2 * channels));
}

WarpAttentionOutput WarpAttentionImpl::forward(const torch::Tensor& features, const torch::Tensor& flow) {
    if (flow.dim() != 4 || flow.size(1) != 2 || flow.size(0) != features.size(0) ||
        flow.size(2) != features.size(2) || flow.size(3) != features.size(3)) {
        throw InvalidArgument("WarpAttention: flow must match the feature map's batch and spatial size");
    }
    const auto warped = warp(features, flow);
    const auto both = torch::cat({warped, hflip(warped)}, 1);
    torch::Tensor gate;
    if (override_) {
        gate = torch::full_like(both, *override_);
    } else {
        gate = torch::sigmoid(res_(torch::relu(bn_(conv_(both)))));
    }
    return {gate * both, gate};
}

// ---------------------------------------------------------------------------

GeneratorImpl::GeneratorImpl(int resolution) : resolution_(resolution) {
    check_resolution(resolution);
    const std::vector<int64_t> ch{16, 24, 48, 64, 96};
    enc_.push_back(register_module("enc0", nn::Sequential(conv(3, ch[0]), lrelu(), conv(ch[0], ch[0]), lrelu())));
    for (size_t l = 1; l < ch.size(); ++l) {
        enc_.push_back(register_module("enc" + std::to_string(l),
                                       nn::Sequential(conv(ch[l - 1], ch[l], 3, 2), lrelu(), conv(ch[l], ch[l]), lrelu())));
    }
    for (size_t l = 1; l <= 3; ++l) {
        wam_.push_back(register_module("wam" + std::to_string(l), WarpAttention(ch[l])));
    }
    // Decoder from the bottleneck (level 4) back to level 0.
    for (int l = 3; l >= 0; --l) {
        const auto i = static_cast<size_t>(l);
        const int64_t skip = l == 0 ? ch[0] : 2 * ch[i];
        up_.push_back(register_module("up" + std::to_string(l), conv(ch[i + 1], ch[i])));
        dec_.push_back(register_module("dec" + std::to_string(l),
                                       nn::Sequential(conv(ch[i] + skip, ch[i]), lrelu(), conv(ch[i], ch[i]), lrelu())));
    }
    out_ = register_module("out", conv(ch[0], 3));
}

GeneratorOutput GeneratorImpl::forward(const torch::Tensor& profile, const torch::Tensor& forward_flow) {
    check_input(profile, resolution_, "Generator");
    if (forward_flow.dim() != 4 || forward_flow.size(1) != 2 || forward_flow.size(2) != resolution_ ||
        forward_flow.size(3) != resolution_) {
        throw InvalidArgument("Generator: forward flow must be [N,2,H,W] at the generator resolution");
    }
    std::vector<torch::Tensor> feats;
    auto x = profile * 2.0 - 1.0;
    for (auto& e : enc_) {
        x = e->forward(x);
        feats.push_back(x);
    }
    GeneratorOutput out;
    std::vector<torch::Tensor> skips(4);
    skips[0] = feats[0];
    for (size_t l = 1; l <= 3; ++l) {
        const auto& f = feats[l];
        auto res = wam_[l - 1]->forward(f, resize_flow(forward_flow, f.size(2), f.size(3)));
        skips[l] = res.features;
        out.attention.push_back(res.attention);
    }
    auto y = feats[4];
    for (size_t k = 0; k < dec_.size(); ++k) {
        const size_t level = 3 - k;
        y = F::leaky_relu(up_[k](up2(y)), F::LeakyReLUFuncOptions().negative_slope(kSlope));
        y = dec_[k]->forward(torch::cat({y, skips[level]}, 1));
    }
    out.image = torch::sigmoid(out_(y));
    return out;
}

// ---------------------------------------------------------------------------

namespace {

nn::Sequential critic() {
    return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, 32, 4).stride(2).padding(1)), lrelu(),
                          nn::Conv2d(nn::Conv2dOptions(32, 64, 4).stride(2).padding(1)), lrelu(), conv(64, 64), lrelu(),
                          conv(64, 1));
}

}  // namespace

DiscriminatorImpl::DiscriminatorImpl() {
    full_ = register_module("full", critic());
    half_ = register_module("half", critic());
}

std::vector<torch::Tensor> DiscriminatorImpl::forward(const torch::Tensor& image) {
    const auto x = image * 2.0 - 1.0;
    return {full_->forward(x), half_->forward(torch::avg_pool2d(x, {2, 2}, {2, 2}))};
}

// ---------------------------------------------------------------------------

EmbedderImpl::EmbedderImpl() {
    body_ = register_module("body", nn::Sequential(conv(3, 16), lrelu(), conv(16, 32, 3, 2), lrelu(), conv(32, 32), lrelu(),
                                                   conv(32, 64, 3, 2), lrelu(), conv(64, 64), lrelu(),
                                                   conv(64, kPoolDim, 3, 2), lrelu(), conv(kPoolDim, kPoolDim), lrelu()));
    fc2_ = register_module("fc2", nn::Linear(kPoolDim, kFc2Dim));
}

std::pair<torch::Tensor, torch::Tensor> EmbedderImpl::features(const torch::Tensor& image) {
    if (image.dim() != 4 || image.size(1) != 3) {
        throw InvalidArgument("Embedder expects [N,3,H,W]");
    }
    auto pooled = body_->forward(image * 2.0 - 1.0).mean({2, 3});
    auto fc2 = fc2_(pooled);
    return {pooled, fc2};
}

Embedding EmbedderImpl::forward(const torch::Tensor& image) {
    auto [pooled, fc2] = features(image);
    const auto opts = F::NormalizeFuncOptions().p(2).dim(1).eps(1e-12);
    return {F::normalize(pooled, opts), F::normalize(fc2, opts)};
}

torch::Tensor EmbedderImpl::raw_fc2(const torch::Tensor& image) { return features(image).second; }

// ---------------------------------------------------------------------------

int64_t count_parameters(const torch::nn::Module& module) {
    int64_t n = 0;
    for (const auto& p : module.parameters()) {
        n += p.numel();
    }
    return n;
}

void freeze(torch::nn::Module& module) {
    module.eval();
    for (auto& p : module.parameters()) {
        p.set_requires_grad(false);
    }
}

}  // namespace ffwm
